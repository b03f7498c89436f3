#include <iostream>
#include <string>
#include <vector>

#include "caltune/io.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return caltune::io::run_cli(args, std::cout, std::cerr);
}
