#pragma once

#include <stdexcept>
#include <string>

namespace caltune {

enum class errc {
    zero_vector,
    non_positive_temperature,
    non_finite_score,
    non_finite_evaluation,
    non_finite_gradient,
    empty_record_set,
    invalid_range,
    dimension_mismatch,
    length_mismatch,
    zero_variance,
    insufficient_survivors,
    generation_failure,
    malformed_line,
    inconsistent_class_count,
    schema_error,
    io_error,
};

class error : public std::runtime_error {
public:
    error(errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
    errc code() const noexcept { return code_; }

private:
    errc code_;
};

// CLI contract: 0 success, 2 usage/input error, 3 internal numeric failure.
inline int exit_code_for(errc code) noexcept {
    switch (code) {
    case errc::zero_vector:
    case errc::non_finite_evaluation:
    case errc::non_finite_gradient:
        return 3;
    default:
        return 2;
    }
}

} // namespace caltune
