#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "caltune/calibration.hpp"
#include "caltune/tuning.hpp"

namespace caltune::io {

using core::vec;

// --- ingestion -----------------------------------------------------------

struct prediction_log {
    std::vector<calib::logit_label_pair> pairs;
    std::vector<std::string> ids; // empty string where the line had no id
    std::size_t num_classes = 0;
};

// One JSON object per line: {"logits": [...], "label": n, "id"?: "..."}.
// Rejects NaN/Inf logits, bad labels and malformed JSON with the offending
// line number; class count must be constant across the file.
prediction_log read_prediction_log(const std::filesystem::path& path);

struct embedding_set {
    std::string prompt_id;
    std::vector<vec> features;
};

struct embedding_file {
    std::size_t dim = 0;
    std::vector<embedding_set> sets;
};

embedding_file read_embedding_file(const std::filesystem::path& path);
void write_embedding_file(const std::filesystem::path& path, const embedding_file& file);

// --- experiment configuration --------------------------------------------

struct prompt_family_spec {
    bool enabled = false;
    std::size_t count = 40;
    std::uint64_t seed = 21;
    double scale_min = 0.0;
    double scale_max = 1.0;
};

// Single JSON document that fully determines a simulation.
struct experiment_spec {
    std::size_t dim = 16;
    std::size_t prompt_length = 4;
    std::size_t num_classes = 20;
    std::size_t dataset_size = 500;
    double tau = 0.01;
    std::size_t bins = 15;
    double image_noise_sigma = 0.1;
    double label_noise = 0.2;
    double prompt_mixing_scale = 0.35;
    double prompt_init_scale = 0.5;
    std::uint64_t vocabulary_seed = 1;
    std::uint64_t dataset_seed = 2;
    std::uint64_t views_seed = 3;
    std::uint64_t encoder_seed = 4;
    std::vector<std::uint64_t> prompt_seeds = {11};
    tpt::tuning_config tuning;
    std::vector<std::string> arms = {"baseline", "tpt", "ctpt"};
    std::string output_directory = "out";
    std::string output_prefix = "run";
    bool emit_embeddings = false;
    prompt_family_spec prompt_family;
};

// Strict schema: unknown keys are rejected, every violation is reported
// with its JSON pointer path.
experiment_spec parse_experiment_config(const std::string& json_text);
experiment_spec load_experiment_config(const std::filesystem::path& path);

// --- formatting and files --------------------------------------------------

// '.' decimal separator, 17 significant digits (full double round trip)
std::string format_double(double value);

std::uint64_t fnv1a64(const std::string& bytes);

// write-temp-then-rename so partially written artifacts never appear
void atomic_write(const std::filesystem::path& path, const std::string& content);

std::string read_file(const std::filesystem::path& path);

// CALTUNE_THREADS caps episode parallelism; absent means hardware default
std::size_t thread_cap_from_env();

// --- command implementations ------------------------------------------------

struct simulate_result {
    std::vector<std::filesystem::path> data_files;
    std::filesystem::path manifest_file;
};

simulate_result simulate_run(const experiment_spec& spec, const std::string& config_text,
                             const std::vector<double>& sweep_lambdas,
                             const std::filesystem::path& output_directory,
                             std::size_t threads);

// argv-style entry point used by both the binary and the tests;
// returns the process exit code (0 ok, 2 usage/input, 3 numeric failure)
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace caltune::io
