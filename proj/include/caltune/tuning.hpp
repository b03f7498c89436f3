#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "caltune/calibration.hpp"
#include "caltune/dispersion.hpp"
#include "caltune/simulator.hpp"

namespace caltune::tpt {

using core::dense_matrix;
using core::vec;

enum class optimizer_kind {
    adaptive_moment_decoupled_decay,
    plain_gradient_descent,
};

struct tuning_config {
    double lambda = 50.0;
    double learning_rate = 0.005;
    std::size_t steps = 1;
    std::size_t n_views = 64;
    double view_sigma = 0.05;
    double confidence_percentile = 0.10; // fraction of views kept, lowest entropy
    optimizer_kind optimizer = optimizer_kind::adaptive_moment_decoupled_decay;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.01;

    void validate() const;
};

struct loss_grad {
    double loss = 0.0;
    dense_matrix grad; // L x D, same shape as the prompt tokens
};

struct tpt_loss_result {
    double loss = 0.0;
    dense_matrix grad;
    std::vector<std::size_t> kept_views;
};

// keep the ceil(percentile * V) views with the lowest entropy, ties by index
std::vector<std::size_t> select_confident_views(const std::vector<double>& entropies,
                                                double percentile);

// Marginal entropy of the averaged per-view distribution over an explicit
// view subset. The mask is a constant for differentiation purposes; finite
// difference checks go through this entry point.
loss_grad tpt_loss_masked(const sim::prompt_embedding& prompt,
                          const sim::class_vocabulary& vocab,
                          const std::vector<vec>& views,
                          const std::vector<std::size_t>& kept,
                          const sim::synthetic_encoder_config& cfg, double tau);

tpt_loss_result tpt_loss(const sim::prompt_embedding& prompt,
                         const sim::class_vocabulary& vocab,
                         const std::vector<vec>& views,
                         const sim::synthetic_encoder_config& cfg,
                         const tuning_config& tuning, double tau);

// loss = -ATFD of the prompt's text features; the gradient chains the
// dispersion gradient through the text encoder
loss_grad ctpt_loss(const sim::prompt_embedding& prompt,
                    const sim::class_vocabulary& vocab,
                    const sim::synthetic_encoder_config& cfg);

// Adaptive-moment state with decoupled weight decay. Fresh per episode:
// test-time adaptation never carries moments across samples.
struct adaptive_moment_state {
    dense_matrix moment1;
    dense_matrix moment2;
    std::size_t step_count = 0;

    explicit adaptive_moment_state(std::size_t rows = 0, std::size_t cols = 0)
        : moment1(rows, cols, 0.0), moment2(rows, cols, 0.0) {}
};

void optimizer_step(sim::prompt_embedding& prompt, const dense_matrix& grad,
                    const tuning_config& tuning, adaptive_moment_state& state);

// total gradient = grad_tpt + lambda * grad_ctpt (exact tpt-only when
// lambda == 0), then one optimizer step. Throws non_finite_gradient.
sim::prompt_embedding joint_step(const sim::prompt_embedding& prompt,
                                 const sim::class_vocabulary& vocab,
                                 const std::vector<vec>& views,
                                 const sim::synthetic_encoder_config& cfg,
                                 const tuning_config& tuning, double tau,
                                 adaptive_moment_state& state);

struct episode_result {
    calib::prediction_record record_before;
    calib::prediction_record record_after;
    double atfd_before = 0.0;
    double atfd_after = 0.0;
    std::vector<double> tpt_loss_trace;
    std::vector<double> ctpt_loss_trace;
    std::uint64_t view_hash = 0;
    bool non_finite_abort = false;
};

// One test sample: record before, `steps` joint updates on the augmented
// views, record after from the tuned prompt on the clean view. The tuned
// prompt is discarded; the caller always restarts from prompt_init.
episode_result run_episode(const vec& latent, std::size_t label,
                           const sim::prompt_embedding& prompt_init,
                           const sim::class_vocabulary& vocab,
                           const sim::synthetic_encoder_config& cfg,
                           const tuning_config& tuning, double tau,
                           std::uint64_t view_seed);

struct arm_result {
    std::string name;
    calib::calibration_report report;
    double mean_atfd = 0.0;
    std::size_t non_finite_episodes = 0;
    std::vector<episode_result> episodes;
};

struct experiment_config {
    std::vector<std::string> arms = {"baseline", "tpt", "ctpt"};
    std::size_t bins = 15;
    std::uint64_t view_seed_base = 3;
    std::size_t threads = 1;
};

// Evaluates the requested arms over the same episodes: baseline (no
// tuning), tpt (lambda = 0), ctpt (lambda from the tuning config), and an
// optional logit-averaging ensemble over all prompt inits. Arms are paired:
// every arm sees identical augmented views per episode.
std::vector<arm_result> run_experiment(const sim::sample_batch& dataset,
                                       const std::vector<sim::prompt_embedding>& prompt_inits,
                                       const sim::class_vocabulary& vocab,
                                       const sim::synthetic_encoder_config& cfg,
                                       const tuning_config& tuning, double tau,
                                       const experiment_config& experiment);

struct sweep_row {
    double lambda = 0.0;
    double accuracy = 0.0;
    double ece = 0.0;
    double mean_atfd = 0.0;
};

// one full experiment per lambda with identical seeds; rows describe the
// joint (tpt + dispersion) arm
std::vector<sweep_row> sweep_lambda(const sim::sample_batch& dataset,
                                    const sim::prompt_embedding& prompt_init,
                                    const sim::class_vocabulary& vocab,
                                    const sim::synthetic_encoder_config& cfg,
                                    const tuning_config& tuning, double tau,
                                    const std::vector<double>& lambdas,
                                    const experiment_config& experiment);

// zero-shot accuracy/ece/atfd per prompt; the raw material for the
// dispersion-vs-calibration correlation analysis
std::vector<dispersion::prompt_result> evaluate_prompt_family(
    const std::vector<sim::prompt_embedding>& prompts,
    const sim::class_vocabulary& vocab, const sim::synthetic_encoder_config& cfg,
    const sim::sample_batch& dataset, double tau, std::size_t bins);

} // namespace caltune::tpt
