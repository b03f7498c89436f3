#pragma once

#include <cstddef>
#include <vector>

#include "caltune/numeric.hpp"

namespace caltune::calib {

using core::vec;

// Per-sample atom of calibration analysis. predicted is always the
// lowest-index argmax of probs; confidence = max(probs).
struct prediction_record {
    vec logits;
    vec probs;
    std::size_t predicted = 0;
    double confidence = 0.0;
    std::size_t label = 0;

    bool correct() const { return predicted == label; }
};

struct reliability_bin {
    double lo = 0.0; // exclusive, except bin 1 which also absorbs confidence 0
    double hi = 0.0; // inclusive
    std::size_t count = 0;
    double accuracy = 0.0;       // 0 when empty
    double mean_confidence = 0.0; // 0 when empty
};

struct reliability_bins {
    std::size_t num_bins = 0;
    std::vector<reliability_bin> bins; // equal width, edge_k = k / K
};

struct calibration_report {
    double ece = 0.0;
    double accuracy = 0.0;
    double mean_confidence = 0.0;
    reliability_bins bins;
};

// softmax the logits at temperature tau and fill in the derived fields
prediction_record make_record(const vec& logits, double tau, std::size_t label);

// Equal-width confidence binning: confidence c lands in bin ceil(c * K),
// clamped to [1, K] so c = 0 goes to bin 1.
std::size_t bin_index(double confidence, std::size_t num_bins);

calibration_report ece(const std::vector<prediction_record>& records, std::size_t num_bins);

struct logit_label_pair {
    vec logits;
    std::size_t label = 0;
};

// Mean negative log-likelihood of softmax(logits / t) over the pairs.
double mean_nll(const std::vector<logit_label_pair>& pairs, double temperature);

// Minimizes mean NLL by golden-section search on ln T over
// [ln t_min, ln t_max] to 1e-4 absolute tolerance in ln T. When T = 1 lies
// in the range the result is never worse than leaving the logits alone.
double fit_temperature(const std::vector<logit_label_pair>& pairs, double t_min,
                       double t_max);

// Re-softmax at temperature t * tau_base. Never changes the predicted class.
prediction_record apply_temperature(const prediction_record& record, double t,
                                    double tau_base = 1.0);

} // namespace caltune::calib
