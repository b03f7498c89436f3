#pragma once

#include <cstddef>
#include <vector>

#include "caltune/numeric.hpp"

namespace caltune::dispersion {

using core::vec;

// The N class-conditioned text features produced by one prompt.
struct text_feature_set {
    std::vector<vec> features;
    std::vector<std::size_t> class_ids;

    std::size_t size() const { return features.size(); }
    std::size_t dim() const { return features.empty() ? 0 : features.front().size(); }
};

struct dispersion_stats {
    vec centroid;
    double atfd = 0.0;
    std::vector<double> per_class_distance;
};

// coordinate-wise mean of the feature set
vec centroid(const text_feature_set& set);

// mean L2 distance between the centroid and each feature
dispersion_stats atfd(const text_feature_set& set);

// d ATFD / d t_i with the centroid treated as a function of every t_i:
//   (1/N) [ u_i - (1/N) sum_j u_j ],  u_j = (t_j - c) / ||t_j - c||,
// where any u_j with ||t_j - c|| <= 1e-12 is replaced by zero (subgradient).
std::vector<vec> atfd_gradient(const text_feature_set& set);

double pearson(const std::vector<double>& x, const std::vector<double>& y);

// fractional (average) ranks for ties, 1-based
std::vector<double> fractional_ranks(const std::vector<double>& x);

// Pearson correlation of the two rank vectors
double spearman(const std::vector<double>& x, const std::vector<double>& y);

struct prompt_result {
    double accuracy = 0.0;
    double ece = 0.0;
    double atfd = 0.0;
};

struct family_correlation {
    double pearson_r = 0.0;
    std::size_t retained_count = 0;
};

// Keeps prompts with accuracy >= max(accuracy) - accuracy_band, then
// correlates atfd against ece over the survivors. Throws
// insufficient_survivors when fewer than 3 remain.
family_correlation correlate_prompt_family(const std::vector<prompt_result>& results,
                                           double accuracy_band);

} // namespace caltune::dispersion
