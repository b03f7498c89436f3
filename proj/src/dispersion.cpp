#include "caltune/dispersion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace caltune::dispersion {

namespace {

void check_set(const text_feature_set& set) {
    if (set.size() < 2)
        throw error(errc::dimension_mismatch, "text feature set needs >= 2 features");
    const std::size_t dim = set.features.front().size();
    for (const auto& f : set.features)
        if (f.size() != dim)
            throw error(errc::dimension_mismatch, "text feature set has mixed dimensions");
}

} // namespace

vec centroid(const text_feature_set& set) {
    check_set(set);
    const std::size_t n = set.size();
    const std::size_t dim = set.dim();
    vec c(dim, 0.0);
    for (const auto& f : set.features)
        for (std::size_t d = 0; d < dim; ++d) c[d] += f[d];
    for (double& v : c) v /= static_cast<double>(n);
    return c;
}

dispersion_stats atfd(const text_feature_set& set) {
    dispersion_stats stats;
    stats.centroid = centroid(set);
    stats.per_class_distance.reserve(set.size());
    double total = 0.0;
    for (const auto& f : set.features) {
        double sq = 0.0;
        for (std::size_t d = 0; d < f.size(); ++d) {
            const double diff = stats.centroid[d] - f[d];
            sq += diff * diff;
        }
        const double dist = std::sqrt(sq);
        stats.per_class_distance.push_back(dist);
        total += dist;
    }
    stats.atfd = total / static_cast<double>(set.size());
    return stats;
}

std::vector<vec> atfd_gradient(const text_feature_set& set) {
    check_set(set);
    const std::size_t n = set.size();
    const std::size_t dim = set.dim();
    const vec c = centroid(set);

    // u_j = (t_j - c) / ||t_j - c||, zero at the non-differentiable point
    std::vector<vec> unit(n, vec(dim, 0.0));
    vec unit_sum(dim, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        double sq = 0.0;
        for (std::size_t d = 0; d < dim; ++d) {
            const double diff = set.features[j][d] - c[d];
            unit[j][d] = diff;
            sq += diff * diff;
        }
        const double dist = std::sqrt(sq);
        if (dist <= 1e-12) {
            std::fill(unit[j].begin(), unit[j].end(), 0.0);
            continue;
        }
        for (std::size_t d = 0; d < dim; ++d) {
            unit[j][d] /= dist;
            unit_sum[d] += unit[j][d];
        }
    }

    const double inv_n = 1.0 / static_cast<double>(n);
    std::vector<vec> grads(n, vec(dim, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t d = 0; d < dim; ++d)
            grads[i][d] = inv_n * (unit[i][d] - inv_n * unit_sum[d]);
    return grads;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size())
        throw error(errc::length_mismatch, "pearson: length mismatch");
    if (x.size() < 2)
        throw error(errc::length_mismatch, "pearson: need >= 2 points");
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx;
        const double dy = y[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx <= 0.0 || syy <= 0.0)
        throw error(errc::zero_variance, "pearson: zero variance");
    return sxy / std::sqrt(sxx * syy);
}

std::vector<double> fractional_ranks(const std::vector<double>& x) {
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(x.size(), 0.0);
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg_rank;
        i = j + 1;
    }
    return ranks;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size())
        throw error(errc::length_mismatch, "spearman: length mismatch");
    return pearson(fractional_ranks(x), fractional_ranks(y));
}

family_correlation correlate_prompt_family(const std::vector<prompt_result>& results,
                                           double accuracy_band) {
    if (results.empty())
        throw error(errc::empty_record_set, "correlate_prompt_family: no results");
    if (accuracy_band < 0.0)
        throw error(errc::invalid_range, "correlate_prompt_family: band must be >= 0");
    double best = results.front().accuracy;
    for (const auto& r : results) best = std::max(best, r.accuracy);

    std::vector<double> atfds, eces;
    for (const auto& r : results) {
        if (r.accuracy >= best - accuracy_band) {
            atfds.push_back(r.atfd);
            eces.push_back(r.ece);
        }
    }
    if (atfds.size() < 3)
        throw error(errc::insufficient_survivors,
                    "correlate_prompt_family: fewer than 3 prompts inside the accuracy band");
    family_correlation out;
    out.pearson_r = pearson(atfds, eces);
    out.retained_count = atfds.size();
    return out;
}

} // namespace caltune::dispersion
