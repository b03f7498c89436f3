#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "caltune/errors.hpp"

namespace caltune::core {

using vec = std::vector<double>;

struct dense_matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values; // row-major, values.size() == rows * cols

    dense_matrix() = default;
    dense_matrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), values(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

double dot(const vec& a, const vec& b);
double l2_norm(const vec& x);

// x / ||x||; throws zero_vector when ||x|| <= 1e-12
vec l2_normalize(const vec& x);

// (a.b) / (||a|| ||b||), in [-1, 1]; throws zero_vector on degenerate input
double cosine_similarity(const vec& a, const vec& b);

// exp(s_i / tau) / sum_j exp(s_j / tau), computed with max-subtraction so
// small tau cannot overflow. Throws non_positive_temperature / non_finite_score.
vec softmax_temperature(const vec& scores, double tau);

// -sum p_i ln p_i with 0 ln 0 := 0
double entropy(const vec& probs);

// lowest index wins ties; the tie-break every prediction path shares
std::size_t argmax_lowest(const vec& values);

// w = A x  (A: m x n, x: n)
vec matvec(const dense_matrix& a, const vec& x);

// w = A^T x  (A: m x n, x: m)
vec matvec_transpose(const dense_matrix& a, const vec& x);

// Central finite differences with per-coordinate step h = 1e-5 * max(1, |x_i|).
// Returns max_i |g_fd,i - g_an,i| / max(1, |g_fd,i|).
// Throws non_finite_evaluation when f produces a non-finite value.
double grad_check(const std::function<double(const vec&)>& f, const vec& x,
                  const vec& analytic_grad);

} // namespace caltune::core
