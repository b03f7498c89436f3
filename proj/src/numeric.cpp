#include "caltune/numeric.hpp"

#include <algorithm>
#include <cmath>

namespace caltune::core {

double dot(const vec& a, const vec& b) {
    if (a.size() != b.size())
        throw error(errc::dimension_mismatch, "dot: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double l2_norm(const vec& x) { return std::sqrt(dot(x, x)); }

vec l2_normalize(const vec& x) {
    const double n = l2_norm(x);
    if (n <= 1e-12)
        throw error(errc::zero_vector, "l2_normalize: zero vector");
    vec out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / n;
    return out;
}

double cosine_similarity(const vec& a, const vec& b) {
    const double na = l2_norm(a);
    const double nb = l2_norm(b);
    if (na <= 1e-12 || nb <= 1e-12)
        throw error(errc::zero_vector, "cosine_similarity: zero vector");
    return dot(a, b) / (na * nb);
}

vec softmax_temperature(const vec& scores, double tau) {
    if (!(tau > 0.0))
        throw error(errc::non_positive_temperature, "softmax: tau must be > 0");
    if (scores.empty())
        throw error(errc::dimension_mismatch, "softmax: empty scores");
    double hi = scores[0];
    for (double s : scores) {
        if (!std::isfinite(s))
            throw error(errc::non_finite_score, "softmax: non-finite score");
        hi = std::max(hi, s);
    }
    vec out(scores.size());
    double total = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        out[i] = std::exp((scores[i] - hi) / tau);
        total += out[i];
    }
    for (double& p : out) p /= total;
    return out;
}

double entropy(const vec& probs) {
    double h = 0.0;
    for (double p : probs)
        if (p > 0.0) h -= p * std::log(p);
    return h;
}

std::size_t argmax_lowest(const vec& values) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i)
        if (values[i] > values[best]) best = i;
    return best;
}

vec matvec(const dense_matrix& a, const vec& x) {
    if (a.cols != x.size())
        throw error(errc::dimension_mismatch, "matvec: shape mismatch");
    vec out(a.rows, 0.0);
    for (std::size_t r = 0; r < a.rows; ++r) {
        double s = 0.0;
        const double* row = &a.values[r * a.cols];
        for (std::size_t c = 0; c < a.cols; ++c) s += row[c] * x[c];
        out[r] = s;
    }
    return out;
}

vec matvec_transpose(const dense_matrix& a, const vec& x) {
    if (a.rows != x.size())
        throw error(errc::dimension_mismatch, "matvec_transpose: shape mismatch");
    vec out(a.cols, 0.0);
    for (std::size_t r = 0; r < a.rows; ++r) {
        const double* row = &a.values[r * a.cols];
        for (std::size_t c = 0; c < a.cols; ++c) out[c] += row[c] * x[r];
    }
    return out;
}

double grad_check(const std::function<double(const vec&)>& f, const vec& x,
                  const vec& analytic_grad) {
    if (analytic_grad.size() != x.size())
        throw error(errc::dimension_mismatch, "grad_check: gradient size mismatch");
    vec probe = x;
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double h = 1e-5 * std::max(1.0, std::fabs(x[i]));
        probe[i] = x[i] + h;
        const double fp = f(probe);
        probe[i] = x[i] - h;
        const double fm = f(probe);
        probe[i] = x[i];
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw error(errc::non_finite_evaluation, "grad_check: non-finite evaluation");
        const double fd = (fp - fm) / (2.0 * h);
        const double err = std::fabs(fd - analytic_grad[i]) / std::max(1.0, std::fabs(fd));
        worst = std::max(worst, err);
    }
    return worst;
}

} // namespace caltune::core
