#include "caltune/calibration.hpp"

#include <algorithm>
#include <cmath>

namespace caltune::calib {

prediction_record make_record(const vec& logits, double tau, std::size_t label) {
    prediction_record rec;
    rec.logits = logits;
    rec.probs = core::softmax_temperature(logits, tau);
    rec.predicted = core::argmax_lowest(rec.probs);
    rec.confidence = rec.probs[rec.predicted];
    rec.label = label;
    return rec;
}

std::size_t bin_index(double confidence, std::size_t num_bins) {
    const double raw = std::ceil(confidence * static_cast<double>(num_bins));
    long b = static_cast<long>(raw);
    if (b < 1) b = 1;
    if (b > static_cast<long>(num_bins)) b = static_cast<long>(num_bins);
    return static_cast<std::size_t>(b);
}

calibration_report ece(const std::vector<prediction_record>& records, std::size_t num_bins) {
    if (records.empty())
        throw error(errc::empty_record_set, "ece: no records");
    if (num_bins < 1)
        throw error(errc::invalid_range, "ece: bin count must be >= 1");

    reliability_bins rb;
    rb.num_bins = num_bins;
    rb.bins.resize(num_bins);
    std::vector<std::vector<double>> bin_confs(num_bins);
    std::vector<std::size_t> hits(num_bins, 0);

    for (std::size_t k = 0; k < num_bins; ++k) {
        rb.bins[k].lo = static_cast<double>(k) / static_cast<double>(num_bins);
        rb.bins[k].hi = static_cast<double>(k + 1) / static_cast<double>(num_bins);
    }

    std::size_t total_correct = 0;
    for (const auto& rec : records) {
        const std::size_t k = bin_index(rec.confidence, num_bins) - 1;
        rb.bins[k].count += 1;
        bin_confs[k].push_back(rec.confidence);
        if (rec.correct()) {
            hits[k] += 1;
            total_correct += 1;
        }
    }

    const double m = static_cast<double>(records.size());
    double ece_value = 0.0;
    double total_conf = 0.0;
    for (std::size_t k = 0; k < num_bins; ++k) {
        auto& bin = rb.bins[k];
        if (bin.count == 0) continue; // empty bins carry zero weight
        // sum in sorted order so the result is independent of record order
        std::sort(bin_confs[k].begin(), bin_confs[k].end());
        double conf_sum = 0.0;
        for (double c : bin_confs[k]) conf_sum += c;
        total_conf += conf_sum;
        bin.accuracy = static_cast<double>(hits[k]) / static_cast<double>(bin.count);
        bin.mean_confidence = conf_sum / static_cast<double>(bin.count);
        ece_value += (static_cast<double>(bin.count) / m) *
                     std::fabs(bin.accuracy - bin.mean_confidence);
    }

    calibration_report report;
    report.ece = ece_value;
    report.accuracy = static_cast<double>(total_correct) / m;
    report.mean_confidence = total_conf / m;
    report.bins = std::move(rb);
    return report;
}

double mean_nll(const std::vector<logit_label_pair>& pairs, double temperature) {
    if (pairs.empty())
        throw error(errc::empty_record_set, "mean_nll: no pairs");
    double total = 0.0;
    for (const auto& pair : pairs) {
        double hi = pair.logits[0];
        for (double s : pair.logits) hi = std::max(hi, s);
        double z = 0.0;
        for (double s : pair.logits) z += std::exp((s - hi) / temperature);
        // -ln softmax(l/T)[label] = ln Z - (l_label - hi) / T
        total += std::log(z) - (pair.logits[pair.label] - hi) / temperature;
    }
    return total / static_cast<double>(pairs.size());
}

double fit_temperature(const std::vector<logit_label_pair>& pairs, double t_min,
                       double t_max) {
    if (pairs.empty())
        throw error(errc::empty_record_set, "fit_temperature: no pairs");
    if (!(t_min > 0.0) || !(t_min < t_max))
        throw error(errc::invalid_range, "fit_temperature: need 0 < t_min < t_max");

    const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double lo = std::log(t_min);
    double hi = std::log(t_max);
    double c = hi - inv_phi * (hi - lo);
    double d = lo + inv_phi * (hi - lo);
    double fc = mean_nll(pairs, std::exp(c));
    double fd = mean_nll(pairs, std::exp(d));
    while (hi - lo > 1e-4) {
        // ties move the bracket down so plateaus resolve to the smaller T
        if (fc <= fd) {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = mean_nll(pairs, std::exp(c));
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = mean_nll(pairs, std::exp(d));
        }
    }
    double best = std::exp(0.5 * (lo + hi));
    // Guarantee we never report a fit worse than the identity temperature.
    if (t_min <= 1.0 && 1.0 <= t_max && mean_nll(pairs, 1.0) < mean_nll(pairs, best))
        best = 1.0;
    return best;
}

prediction_record apply_temperature(const prediction_record& record, double t,
                                    double tau_base) {
    if (!(t > 0.0))
        throw error(errc::non_positive_temperature, "apply_temperature: t must be > 0");
    return make_record(record.logits, t * tau_base, record.label);
}

} // namespace caltune::calib
