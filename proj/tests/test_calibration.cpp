#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "caltune/calibration.hpp"
#include "caltune/rng.hpp"
#include "support/oracles.hpp"

using namespace caltune;
using calib::logit_label_pair;
using calib::prediction_record;
using core::vec;

namespace {

prediction_record synthetic_record(double confidence, bool correct) {
    prediction_record rec;
    rec.logits = {0.0, 0.0};
    rec.probs = {confidence, 1.0 - confidence};
    rec.predicted = 0;
    rec.confidence = confidence;
    rec.label = correct ? 0 : 1;
    return rec;
}

std::vector<prediction_record> random_records(std::size_t count, std::uint64_t seed) {
    seeded_rng rng(seed);
    std::vector<prediction_record> records;
    records.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        vec logits(4);
        for (double& l : logits) l = rng.gaussian(0.0, 2.0);
        records.push_back(calib::make_record(logits, 1.0, rng.next_below(4)));
    }
    return records;
}

} // namespace

TEST_CASE("make_record hand values") {
    const prediction_record rec = calib::make_record({5.0, 0.0, 0.0}, 1.0, 0);
    CHECK(rec.predicted == 0);
    const double expect = std::exp(5.0) / (std::exp(5.0) + 2.0);
    CHECK(rec.confidence == doctest::Approx(expect).epsilon(1e-10));
    CHECK(rec.confidence == doctest::Approx(0.98670).epsilon(1e-4));

    const prediction_record tie = calib::make_record({3.0, 3.0, 3.0}, 0.42, 2);
    CHECK(tie.predicted == 0);
    CHECK(tie.confidence == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK_FALSE(tie.correct());

    const prediction_record sharp = calib::make_record({0.0, 10.0}, 0.01, 1);
    CHECK(sharp.predicted == 1);
    CHECK(sharp.confidence > 1.0 - 1e-9);
    CHECK(sharp.correct());
}

TEST_CASE("bin_index implements half-open bins with zero forced into bin 1") {
    CHECK(calib::bin_index(0.0, 10) == 1);
    CHECK(calib::bin_index(0.05, 10) == 1);
    CHECK(calib::bin_index(0.1, 10) == 1);
    CHECK(calib::bin_index(0.1000001, 10) == 2);
    CHECK(calib::bin_index(1.0, 10) == 10);
    CHECK(calib::bin_index(0.6, 10) == 6);
    CHECK(calib::bin_index(0.9, 10) == 9);
}

TEST_CASE("ece extreme cases") {
    std::vector<prediction_record> perfect(10, synthetic_record(1.0, true));
    CHECK(calib::ece(perfect, 15).ece == 0.0);

    std::vector<prediction_record> awful(10, synthetic_record(1.0, false));
    CHECK(calib::ece(awful, 15).ece == doctest::Approx(1.0).epsilon(1e-15));

    CHECK_THROWS_AS(calib::ece({}, 15), error);
}

TEST_CASE("the four-record hand example lands at 0.4") {
    // confidences (0.9, 0.9, 0.6, 0.6), correctness (1, 0, 1, 1): the 0.9s
    // bin together at acc 0.5, the 0.6s at acc 1.0, each a 0.4 gap
    std::vector<prediction_record> records = {
        synthetic_record(0.9, true),
        synthetic_record(0.9, false),
        synthetic_record(0.6, true),
        synthetic_record(0.6, true),
    };
    for (std::size_t bins : {5, 10, 15}) {
        const auto report = calib::ece(records, bins);
        CHECK(report.ece == doctest::Approx(0.4).epsilon(1e-12));
        CHECK(report.ece == oracles::brute_force_ece(records, bins));
    }
}

TEST_CASE("ece matches the brute-force oracle exactly on random record sets") {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        const auto records = random_records(60, 1000 + seed);
        for (std::size_t bins : {1, 5, 10, 15}) {
            const auto report = calib::ece(records, bins);
            CHECK(report.ece == oracles::brute_force_ece(records, bins));
        }
    }
}

TEST_CASE("ece with one bin is |accuracy - mean confidence|") {
    const auto records = random_records(200, 7);
    const auto report = calib::ece(records, 1);
    CHECK(report.ece ==
          doctest::Approx(std::fabs(report.accuracy - report.mean_confidence))
              .epsilon(1e-15));
}

TEST_CASE("ece is permutation invariant and bounded") {
    auto records = random_records(120, 9);
    const double base = calib::ece(records, 15).ece;
    std::mt19937 shuffle_rng(3);
    for (int round = 0; round < 5; ++round) {
        std::shuffle(records.begin(), records.end(), shuffle_rng);
        const double shuffled = calib::ece(records, 15).ece;
        CHECK(shuffled == base);
    }
    CHECK(base >= 0.0);
    CHECK(base <= 1.0);
}

TEST_CASE("bin bookkeeping: counts add up, empty bins stay zeroed") {
    const auto records = random_records(75, 11);
    const auto report = calib::ece(records, 15);
    std::size_t total = 0;
    for (const auto& bin : report.bins.bins) {
        total += bin.count;
        if (bin.count == 0) {
            CHECK(bin.accuracy == 0.0);
            CHECK(bin.mean_confidence == 0.0);
        } else {
            CHECK(bin.accuracy >= 0.0);
            CHECK(bin.accuracy <= 1.0);
            CHECK(bin.mean_confidence >= 0.0);
            CHECK(bin.mean_confidence <= 1.0);
        }
    }
    CHECK(total == records.size());
}

namespace {

// pairs whose logits are exact log-probabilities of the label sampler,
// optionally multiplied by `overconfidence`
std::vector<logit_label_pair> constructed_pairs(std::size_t count, double overconfidence,
                                                std::uint64_t seed) {
    seeded_rng rng(seed);
    std::vector<logit_label_pair> pairs;
    pairs.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        vec probs(5);
        double total = 0.0;
        for (double& p : probs) {
            p = rng.uniform() + 0.05;
            total += p;
        }
        for (double& p : probs) p /= total;
        // sample the label from the same distribution
        const double u = rng.uniform();
        std::size_t label = probs.size() - 1;
        double cum = 0.0;
        for (std::size_t k = 0; k < probs.size(); ++k) {
            cum += probs[k];
            if (u <= cum) {
                label = k;
                break;
            }
        }
        logit_label_pair pair;
        pair.logits.resize(probs.size());
        for (std::size_t k = 0; k < probs.size(); ++k)
            pair.logits[k] = overconfidence * std::log(probs[k]);
        pair.label = label;
        pairs.push_back(std::move(pair));
    }
    return pairs;
}

} // namespace

TEST_CASE("fit_temperature recovers the construction temperature") {
    const auto calibrated = constructed_pairs(4000, 1.0, 2024);
    const double t1 = calib::fit_temperature(calibrated, 1e-3, 1e3);
    CHECK(std::fabs(t1 - 1.0) < 0.05);
    const double scan1 = oracles::scan_best_temperature(calibrated, 1e-3, 1e3);
    CHECK(std::fabs(t1 - scan1) < 0.02 * std::max(1.0, scan1));

    const auto overconfident = constructed_pairs(4000, 5.0, 551);
    const double t5 = calib::fit_temperature(overconfident, 1e-3, 1e3);
    CHECK(std::fabs(t5 - 5.0) < 0.25);
    const double scan5 = oracles::scan_best_temperature(overconfident, 1e-3, 1e3);
    CHECK(std::fabs(t5 - scan5) < 0.02 * std::max(1.0, scan5));
}

TEST_CASE("fit_temperature pushes to t_min when sharper is always better") {
    std::vector<logit_label_pair> pairs;
    logit_label_pair pair;
    pair.logits = {4.0, 0.0, 0.0};
    pair.label = 0;
    pairs.push_back(pair);
    const double t = calib::fit_temperature(pairs, 0.05, 20.0);
    CHECK(t < 0.06);
}

TEST_CASE("fit_temperature never loses to the identity and is deterministic") {
    const auto pairs = constructed_pairs(500, 2.5, 77);
    const double t_a = calib::fit_temperature(pairs, 1e-3, 1e3);
    const double t_b = calib::fit_temperature(pairs, 1e-3, 1e3);
    CHECK(t_a == t_b); // bit-for-bit reproducible
    CHECK(calib::mean_nll(pairs, t_a) <= calib::mean_nll(pairs, 1.0) + 1e-9);
    CHECK_THROWS_AS(calib::fit_temperature(pairs, 2.0, 1.0), error);
    CHECK_THROWS_AS(calib::fit_temperature({}, 0.1, 10.0), error);
}

TEST_CASE("apply_temperature identity, hand value and argmax preservation") {
    const prediction_record rec = calib::make_record({2.0, 0.0}, 1.0, 0);
    const prediction_record same = calib::apply_temperature(rec, 1.0);
    CHECK(same.probs[0] == rec.probs[0]);
    CHECK(same.probs[1] == rec.probs[1]);

    const prediction_record halved = calib::apply_temperature(rec, 2.0);
    CHECK(halved.probs[0] == doctest::Approx(0.73105857863).epsilon(1e-9));
    CHECK(halved.probs[1] == doctest::Approx(0.26894142137).epsilon(1e-9));

    seeded_rng rng(31);
    for (int trial = 0; trial < 100; ++trial) {
        vec logits(6);
        for (double& l : logits) l = rng.gaussian(0.0, 4.0);
        const prediction_record base = calib::make_record(logits, 1.0, 0);
        for (double t : {0.01, 0.3, 2.0, 50.0}) {
            CHECK(calib::apply_temperature(base, t).predicted == base.predicted);
        }
    }
    CHECK_THROWS_AS(calib::apply_temperature(rec, 0.0), error);
}
