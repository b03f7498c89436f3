#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "caltune/rng.hpp"
#include "caltune/simulator.hpp"

using namespace caltune;
using core::vec;

namespace {

sim::synthetic_encoder_config test_encoder(std::uint64_t seed = 4, std::size_t dim = 16,
                                           std::size_t prompt_length = 4,
                                           double sigma = 0.1, double label_noise = 0.0,
                                           double mixing = 0.35) {
    return sim::make_encoder_config(seed, dim, prompt_length, sigma, label_noise, mixing);
}

} // namespace

TEST_CASE("vocabulary generation is deterministic and seed sensitive") {
    const auto a = sim::generate_vocabulary(7, 10, 16);
    const auto b = sim::generate_vocabulary(7, 10, 16);
    const auto c = sim::generate_vocabulary(8, 10, 16);
    REQUIRE(a.size() == 10);
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t d = 0; d < 16; ++d)
            CHECK(a.class_embeddings[i][d] == b.class_embeddings[i][d]);

    bool any_difference = false;
    for (std::size_t i = 0; i < a.size() && !any_difference; ++i)
        for (std::size_t d = 0; d < 16 && !any_difference; ++d)
            any_difference = a.class_embeddings[i][d] != c.class_embeddings[i][d];
    CHECK(any_difference);
}

TEST_CASE("vocabulary respects unit norm and minimum spacing") {
    const auto vocab = sim::generate_vocabulary(3, 30, 12);
    for (const auto& e : vocab.class_embeddings)
        CHECK(std::fabs(core::l2_norm(e) - 1.0) < 1e-9);
    for (std::size_t i = 0; i < vocab.size(); ++i)
        for (std::size_t j = i + 1; j < vocab.size(); ++j) {
            double sq = 0.0;
            for (std::size_t d = 0; d < vocab.dim; ++d) {
                const double diff = vocab.class_embeddings[i][d] - vocab.class_embeddings[j][d];
                sq += diff * diff;
            }
            CHECK(std::sqrt(sq) > 0.1);
        }
}

TEST_CASE("vocabulary generation fails when classes cannot be packed") {
    CHECK_THROWS_AS(sim::generate_vocabulary(1, 1000, 4), error);
}

TEST_CASE("text_encode output is unit norm and class sensitive") {
    const auto cfg = test_encoder();
    const auto vocab = sim::generate_vocabulary(7, 6, 16);
    const auto prompt = sim::make_prompt(11, 4, 16, 0.5);
    for (std::size_t i = 0; i < vocab.size(); ++i) {
        const vec t = sim::text_encode(prompt, vocab.class_embeddings[i], cfg);
        CHECK(std::fabs(core::l2_norm(t) - 1.0) < 1e-9);
    }
    const vec t0 = sim::text_encode(prompt, vocab.class_embeddings[0], cfg);
    const vec t1 = sim::text_encode(prompt, vocab.class_embeddings[1], cfg);
    double dist = 0.0;
    for (std::size_t d = 0; d < t0.size(); ++d) dist += (t0[d] - t1[d]) * (t0[d] - t1[d]);
    CHECK(std::sqrt(dist) > 1e-6);
}

TEST_CASE("the zero prompt reproduces the class embeddings exactly") {
    const auto cfg = test_encoder();
    const auto vocab = sim::generate_vocabulary(5, 8, 16);
    const auto prompt = sim::default_prompt(4, 16);
    for (std::size_t i = 0; i < vocab.size(); ++i) {
        const vec t = sim::text_encode(prompt, vocab.class_embeddings[i], cfg);
        for (std::size_t d = 0; d < 16; ++d)
            CHECK(t[d] == doctest::Approx(vocab.class_embeddings[i][d]).epsilon(1e-12));
    }
}

TEST_CASE("text_encode prompt gradient passes the finite-difference check") {
    for (std::uint64_t seed = 50; seed < 60; ++seed) {
        const auto cfg = test_encoder(seed);
        const auto vocab = sim::generate_vocabulary(seed + 1, 4, 16);
        const auto prompt = sim::make_prompt(seed + 2, 3, 16, 0.7);
        seeded_rng rng(seed + 3);
        vec probe(16);
        for (double& x : probe) x = rng.gaussian();

        // scalar: probe . text_encode(prompt, e_0)
        auto f = [&](const vec& flat) {
            sim::prompt_embedding p = prompt;
            p.tokens.values = flat;
            const vec t = sim::text_encode(p, vocab.class_embeddings[0], cfg);
            return core::dot(probe, t);
        };
        const core::dense_matrix grad =
            sim::text_encode_vjp(prompt, vocab.class_embeddings[0], cfg, probe);
        CHECK(core::grad_check(f, prompt.tokens.values, grad.values) < 1e-4);
    }
}

TEST_CASE("image_encode is normalize-only and noise tolerant") {
    const auto cfg = test_encoder();
    const auto vocab = sim::generate_vocabulary(9, 10, 16);
    const vec same = sim::image_encode(vocab.class_embeddings[3], cfg);
    for (std::size_t d = 0; d < 16; ++d)
        CHECK(same[d] == doctest::Approx(vocab.class_embeddings[3][d]).epsilon(1e-12));

    seeded_rng rng(99);
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t cls = trial % vocab.size();
        vec latent = vocab.class_embeddings[cls];
        for (double& x : latent) x += 0.1 * rng.gaussian();
        const vec feature = sim::image_encode(latent, cfg);
        CHECK(std::fabs(core::l2_norm(feature) - 1.0) < 1e-9);
        const double own = core::cosine_similarity(feature, vocab.class_embeddings[cls]);
        for (std::size_t other = 0; other < vocab.size(); ++other) {
            if (other == cls) continue;
            CHECK(own > core::cosine_similarity(feature, vocab.class_embeddings[other]));
        }
    }
    CHECK_THROWS_AS(sim::image_encode(vec(16, 0.0), cfg), error);
}

TEST_CASE("generate_batch is deterministic and label noise behaves") {
    const auto vocab = sim::generate_vocabulary(5, 4, 16);
    const auto cfg = test_encoder(4, 16, 4, 0.2, 0.3);
    const auto x = sim::generate_batch(vocab, cfg, 64, 77);
    const auto y = sim::generate_batch(vocab, cfg, 64, 77);
    REQUIRE(x.size() == 64);
    for (std::size_t i = 0; i < x.size(); ++i) {
        CHECK(x.labels[i] == y.labels[i]);
        for (std::size_t d = 0; d < 16; ++d) CHECK(x.latents[i][d] == y.latents[i][d]);
    }
}

TEST_CASE("separable limit gives perfect zero-shot accuracy") {
    const auto vocab = sim::generate_vocabulary(31, 20, 16);
    const auto cfg = test_encoder(4, 16, 4, 0.0, 0.0);
    const auto batch = sim::generate_batch(vocab, cfg, 100, 5);
    const auto prompt = sim::default_prompt(4, 16);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto rec = sim::zero_shot_predict(prompt, vocab, batch.latents[i],
                                                batch.labels[i], cfg, 0.01);
        CHECK(rec.correct());
    }
}

TEST_CASE("separable limit is confidently calibrated up to 50 classes") {
    for (std::uint64_t vseed : {31, 32, 33}) {
        const auto vocab = sim::generate_vocabulary(vseed, 50, 16);
        const auto cfg = test_encoder(4, 16, 4, 0.0, 0.0);
        const auto batch = sim::generate_batch(vocab, cfg, 200, 5);
        const auto prompt = sim::default_prompt(4, 16);
        std::vector<calib::prediction_record> records;
        for (std::size_t i = 0; i < batch.size(); ++i)
            records.push_back(sim::zero_shot_predict(prompt, vocab, batch.latents[i],
                                                     batch.labels[i], cfg, 0.01));
        const auto report = calib::ece(records, 15);
        CHECK(report.accuracy == 1.0);
        CHECK(report.ece < 0.05);
    }
}

TEST_CASE("two-class half label noise caps accuracy near 75 percent") {
    const auto vocab = sim::generate_vocabulary(13, 2, 16);
    const auto cfg = test_encoder(4, 16, 4, 0.0, 0.49999);
    const auto batch = sim::generate_batch(vocab, cfg, 4000, 11);
    const auto prompt = sim::default_prompt(4, 16);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto rec = sim::zero_shot_predict(prompt, vocab, batch.latents[i],
                                                batch.labels[i], cfg, 0.01);
        if (rec.correct()) ++correct;
    }
    const double accuracy = static_cast<double>(correct) / static_cast<double>(batch.size());
    CHECK(accuracy > 0.72);
    CHECK(accuracy < 0.78);
}

TEST_CASE("augment contract: clean view first, deterministic, degenerate cases") {
    const vec latent = {1.0, 2.0, 3.0, 4.0};
    const auto single = sim::augment(latent, 1, 42, 0.05);
    REQUIRE(single.size() == 1);
    CHECK(single[0] == latent);

    const auto silent = sim::augment(latent, 5, 42, 0.0);
    for (const auto& view : silent) CHECK(view == latent);

    const auto a = sim::augment(latent, 8, 42, 0.05);
    const auto b = sim::augment(latent, 8, 42, 0.05);
    const auto c = sim::augment(latent, 8, 43, 0.05);
    CHECK(a == b);
    CHECK(a[0] == latent);
    CHECK(a != c);
}

TEST_CASE("zero_shot_predict respects record invariants on random draws") {
    const auto vocab = sim::generate_vocabulary(17, 12, 16);
    const auto cfg = test_encoder(6, 16, 4, 0.6, 0.2);
    const auto batch = sim::generate_batch(vocab, cfg, 1000, 23);
    const auto prompt = sim::make_prompt(3, 4, 16, 0.5);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto rec = sim::zero_shot_predict(prompt, vocab, batch.latents[i],
                                                batch.labels[i], cfg, 0.15);
        CHECK(rec.predicted == core::argmax_lowest(rec.probs));
        CHECK(rec.confidence == rec.probs[rec.predicted]);
        CHECK(rec.label < vocab.size());
        double total = 0.0;
        for (double p : rec.probs) total += p;
        CHECK(std::fabs(total - 1.0) < 1e-9);
        for (double l : rec.logits) {
            CHECK(l >= -1.0 - 1e-12);
            CHECK(l <= 1.0 + 1e-12);
        }
    }
}

TEST_CASE("symmetric two-class setup gives exactly half confidence") {
    const auto cfg = test_encoder();
    sim::class_vocabulary vocab;
    vocab.dim = 16;
    vec e1(16, 0.0), e2(16, 0.0);
    e1[0] = 1.0;
    e2[1] = 1.0;
    vocab.class_embeddings = {e1, e2};
    vec latent(16, 0.0);
    latent[0] = latent[1] = 1.0; // equidistant from both classes
    const auto rec = sim::zero_shot_predict(sim::default_prompt(4, 16), vocab, latent, 0,
                                            cfg, 0.01);
    CHECK(rec.confidence == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(rec.predicted == 0); // tie resolves to the lowest index
}

TEST_CASE("ensemble_predict reduces to the single-prompt path") {
    const auto cfg = test_encoder();
    const auto vocab = sim::generate_vocabulary(19, 8, 16);
    const auto prompt = sim::make_prompt(5, 4, 16, 0.5);
    const auto batch = sim::generate_batch(vocab, cfg, 10, 3);

    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto solo = sim::zero_shot_predict(prompt, vocab, batch.latents[i],
                                                 batch.labels[i], cfg, 0.1);
        const auto one = sim::ensemble_predict({prompt}, vocab, batch.latents[i],
                                               batch.labels[i], cfg, 0.1);
        const auto twin = sim::ensemble_predict({prompt, prompt}, vocab, batch.latents[i],
                                                batch.labels[i], cfg, 0.1);
        for (std::size_t c = 0; c < vocab.size(); ++c) {
            CHECK(one.logits[c] == solo.logits[c]);
            CHECK(twin.logits[c] == doctest::Approx(solo.logits[c]).epsilon(1e-15));
        }
        CHECK(one.predicted == solo.predicted);
        CHECK(twin.predicted == solo.predicted);
    }
}

TEST_CASE("logit averaging happens before the softmax") {
    const auto cfg = test_encoder();
    const auto vocab = sim::generate_vocabulary(19, 4, 16);
    const auto p1 = sim::make_prompt(6, 4, 16, 1.2);
    const auto p2 = sim::make_prompt(7, 4, 16, 1.2);
    const auto batch = sim::generate_batch(vocab, cfg, 1, 9);
    const double tau = 0.05;

    const auto ens = sim::ensemble_predict({p1, p2}, vocab, batch.latents[0],
                                           batch.labels[0], cfg, tau);
    const auto r1 = sim::zero_shot_predict(p1, vocab, batch.latents[0], batch.labels[0],
                                           cfg, tau);
    const auto r2 = sim::zero_shot_predict(p2, vocab, batch.latents[0], batch.labels[0],
                                           cfg, tau);
    double max_gap = 0.0;
    for (std::size_t c = 0; c < vocab.size(); ++c) {
        const double prob_average = 0.5 * (r1.probs[c] + r2.probs[c]);
        max_gap = std::max(max_gap, std::fabs(ens.probs[c] - prob_average));
    }
    CHECK(max_gap > 1e-6);
}

TEST_CASE("the full prediction pipeline is bit-reproducible") {
    const auto vocab = sim::generate_vocabulary(29, 10, 16);
    const auto cfg_a = test_encoder(12, 16, 4, 0.4, 0.1);
    const auto cfg_b = test_encoder(12, 16, 4, 0.4, 0.1);
    const auto batch_a = sim::generate_batch(vocab, cfg_a, 50, 31);
    const auto batch_b = sim::generate_batch(vocab, cfg_b, 50, 31);
    const auto prompt = sim::make_prompt(2, 4, 16, 0.5);
    for (std::size_t i = 0; i < batch_a.size(); ++i) {
        const auto ra = sim::zero_shot_predict(prompt, vocab, batch_a.latents[i],
                                               batch_a.labels[i], cfg_a, 0.1);
        const auto rb = sim::zero_shot_predict(prompt, vocab, batch_b.latents[i],
                                               batch_b.labels[i], cfg_b, 0.1);
        CHECK(ra.predicted == rb.predicted);
        CHECK(ra.confidence == rb.confidence);
        for (std::size_t c = 0; c < vocab.size(); ++c) CHECK(ra.logits[c] == rb.logits[c]);
    }
}
