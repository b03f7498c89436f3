#include "caltune/simulator.hpp"

#include <cmath>

#include "caltune/rng.hpp"

namespace caltune::sim {

synthetic_encoder_config make_encoder_config(std::uint64_t seed, std::size_t dim,
                                             std::size_t prompt_length,
                                             double image_noise_sigma,
                                             double label_noise,
                                             double prompt_mixing_scale) {
    if (dim < 4)
        throw error(errc::invalid_range, "encoder config: dim must be >= 4");
    if (prompt_length < 1)
        throw error(errc::invalid_range, "encoder config: prompt_length must be >= 1");
    if (image_noise_sigma < 0.0)
        throw error(errc::invalid_range, "encoder config: sigma must be >= 0");
    if (label_noise < 0.0 || label_noise >= 0.5)
        throw error(errc::invalid_range, "encoder config: label_noise must be in [0, 0.5)");

    synthetic_encoder_config cfg;
    cfg.dim = dim;
    cfg.prompt_length = prompt_length;
    cfg.seed = seed;
    cfg.image_noise_sigma = image_noise_sigma;
    cfg.label_noise = label_noise;
    cfg.text_mixing = dense_matrix(dim, 2 * dim);

    seeded_rng rng(derive_seed(seed, 0));
    const double unit = 1.0 / std::sqrt(static_cast<double>(dim));
    for (std::size_t r = 0; r < dim; ++r) {
        for (std::size_t c = 0; c < dim; ++c)
            cfg.text_mixing(r, c) = prompt_mixing_scale * unit * rng.gaussian();
        cfg.text_mixing(r, dim + r) = 1.0;
    }
    return cfg;
}

class_vocabulary generate_vocabulary(std::uint64_t seed, std::size_t num_classes,
                                     std::size_t dim) {
    if (num_classes < 2)
        throw error(errc::invalid_range, "vocabulary: need >= 2 classes");
    if (dim < 4)
        throw error(errc::invalid_range, "vocabulary: dim must be >= 4");

    constexpr double min_distance = 0.1;
    constexpr int max_attempts = 1000;
    seeded_rng rng(seed);

    for (int attempt = 0; attempt < max_attempts; ++attempt) {
        class_vocabulary vocab;
        vocab.dim = dim;
        vocab.class_embeddings.reserve(num_classes);
        bool ok = true;
        for (std::size_t i = 0; i < num_classes && ok; ++i) {
            vec candidate(dim);
            for (double& x : candidate) x = rng.gaussian();
            candidate = core::l2_normalize(candidate);
            for (const auto& prev : vocab.class_embeddings) {
                double sq = 0.0;
                for (std::size_t d = 0; d < dim; ++d) {
                    const double diff = candidate[d] - prev[d];
                    sq += diff * diff;
                }
                if (std::sqrt(sq) <= min_distance) {
                    ok = false;
                    break;
                }
            }
            if (ok) vocab.class_embeddings.push_back(std::move(candidate));
        }
        if (ok) return vocab;
    }
    throw error(errc::generation_failure,
                "vocabulary: could not place classes with min pairwise distance 0.1");
}

prompt_embedding make_prompt(std::uint64_t seed, std::size_t prompt_length,
                             std::size_t dim, double scale) {
    seeded_rng rng(seed);
    prompt_embedding prompt;
    prompt.tokens = dense_matrix(prompt_length, dim);
    for (double& x : prompt.tokens.values) x = scale * rng.gaussian();
    return prompt;
}

prompt_embedding default_prompt(std::size_t prompt_length, std::size_t dim) {
    prompt_embedding prompt;
    prompt.tokens = dense_matrix(prompt_length, dim, 0.0);
    return prompt;
}

namespace {

vec mean_pool(const prompt_embedding& prompt) {
    vec pooled(prompt.dim(), 0.0);
    for (std::size_t r = 0; r < prompt.length(); ++r)
        for (std::size_t c = 0; c < prompt.dim(); ++c)
            pooled[c] += prompt.tokens(r, c);
    for (double& x : pooled) x /= static_cast<double>(prompt.length());
    return pooled;
}

vec premix(const prompt_embedding& prompt, const vec& class_embedding,
           const synthetic_encoder_config& cfg) {
    if (prompt.dim() != cfg.dim || class_embedding.size() != cfg.dim)
        throw error(errc::dimension_mismatch, "text_encode: dimension mismatch");
    vec cat(2 * cfg.dim);
    const vec pooled = mean_pool(prompt);
    for (std::size_t d = 0; d < cfg.dim; ++d) {
        cat[d] = pooled[d];
        cat[cfg.dim + d] = class_embedding[d];
    }
    return core::matvec(cfg.text_mixing, cat);
}

} // namespace

vec text_encode(const prompt_embedding& prompt, const vec& class_embedding,
                const synthetic_encoder_config& cfg) {
    return core::l2_normalize(premix(prompt, class_embedding, cfg));
}

dense_matrix text_encode_vjp(const prompt_embedding& prompt, const vec& class_embedding,
                             const synthetic_encoder_config& cfg, const vec& feature_grad) {
    const vec z = premix(prompt, class_embedding, cfg);
    const double nz = core::l2_norm(z);
    if (nz <= 1e-12)
        throw error(errc::zero_vector, "text_encode_vjp: zero pre-normalization output");

    // through t = z / ||z||: g_z = (g - (g . t) t) / ||z||
    vec t(z.size());
    for (std::size_t d = 0; d < z.size(); ++d) t[d] = z[d] / nz;
    const double gt = core::dot(feature_grad, t);
    vec gz(z.size());
    for (std::size_t d = 0; d < z.size(); ++d)
        gz[d] = (feature_grad[d] - gt * t[d]) / nz;

    // through z = W [m; e]: only the first D columns touch the prompt
    const vec gcat = core::matvec_transpose(cfg.text_mixing, gz);

    // mean pooling spreads the same gradient over every token row
    dense_matrix grad(prompt.length(), prompt.dim());
    const double inv_len = 1.0 / static_cast<double>(prompt.length());
    for (std::size_t r = 0; r < prompt.length(); ++r)
        for (std::size_t c = 0; c < prompt.dim(); ++c)
            grad(r, c) = inv_len * gcat[c];
    return grad;
}

dispersion::text_feature_set text_features(const prompt_embedding& prompt,
                                           const class_vocabulary& vocab,
                                           const synthetic_encoder_config& cfg) {
    dispersion::text_feature_set set;
    set.features.reserve(vocab.size());
    set.class_ids.reserve(vocab.size());
    for (std::size_t i = 0; i < vocab.size(); ++i) {
        set.features.push_back(text_encode(prompt, vocab.class_embeddings[i], cfg));
        set.class_ids.push_back(i);
    }
    return set;
}

vec image_encode(const vec& latent, const synthetic_encoder_config& cfg) {
    if (latent.size() != cfg.dim)
        throw error(errc::dimension_mismatch, "image_encode: dimension mismatch");
    return core::l2_normalize(latent);
}

sample_batch generate_batch(const class_vocabulary& vocab,
                            const synthetic_encoder_config& cfg, std::size_t count,
                            std::uint64_t seed) {
    if (count < 1)
        throw error(errc::invalid_range, "generate_batch: count must be >= 1");
    sample_batch batch;
    batch.latents.reserve(count);
    batch.labels.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        seeded_rng rng(derive_seed(seed, i));
        const std::size_t true_class = rng.next_below(vocab.size());
        vec latent = vocab.class_embeddings[true_class];
        for (double& x : latent) x += cfg.image_noise_sigma * rng.gaussian();
        std::size_t stored = true_class;
        if (rng.bernoulli(cfg.label_noise)) stored = rng.next_below(vocab.size());
        batch.latents.push_back(std::move(latent));
        batch.labels.push_back(stored);
    }
    return batch;
}

std::vector<vec> augment(const vec& latent, std::size_t n_views, std::uint64_t seed,
                         double view_sigma) {
    if (n_views < 1)
        throw error(errc::invalid_range, "augment: need >= 1 view");
    std::vector<vec> views;
    views.reserve(n_views);
    views.push_back(latent);
    for (std::size_t v = 1; v < n_views; ++v) {
        seeded_rng rng(derive_seed(seed, v));
        vec noisy = latent;
        for (double& x : noisy) x += view_sigma * rng.gaussian();
        views.push_back(std::move(noisy));
    }
    return views;
}

calib::prediction_record zero_shot_predict(const prompt_embedding& prompt,
                                           const class_vocabulary& vocab,
                                           const vec& image_latent, std::size_t label,
                                           const synthetic_encoder_config& cfg,
                                           double tau) {
    const vec image_feature = image_encode(image_latent, cfg);
    vec logits(vocab.size());
    for (std::size_t i = 0; i < vocab.size(); ++i) {
        const vec t = text_encode(prompt, vocab.class_embeddings[i], cfg);
        logits[i] = core::cosine_similarity(t, image_feature);
    }
    return calib::make_record(logits, tau, label);
}

calib::prediction_record ensemble_predict(const std::vector<prompt_embedding>& prompts,
                                          const class_vocabulary& vocab,
                                          const vec& image_latent, std::size_t label,
                                          const synthetic_encoder_config& cfg,
                                          double tau) {
    if (prompts.empty())
        throw error(errc::invalid_range, "ensemble_predict: need >= 1 prompt");
    const vec image_feature = image_encode(image_latent, cfg);
    vec mean_logits(vocab.size(), 0.0);
    for (const auto& prompt : prompts) {
        for (std::size_t i = 0; i < vocab.size(); ++i) {
            const vec t = text_encode(prompt, vocab.class_embeddings[i], cfg);
            mean_logits[i] += core::cosine_similarity(t, image_feature);
        }
    }
    for (double& s : mean_logits) s /= static_cast<double>(prompts.size());
    return calib::make_record(mean_logits, tau, label);
}

} // namespace caltune::sim
