#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "caltune/calibration.hpp"
#include "caltune/dispersion.hpp"
#include "caltune/numeric.hpp"

namespace caltune::sim {

using core::dense_matrix;
using core::vec;

// L learnable token vectors of dimension D
struct prompt_embedding {
    dense_matrix tokens;

    std::size_t length() const { return tokens.rows; }
    std::size_t dim() const { return tokens.cols; }
};

struct class_vocabulary {
    std::size_t dim = 0;
    std::vector<vec> class_embeddings; // unit norm, pairwise distance > 0.1

    std::size_t size() const { return class_embeddings.size(); }
};

struct synthetic_encoder_config {
    std::size_t dim = 16;          // D
    std::size_t prompt_length = 4; // L
    std::uint64_t seed = 0;
    dense_matrix text_mixing; // D x 2D, shared-space mixer
    double image_noise_sigma = 0.1;
    double label_noise = 0.0;
};

struct sample_batch {
    std::vector<vec> latents;
    std::vector<std::size_t> labels;

    std::size_t size() const { return latents.size(); }
};

// The mixing matrix is [scale * G | I]: the identity class block keeps the
// zero prompt at the exact class embeddings, the random block lets the
// prompt move every class feature jointly.
synthetic_encoder_config make_encoder_config(std::uint64_t seed, std::size_t dim,
                                             std::size_t prompt_length,
                                             double image_noise_sigma,
                                             double label_noise,
                                             double prompt_mixing_scale);

// N seeded unit vectors with min pairwise distance > 0.1. A draw that
// violates the spacing restarts the whole set; 1000 failed attempts raise
// generation_failure (N too large for D).
class_vocabulary generate_vocabulary(std::uint64_t seed, std::size_t num_classes,
                                     std::size_t dim);

prompt_embedding make_prompt(std::uint64_t seed, std::size_t prompt_length,
                             std::size_t dim, double scale);

// all-zero tokens: text features coincide with the class embeddings
prompt_embedding default_prompt(std::size_t prompt_length, std::size_t dim);

// t = normalize(W * [mean_pool(tokens); class_embedding])
vec text_encode(const prompt_embedding& prompt, const vec& class_embedding,
                const synthetic_encoder_config& cfg);

// Pullback of d(loss)/d(text feature) through text_encode; returns the
// L x D gradient with respect to the prompt tokens.
dense_matrix text_encode_vjp(const prompt_embedding& prompt, const vec& class_embedding,
                             const synthetic_encoder_config& cfg, const vec& feature_grad);

dispersion::text_feature_set text_features(const prompt_embedding& prompt,
                                           const class_vocabulary& vocab,
                                           const synthetic_encoder_config& cfg);

vec image_encode(const vec& latent, const synthetic_encoder_config& cfg);

// latent_i = class_embedding[class] + sigma * gaussian; the stored label is
// resampled uniformly with probability cfg.label_noise. Per-sample derived
// seeds keep parallel and serial generation identical.
sample_batch generate_batch(const class_vocabulary& vocab,
                            const synthetic_encoder_config& cfg, std::size_t count,
                            std::uint64_t seed);

// view 0 is the unmodified latent; views 1..n-1 add seeded gaussian noise
std::vector<vec> augment(const vec& latent, std::size_t n_views, std::uint64_t seed,
                         double view_sigma);

calib::prediction_record zero_shot_predict(const prompt_embedding& prompt,
                                           const class_vocabulary& vocab,
                                           const vec& image_latent, std::size_t label,
                                           const synthetic_encoder_config& cfg,
                                           double tau);

// logits averaged element-wise across prompts before the single softmax
calib::prediction_record ensemble_predict(const std::vector<prompt_embedding>& prompts,
                                          const class_vocabulary& vocab,
                                          const vec& image_latent, std::size_t label,
                                          const synthetic_encoder_config& cfg,
                                          double tau);

} // namespace caltune::sim
