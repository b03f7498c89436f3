#include "caltune/tuning.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <exception>
#include <limits>
#include <mutex>
#include <numeric>
#include <thread>

#include "caltune/rng.hpp"

namespace caltune::tpt {

namespace {

void add_scaled(dense_matrix& target, const dense_matrix& source, double scale) {
    for (std::size_t i = 0; i < target.values.size(); ++i)
        target.values[i] += scale * source.values[i];
}

bool all_finite(const dense_matrix& m) {
    for (double x : m.values)
        if (!std::isfinite(x)) return false;
    return true;
}

std::uint64_t fnv1a64(const void* data, std::size_t bytes, std::uint64_t h) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t hash_views(const std::vector<vec>& views) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& view : views)
        h = fnv1a64(view.data(), view.size() * sizeof(double), h);
    return h;
}

// gradient of cos(t, u) with respect to t at the computed norms
vec cosine_grad_wrt_first(const vec& t, const vec& u, double cos_value) {
    const double nt = core::l2_norm(t);
    const double nu = core::l2_norm(u);
    vec g(t.size());
    for (std::size_t d = 0; d < t.size(); ++d)
        g[d] = u[d] / (nt * nu) - cos_value * t[d] / (nt * nt);
    return g;
}

void run_indexed(std::size_t count, std::size_t threads,
                 const std::function<void(std::size_t)>& body) {
    if (threads <= 1 || count <= 1) {
        for (std::size_t i = 0; i < count; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&]() {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= count) return;
            try {
                body(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    const std::size_t n = std::min(threads, count);
    pool.reserve(n);
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

} // namespace

void tuning_config::validate() const {
    if (lambda < 0.0)
        throw error(errc::invalid_range, "tuning: lambda must be >= 0");
    if (!(learning_rate > 0.0))
        throw error(errc::invalid_range, "tuning: learning_rate must be > 0");
    if (steps < 1)
        throw error(errc::invalid_range, "tuning: steps must be >= 1");
    if (n_views < 1)
        throw error(errc::invalid_range, "tuning: n_views must be >= 1");
    if (view_sigma < 0.0)
        throw error(errc::invalid_range, "tuning: view_sigma must be >= 0");
    if (!(confidence_percentile > 0.0) || confidence_percentile > 1.0)
        throw error(errc::invalid_range, "tuning: confidence_percentile must be in (0, 1]");
}

std::vector<std::size_t> select_confident_views(const std::vector<double>& entropies,
                                                double percentile) {
    if (entropies.empty())
        throw error(errc::invalid_range, "select_confident_views: no views");
    const double raw = std::ceil(percentile * static_cast<double>(entropies.size()));
    std::size_t keep = static_cast<std::size_t>(raw);
    keep = std::max<std::size_t>(1, std::min(keep, entropies.size()));

    std::vector<std::size_t> order(entropies.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (entropies[a] != entropies[b]) return entropies[a] < entropies[b];
        return a < b;
    });
    order.resize(keep);
    std::sort(order.begin(), order.end());
    return order;
}

loss_grad tpt_loss_masked(const sim::prompt_embedding& prompt,
                          const sim::class_vocabulary& vocab,
                          const std::vector<vec>& views,
                          const std::vector<std::size_t>& kept,
                          const sim::synthetic_encoder_config& cfg, double tau) {
    if (kept.empty())
        throw error(errc::invalid_range, "tpt_loss: empty view selection");
    const std::size_t n_classes = vocab.size();

    std::vector<vec> text(n_classes);
    for (std::size_t i = 0; i < n_classes; ++i)
        text[i] = sim::text_encode(prompt, vocab.class_embeddings[i], cfg);

    std::vector<vec> image(kept.size());
    std::vector<vec> logits(kept.size(), vec(n_classes, 0.0));
    std::vector<vec> probs(kept.size());
    vec marginal(n_classes, 0.0);
    for (std::size_t k = 0; k < kept.size(); ++k) {
        image[k] = sim::image_encode(views[kept[k]], cfg);
        for (std::size_t i = 0; i < n_classes; ++i)
            logits[k][i] = core::cosine_similarity(text[i], image[k]);
        probs[k] = core::softmax_temperature(logits[k], tau);
        for (std::size_t i = 0; i < n_classes; ++i) marginal[i] += probs[k][i];
    }
    const double inv_kept = 1.0 / static_cast<double>(kept.size());
    for (double& p : marginal) p *= inv_kept;

    loss_grad out;
    out.loss = core::entropy(marginal);

    // d entropy / d marginal; entries with underflowed mass never receive
    // weight because every per-view probability there is zero too
    vec dH(n_classes, 0.0);
    for (std::size_t i = 0; i < n_classes; ++i)
        if (marginal[i] > 0.0) dH[i] = -(std::log(marginal[i]) + 1.0);

    std::vector<vec> text_grads(n_classes, vec(vocab.dim, 0.0));
    for (std::size_t k = 0; k < kept.size(); ++k) {
        double inner = 0.0;
        for (std::size_t i = 0; i < n_classes; ++i) inner += probs[k][i] * dH[i];
        for (std::size_t i = 0; i < n_classes; ++i) {
            const double coef = probs[k][i] * (dH[i] - inner) * inv_kept / tau;
            if (coef == 0.0) continue;
            const vec gc = cosine_grad_wrt_first(text[i], image[k], logits[k][i]);
            for (std::size_t d = 0; d < vocab.dim; ++d)
                text_grads[i][d] += coef * gc[d];
        }
    }

    out.grad = dense_matrix(prompt.length(), prompt.dim(), 0.0);
    for (std::size_t i = 0; i < n_classes; ++i) {
        const dense_matrix g =
            sim::text_encode_vjp(prompt, vocab.class_embeddings[i], cfg, text_grads[i]);
        add_scaled(out.grad, g, 1.0);
    }
    return out;
}

tpt_loss_result tpt_loss(const sim::prompt_embedding& prompt,
                         const sim::class_vocabulary& vocab,
                         const std::vector<vec>& views,
                         const sim::synthetic_encoder_config& cfg,
                         const tuning_config& tuning, double tau) {
    std::vector<vec> text(vocab.size());
    for (std::size_t i = 0; i < vocab.size(); ++i)
        text[i] = sim::text_encode(prompt, vocab.class_embeddings[i], cfg);

    std::vector<double> entropies(views.size(), 0.0);
    for (std::size_t v = 0; v < views.size(); ++v) {
        const vec image = sim::image_encode(views[v], cfg);
        vec logits(vocab.size());
        for (std::size_t i = 0; i < vocab.size(); ++i)
            logits[i] = core::cosine_similarity(text[i], image);
        entropies[v] = core::entropy(core::softmax_temperature(logits, tau));
    }

    tpt_loss_result result;
    result.kept_views = select_confident_views(entropies, tuning.confidence_percentile);
    loss_grad lg = tpt_loss_masked(prompt, vocab, views, result.kept_views, cfg, tau);
    result.loss = lg.loss;
    result.grad = std::move(lg.grad);
    return result;
}

loss_grad ctpt_loss(const sim::prompt_embedding& prompt,
                    const sim::class_vocabulary& vocab,
                    const sim::synthetic_encoder_config& cfg) {
    const dispersion::text_feature_set set = sim::text_features(prompt, vocab, cfg);
    const dispersion::dispersion_stats stats = dispersion::atfd(set);
    const std::vector<vec> atfd_grads = dispersion::atfd_gradient(set);

    loss_grad out;
    out.loss = -stats.atfd;
    out.grad = dense_matrix(prompt.length(), prompt.dim(), 0.0);
    for (std::size_t i = 0; i < set.size(); ++i) {
        vec g(set.dim());
        for (std::size_t d = 0; d < set.dim(); ++d) g[d] = -atfd_grads[i][d];
        const dense_matrix pg =
            sim::text_encode_vjp(prompt, vocab.class_embeddings[i], cfg, g);
        add_scaled(out.grad, pg, 1.0);
    }
    return out;
}

void optimizer_step(sim::prompt_embedding& prompt, const dense_matrix& grad,
                    const tuning_config& tuning, adaptive_moment_state& state) {
    auto& p = prompt.tokens.values;
    if (tuning.optimizer == optimizer_kind::plain_gradient_descent) {
        for (std::size_t i = 0; i < p.size(); ++i)
            p[i] -= tuning.learning_rate * grad.values[i];
        return;
    }
    state.step_count += 1;
    const double t = static_cast<double>(state.step_count);
    const double bc1 = 1.0 - std::pow(tuning.beta1, t);
    const double bc2 = 1.0 - std::pow(tuning.beta2, t);
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double g = grad.values[i];
        p[i] -= tuning.learning_rate * tuning.weight_decay * p[i]; // decoupled decay
        double& m = state.moment1.values[i];
        double& v = state.moment2.values[i];
        m = tuning.beta1 * m + (1.0 - tuning.beta1) * g;
        v = tuning.beta2 * v + (1.0 - tuning.beta2) * g * g;
        const double m_hat = m / bc1;
        const double v_hat = v / bc2;
        p[i] -= tuning.learning_rate * m_hat / (std::sqrt(v_hat) + tuning.epsilon);
    }
}

namespace {

struct step_losses {
    double tpt = 0.0;
    double ctpt = 0.0;
};

sim::prompt_embedding joint_step_impl(const sim::prompt_embedding& prompt,
                                      const sim::class_vocabulary& vocab,
                                      const std::vector<vec>& views,
                                      const sim::synthetic_encoder_config& cfg,
                                      const tuning_config& tuning, double tau,
                                      adaptive_moment_state& state,
                                      step_losses* losses) {
    const tpt_loss_result entropy_term = tpt_loss(prompt, vocab, views, cfg, tuning, tau);
    dense_matrix total = entropy_term.grad;
    double dispersion_loss = 0.0;
    if (tuning.lambda != 0.0) {
        const loss_grad dispersion_term = ctpt_loss(prompt, vocab, cfg);
        dispersion_loss = dispersion_term.loss;
        add_scaled(total, dispersion_term.grad, tuning.lambda);
    } else {
        // still report the trace value; lambda = 0 must not change the update
        dispersion_loss = -dispersion::atfd(sim::text_features(prompt, vocab, cfg)).atfd;
    }
    if (losses) {
        losses->tpt = entropy_term.loss;
        losses->ctpt = dispersion_loss;
    }
    if (!all_finite(total))
        throw error(errc::non_finite_gradient, "joint_step: non-finite gradient");

    sim::prompt_embedding updated = prompt;
    optimizer_step(updated, total, tuning, state);
    return updated;
}

} // namespace

sim::prompt_embedding joint_step(const sim::prompt_embedding& prompt,
                                 const sim::class_vocabulary& vocab,
                                 const std::vector<vec>& views,
                                 const sim::synthetic_encoder_config& cfg,
                                 const tuning_config& tuning, double tau,
                                 adaptive_moment_state& state) {
    return joint_step_impl(prompt, vocab, views, cfg, tuning, tau, state, nullptr);
}

episode_result run_episode(const vec& latent, std::size_t label,
                           const sim::prompt_embedding& prompt_init,
                           const sim::class_vocabulary& vocab,
                           const sim::synthetic_encoder_config& cfg,
                           const tuning_config& tuning, double tau,
                           std::uint64_t view_seed) {
    tuning.validate();
    episode_result result;
    result.record_before = sim::zero_shot_predict(prompt_init, vocab, latent, label, cfg, tau);
    result.atfd_before = dispersion::atfd(sim::text_features(prompt_init, vocab, cfg)).atfd;

    const std::vector<vec> views = sim::augment(latent, tuning.n_views, view_seed,
                                                tuning.view_sigma);
    result.view_hash = hash_views(views);

    sim::prompt_embedding prompt = prompt_init;
    adaptive_moment_state state(prompt.length(), prompt.dim());
    for (std::size_t s = 0; s < tuning.steps; ++s) {
        step_losses losses;
        try {
            prompt = joint_step_impl(prompt, vocab, views, cfg, tuning, tau, state, &losses);
        } catch (const error& e) {
            if (e.code() != errc::non_finite_gradient) throw;
            result.non_finite_abort = true;
            const double nan = std::numeric_limits<double>::quiet_NaN();
            while (result.tpt_loss_trace.size() < tuning.steps) {
                result.tpt_loss_trace.push_back(nan);
                result.ctpt_loss_trace.push_back(nan);
            }
            result.record_after = result.record_before;
            result.atfd_after = result.atfd_before;
            return result;
        }
        result.tpt_loss_trace.push_back(losses.tpt);
        result.ctpt_loss_trace.push_back(losses.ctpt);
    }

    result.record_after = sim::zero_shot_predict(prompt, vocab, latent, label, cfg, tau);
    result.atfd_after = dispersion::atfd(sim::text_features(prompt, vocab, cfg)).atfd;
    return result;
}

namespace {

arm_result summarize_arm(std::string name, std::vector<episode_result> episodes,
                         std::size_t bins) {
    arm_result arm;
    arm.name = std::move(name);
    std::vector<calib::prediction_record> records;
    records.reserve(episodes.size());
    double atfd_sum = 0.0;
    for (const auto& ep : episodes) {
        records.push_back(ep.record_after);
        atfd_sum += ep.atfd_after;
        if (ep.non_finite_abort) arm.non_finite_episodes += 1;
    }
    arm.report = calib::ece(records, bins);
    arm.mean_atfd = atfd_sum / static_cast<double>(episodes.size());
    arm.episodes = std::move(episodes);
    return arm;
}

} // namespace

std::vector<arm_result> run_experiment(const sim::sample_batch& dataset,
                                       const std::vector<sim::prompt_embedding>& prompt_inits,
                                       const sim::class_vocabulary& vocab,
                                       const sim::synthetic_encoder_config& cfg,
                                       const tuning_config& tuning, double tau,
                                       const experiment_config& experiment) {
    if (dataset.size() == 0)
        throw error(errc::empty_record_set, "run_experiment: empty dataset");
    if (prompt_inits.empty())
        throw error(errc::invalid_range, "run_experiment: need >= 1 prompt init");
    tuning.validate();
    for (const auto& arm : experiment.arms)
        if (arm != "baseline" && arm != "tpt" && arm != "ctpt" && arm != "ensemble")
            throw error(errc::invalid_range, "run_experiment: unknown arm '" + arm + "'");

    const bool want_baseline = std::count(experiment.arms.begin(), experiment.arms.end(),
                                          "baseline") > 0;
    const bool want_tpt = std::count(experiment.arms.begin(), experiment.arms.end(),
                                     "tpt") > 0;
    const bool want_ctpt = std::count(experiment.arms.begin(), experiment.arms.end(),
                                      "ctpt") > 0;
    const bool want_ensemble = std::count(experiment.arms.begin(), experiment.arms.end(),
                                          "ensemble") > 0;

    tuning_config tpt_only = tuning;
    tpt_only.lambda = 0.0;

    const sim::prompt_embedding& primary = prompt_inits.front();
    const double init_atfd =
        dispersion::atfd(sim::text_features(primary, vocab, cfg)).atfd;

    const std::size_t m = dataset.size();
    std::vector<episode_result> baseline_eps(want_baseline ? m : 0);
    std::vector<episode_result> tpt_eps(want_tpt ? m : 0);
    std::vector<episode_result> ctpt_eps(want_ctpt ? m : 0);
    std::vector<episode_result> ensemble_eps(want_ensemble ? m : 0);

    run_indexed(m, experiment.threads, [&](std::size_t i) {
        const vec& latent = dataset.latents[i];
        const std::size_t label = dataset.labels[i];
        const std::uint64_t view_seed = derive_seed(experiment.view_seed_base, i);

        if (want_baseline) {
            episode_result ep;
            ep.record_before = sim::zero_shot_predict(primary, vocab, latent, label, cfg, tau);
            ep.record_after = ep.record_before;
            ep.atfd_before = init_atfd;
            ep.atfd_after = init_atfd;
            ep.view_hash = hash_views(
                sim::augment(latent, tuning.n_views, view_seed, tuning.view_sigma));
            baseline_eps[i] = std::move(ep);
        }
        if (want_tpt)
            tpt_eps[i] = run_episode(latent, label, primary, vocab, cfg, tpt_only, tau,
                                     view_seed);
        if (want_ctpt)
            ctpt_eps[i] = run_episode(latent, label, primary, vocab, cfg, tuning, tau,
                                      view_seed);
        if (want_ensemble) {
            episode_result ep;
            vec before_logits(vocab.size(), 0.0);
            vec after_logits(vocab.size(), 0.0);
            double atfd_before_sum = 0.0;
            double atfd_after_sum = 0.0;
            std::uint64_t view_hash = 0;
            bool abort = false;
            for (const auto& init : prompt_inits) {
                const episode_result member =
                    run_episode(latent, label, init, vocab, cfg, tuning, tau, view_seed);
                for (std::size_t c = 0; c < vocab.size(); ++c) {
                    before_logits[c] += member.record_before.logits[c];
                    after_logits[c] += member.record_after.logits[c];
                }
                atfd_before_sum += member.atfd_before;
                atfd_after_sum += member.atfd_after;
                view_hash = member.view_hash;
                abort = abort || member.non_finite_abort;
            }
            const double inv = 1.0 / static_cast<double>(prompt_inits.size());
            for (double& s : before_logits) s *= inv;
            for (double& s : after_logits) s *= inv;
            ep.record_before = calib::make_record(before_logits, tau, label);
            ep.record_after = calib::make_record(after_logits, tau, label);
            ep.atfd_before = atfd_before_sum * inv;
            ep.atfd_after = atfd_after_sum * inv;
            ep.view_hash = view_hash;
            ep.non_finite_abort = abort;
            ensemble_eps[i] = std::move(ep);
        }
    });

    std::vector<arm_result> arms;
    if (want_baseline)
        arms.push_back(summarize_arm("baseline", std::move(baseline_eps), experiment.bins));
    if (want_tpt)
        arms.push_back(summarize_arm("tpt", std::move(tpt_eps), experiment.bins));
    if (want_ctpt)
        arms.push_back(summarize_arm("ctpt", std::move(ctpt_eps), experiment.bins));
    if (want_ensemble)
        arms.push_back(summarize_arm("ensemble", std::move(ensemble_eps), experiment.bins));
    return arms;
}

std::vector<sweep_row> sweep_lambda(const sim::sample_batch& dataset,
                                    const sim::prompt_embedding& prompt_init,
                                    const sim::class_vocabulary& vocab,
                                    const sim::synthetic_encoder_config& cfg,
                                    const tuning_config& tuning, double tau,
                                    const std::vector<double>& lambdas,
                                    const experiment_config& experiment) {
    if (lambdas.size() < 2)
        throw error(errc::invalid_range, "sweep_lambda: need >= 2 lambda values");
    experiment_config per_run = experiment;
    per_run.arms = {"ctpt"};
    std::vector<sweep_row> rows;
    rows.reserve(lambdas.size());
    for (double lambda : lambdas) {
        tuning_config t = tuning;
        t.lambda = lambda;
        const std::vector<arm_result> arms =
            run_experiment(dataset, {prompt_init}, vocab, cfg, t, tau, per_run);
        sweep_row row;
        row.lambda = lambda;
        row.accuracy = arms.front().report.accuracy;
        row.ece = arms.front().report.ece;
        row.mean_atfd = arms.front().mean_atfd;
        rows.push_back(row);
    }
    return rows;
}

std::vector<dispersion::prompt_result> evaluate_prompt_family(
    const std::vector<sim::prompt_embedding>& prompts,
    const sim::class_vocabulary& vocab, const sim::synthetic_encoder_config& cfg,
    const sim::sample_batch& dataset, double tau, std::size_t bins) {
    if (prompts.empty())
        throw error(errc::invalid_range, "evaluate_prompt_family: no prompts");
    std::vector<dispersion::prompt_result> results;
    results.reserve(prompts.size());
    for (const auto& prompt : prompts) {
        std::vector<calib::prediction_record> records;
        records.reserve(dataset.size());
        for (std::size_t i = 0; i < dataset.size(); ++i)
            records.push_back(sim::zero_shot_predict(prompt, vocab, dataset.latents[i],
                                                     dataset.labels[i], cfg, tau));
        const calib::calibration_report report = calib::ece(records, bins);
        dispersion::prompt_result pr;
        pr.accuracy = report.accuracy;
        pr.ece = report.ece;
        pr.atfd = dispersion::atfd(sim::text_features(prompt, vocab, cfg)).atfd;
        results.push_back(pr);
    }
    return results;
}

} // namespace caltune::tpt
