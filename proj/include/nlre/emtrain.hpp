#pragma once
// The full training algorithm: warm-up on all noisy labels, then per batch
// sample selection with R = 1 - eps, a variational E step on the posterior,
// and a constrained M step on (clean classifier, noisy head, noise rate).

#include <chrono>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "nlre/evalkit.hpp"
#include "nlre/gm.hpp"
#include "nlre/select.hpp"

namespace nlre {

enum class SelectionScope { per_epoch, per_batch };

struct TrainConfig {
    std::size_t epochs = 100;
    std::size_t warmup_epochs = 10;
    std::size_t batch_size = 64;
    std::size_t warmup_batch_size = 0;   // 0: full-batch warm-up
    double warmup_lr = 0.0;              // 0: use lr_theta
    double lr_noisy = 0.0;               // noisy-head rate; 0: use lr_theta
    double lr_posterior = 0.0;           // posterior rate; 0: use lr_theta
    double eps_init = -1.0;              // >=0: explicit initial eps; <0: estimate
                                         // from warm-up/noisy-label disagreement
    std::size_t posterior_warmup_epochs = 0;  // E-step-only passes before EM
    double lr_theta = 0.02;
    double lr_eps = 0.001;
    double momentum = 0.9;
    double lambda = 1.0;
    std::size_t e_steps_per_batch = 1;
    std::size_t m_steps_per_batch = 1;
    CriterionKind criterion = CriterionKind::small_loss;
    SelectionScope selection_scope = SelectionScope::per_epoch;
    std::uint64_t seed = 0;
    std::size_t hidden_width = 64;
    std::size_t knn_k = 10;
    bool assert_ascent = false;          // full-batch monotone-ascent checks
    double fixed_rate = -1.0;            // >= 0: use this eps for R instead of the estimate
    bool no_selection = false;           // R pinned to 1 (every sample selected clean)
    std::size_t checkpoint_every = 0;    // epochs; 0 disables
    std::string checkpoint_dir;

    void validate() const {
        if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
        if (e_steps_per_batch < 1 || m_steps_per_batch < 1)
            throw std::invalid_argument("TrainConfig: step counts must be >= 1");
        if (lr_theta <= 0.0 || lr_eps <= 0.0)
            throw std::invalid_argument("TrainConfig: learning rates must be > 0");
        if (lambda < 0.0) throw std::invalid_argument("TrainConfig: lambda must be >= 0");
        if (momentum < 0.0 || momentum >= 1.0)
            throw std::invalid_argument("TrainConfig: momentum must be in [0,1)");
    }
};

struct TrainResult {
    GraphicalModel model;
    std::vector<double> eps_trajectory;  // one per epoch
    std::vector<EpochRecord> records;
    double wall_time_s = 0.0;
};

struct Optimizers {
    SgdMomentum clean;
    SgdMomentum noisy;
    SgdMomentum posterior;
    ScalarSgd eps;

    Optimizers(const TrainConfig& cfg, const GraphicalModel& m)
        : clean(cfg.lr_theta, cfg.momentum, m.clean),
          noisy(cfg.lr_noisy > 0.0 ? cfg.lr_noisy : cfg.lr_theta, cfg.momentum, m.noisy),
          posterior(cfg.lr_posterior > 0.0 ? cfg.lr_posterior : cfg.lr_theta, cfg.momentum,
                    m.posterior),
          eps(cfg.lr_eps, cfg.momentum) {}
};

// Cross-entropy training of the clean classifier on all noisy labels.
inline void warm_up(MlpParams& clean, const NoisyDataset& ds, std::size_t warmup_epochs,
                    std::size_t batch_size, SgdMomentum& opt, Rng& shuffle_rng) {
    std::vector<std::size_t> idx(ds.n);
    for (std::size_t i = 0; i < ds.n; ++i) idx[i] = i;
    MlpCache cache;
    for (std::size_t e = 0; e < warmup_epochs; ++e) {
        for (std::size_t i = 0; i + 1 < ds.n; ++i)
            std::swap(idx[i], idx[i + shuffle_rng.uniform_int(ds.n - i)]);
        for (std::size_t start = 0; start < ds.n; start += batch_size) {
            std::size_t end = std::min(start + batch_size, ds.n);
            MlpGrads grads = MlpParams::zeros_like(clean);
            double inv = 1.0 / static_cast<double>(end - start);
            for (std::size_t k = start; k < end; ++k) {
                std::size_t i = idx[k];
                Vec logits = mlp_forward_cached(clean, ds.x(i), cache);
                Vec up = softmax(logits);
                up[ds.noisy_labels[i]] -= 1.0;
                for (double& v : up) v *= inv;
                mlp_backward_accum(clean, cache, up, grads);
            }
            opt.step(clean, grads);
        }
    }
}

// `steps` gradient-ascent updates of the batch ELBO w.r.t. the posterior only.
inline void e_step(GraphicalModel& m, const Batch& batch, std::size_t steps, Optimizers& opt,
                   bool assert_ascent) {
    double before = assert_ascent ? mean_elbo(m, batch) : 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
        ModelGrads grads = ModelGrads::zeros_like(m);
        elbo_grads(m, batch, grads);
        scale_params(grads.posterior, -1.0);  // ascent
        opt.posterior.step(m.posterior, grads.posterior);
    }
    if (assert_ascent) {
        double after = mean_elbo(m, batch);
        if (after < before - 1e-8)
            throw std::runtime_error("e_step: ELBO decreased by " +
                                     std::to_string(before - after));
    }
}

inline double m_step_objective(const GraphicalModel& m, const Batch& batch,
                               const std::vector<std::size_t>& clean_in_batch, double lambda) {
    double obj = mean_elbo(m, batch);
    if (lambda > 0.0 && !clean_in_batch.empty())
        obj -= lambda * constraint_loss(m.clean, *batch.ds, clean_in_batch, nullptr);
    return obj;
}

// `steps` ascent updates of (batch ELBO - lambda * constraint) w.r.t. the
// clean classifier, noisy head and eps-logit; the posterior is untouched.
inline void m_step(GraphicalModel& m, const Batch& batch,
                   const std::vector<std::size_t>& clean_in_batch, double lambda,
                   std::size_t steps, Optimizers& opt, bool assert_ascent) {
    double before = assert_ascent ? m_step_objective(m, batch, clean_in_batch, lambda) : 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
        ModelGrads grads = ModelGrads::zeros_like(m);
        elbo_grads(m, batch, grads);
        scale_params(grads.clean, -1.0);
        scale_params(grads.noisy, -1.0);
        double eps_grad = -grads.eps_logit;
        if (lambda > 0.0 && !clean_in_batch.empty()) {
            MlpGrads cgrads = MlpParams::zeros_like(m.clean);
            constraint_loss(m.clean, *batch.ds, clean_in_batch, &cgrads);
            axpy(grads.clean, cgrads, lambda);
        }
        opt.clean.step(m.clean, grads.clean);
        opt.noisy.step(m.noisy, grads.noisy);
        opt.eps.step(m.eps_logit, eps_grad);
    }
    if (assert_ascent) {
        double after = m_step_objective(m, batch, clean_in_batch, lambda);
        if (after < before - 1e-8)
            throw std::runtime_error("m_step: objective decreased by " +
                                     std::to_string(before - after));
    }
}

inline TrainResult train(const TrainConfig& cfg, const NoisyDataset& train_ds,
                         const CleanDataset& test_ds) {
    cfg.validate();
    if (train_ds.d != test_ds.d || train_ds.c != test_ds.c)
        throw std::invalid_argument("train: train/test width mismatch");
    auto t0 = std::chrono::steady_clock::now();
    Rng root(cfg.seed);
    Rng init_rng = root.split(1);
    Rng shuffle_rng = root.split(2);

    TrainResult result;
    result.model = GraphicalModel::init(train_ds.d, train_ds.c, cfg.hidden_width, init_rng);
    GraphicalModel& model = result.model;
    if (cfg.eps_init >= 1.0) throw std::invalid_argument("train: eps_init must be < 1");
    Optimizers opt(cfg, model);

    std::size_t wbs = cfg.warmup_batch_size == 0 ? train_ds.n : cfg.warmup_batch_size;
    if (cfg.warmup_epochs > 0) {
        SgdMomentum warm_opt(cfg.warmup_lr > 0.0 ? cfg.warmup_lr : cfg.lr_theta, cfg.momentum,
                             model.clean);
        warm_up(model.clean, train_ds, cfg.warmup_epochs, wbs, warm_opt, shuffle_rng);
    }

    // Seed the noise-rate estimate. An explicit value wins; otherwise match it
    // to the warmed-up classifier's disagreement with the observed labels, so
    // the first curriculum rate R = 1 - eps is consistent with the data. An
    // eps far above the true rate makes the sort-and-threshold split drop
    // whole well-classified regions, which then drift to their flip targets.
    if (cfg.eps_init >= 0.0) {
        model.eps_logit = std::log(cfg.eps_init / (1.0 - cfg.eps_init));
    } else {
        std::size_t disagree = 0;
        for (std::size_t i = 0; i < train_ds.n; ++i) {
            Vec p = clean_prob(model.clean, train_ds.x(i));
            std::size_t am = static_cast<std::size_t>(
                std::max_element(p.begin(), p.end()) - p.begin());
            disagree += am != train_ds.noisy_labels[i];
        }
        double frac = static_cast<double>(disagree) / static_cast<double>(train_ds.n);
        frac = std::clamp(frac, 0.05, 0.75);
        model.eps_logit = std::log(frac / (1.0 - frac));
    }

    // KNN scores depend only on features and noisy labels; compute once.
    std::optional<CriterionScores> knn_scores;
    if (cfg.criterion == CriterionKind::knn)
        knn_scores = knn_criterion(train_ds, cfg.knn_k);

    std::vector<std::size_t> idx(train_ds.n);
    for (std::size_t i = 0; i < train_ds.n; ++i) idx[i] = i;

    // Fit the amortized posterior to the warmed-up model before any update
    // touches the network heads; a randomly initialized q would otherwise
    // corrupt theta in the first epochs.
    for (std::size_t e = 0; e < cfg.posterior_warmup_epochs; ++e) {
        for (std::size_t i = 0; i + 1 < train_ds.n; ++i)
            std::swap(idx[i], idx[i + shuffle_rng.uniform_int(train_ds.n - i)]);
        for (std::size_t start = 0; start < train_ds.n; start += cfg.batch_size) {
            std::size_t end = std::min(start + cfg.batch_size, train_ds.n);
            Batch batch;
            batch.ds = &train_ds;
            batch.indices.assign(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                 idx.begin() + static_cast<std::ptrdiff_t>(end));
            e_step(model, batch, cfg.e_steps_per_batch, opt, false);
        }
    }

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double eps_frozen = cfg.fixed_rate >= 0.0 ? cfg.fixed_rate : model.eps();
        double rate = cfg.no_selection ? 1.0 : curriculum_rate(eps_frozen);

        // per-epoch scope: one global sort over all N with the current model
        CriterionScores epoch_scores;
        SelectionSplit epoch_split;
        std::vector<bool> is_clean(train_ds.n, true);
        if (cfg.selection_scope == SelectionScope::per_epoch) {
            epoch_scores = knn_scores ? *knn_scores
                                      : small_loss_criterion(model.clean, train_ds);
            epoch_split = select_split(epoch_scores, rate);
            is_clean.assign(train_ds.n, false);
            for (std::size_t i : epoch_split.clean) is_clean[i] = true;
        }

        for (std::size_t i = 0; i + 1 < train_ds.n; ++i)
            std::swap(idx[i], idx[i + shuffle_rng.uniform_int(train_ds.n - i)]);

        std::size_t batch_no = 0;
        for (std::size_t start = 0; start < train_ds.n; start += cfg.batch_size, ++batch_no) {
            std::size_t end = std::min(start + cfg.batch_size, train_ds.n);
            Batch batch;
            batch.ds = &train_ds;
            batch.indices.assign(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                 idx.begin() + static_cast<std::ptrdiff_t>(end));
            std::vector<std::size_t> clean_in_batch;
            if (cfg.selection_scope == SelectionScope::per_batch) {
                // sort within the batch, keep floor(R*|S|); eps frozen at batch entry
                double eps_b = cfg.fixed_rate >= 0.0 ? cfg.fixed_rate : model.eps();
                double r_b = cfg.no_selection ? 1.0 : curriculum_rate(eps_b);
                CriterionScores batch_scores;
                batch_scores.kind = cfg.criterion;
                for (std::size_t i : batch.indices) {
                    if (knn_scores) {
                        batch_scores.scores.push_back(knn_scores->scores[i]);
                    } else {
                        Vec p = clean_prob(model.clean, train_ds.x(i));
                        batch_scores.scores.push_back(
                            -std::log(std::max(p[train_ds.noisy_labels[i]], 1e-300)));
                    }
                }
                SelectionSplit bs = select_split(batch_scores, r_b);
                for (std::size_t pos : bs.clean) clean_in_batch.push_back(batch.indices[pos]);
            } else {
                for (std::size_t i : batch.indices)
                    if (is_clean[i]) clean_in_batch.push_back(i);
            }
            try {
                e_step(model, batch, cfg.e_steps_per_batch, opt, cfg.assert_ascent);
                m_step(model, batch, clean_in_batch, cfg.lambda, cfg.m_steps_per_batch, opt,
                       cfg.assert_ascent);
            } catch (const std::exception& e) {
                throw std::runtime_error("train: epoch " + std::to_string(epoch + 1) + " batch " +
                                         std::to_string(batch_no + 1) + ": " + e.what());
            }
        }

        // epoch record (evaluation only; reads flip mask and clean test labels)
        EpochRecord rec;
        rec.epoch = epoch + 1;
        rec.eps_hat = model.eps();
        rec.test_accuracy = test_accuracy(model.clean, test_ds);
        rec.implied_flip_rate = model_implied_flip_rate(model, train_ds);
        if (cfg.selection_scope == SelectionScope::per_batch) {
            epoch_scores = knn_scores ? *knn_scores
                                      : small_loss_criterion(model.clean, train_ds);
            epoch_split = select_split(epoch_scores, rate);
        }
        rec.selection = selection_metrics(epoch_split, train_ds.flip_mask);
        Batch all;
        all.ds = &train_ds;
        all.indices = std::vector<std::size_t>(train_ds.n);
        for (std::size_t i = 0; i < train_ds.n; ++i) all.indices[i] = i;
        rec.mean_elbo = mean_elbo(model, all);
        rec.mean_constraint = constraint_loss(model.clean, train_ds, epoch_split.clean, nullptr);
        result.records.push_back(rec);
        result.eps_trajectory.push_back(model.eps());

        if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 &&
            !cfg.checkpoint_dir.empty())
            save_model(model, cfg.checkpoint_dir + "/checkpoint_epoch_" +
                                  std::to_string(epoch + 1) + ".nlgm");
    }

    auto t1 = std::chrono::steady_clock::now();
    result.wall_time_s = std::chrono::duration<double>(t1 - t0).count();
    return result;
}

}  // namespace nlre
