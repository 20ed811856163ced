#pragma once
// Sample selection: criterion scoring (small-loss or KNN), the noise-rate
// curriculum R = 1 - eps, the sort-and-threshold clean/noisy split, and the
// cross-entropy constraint over the selected clean set.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "nlre/gm.hpp"

namespace nlre {

enum class CriterionKind { small_loss, knn };

struct CriterionScores {
    Vec scores;  // lower = cleaner
    CriterionKind kind = CriterionKind::small_loss;
};

struct SelectionSplit {
    std::vector<std::size_t> clean;  // sorted ascending
    std::vector<std::size_t> noisy;  // complement, sorted ascending
    double rate = 1.0;               // R used for this split
};

// z_i = -ln clean_prob(x_i)[noisy label i]; reads noisy labels only.
inline CriterionScores small_loss_criterion(const MlpParams& clean, const NoisyDataset& ds) {
    if (ds.n == 0) throw std::invalid_argument("small_loss_criterion: empty dataset");
    CriterionScores out;
    out.kind = CriterionKind::small_loss;
    out.scores.resize(ds.n);
    for (std::size_t i = 0; i < ds.n; ++i) {
        Vec p = clean_prob(clean, ds.x(i));
        double pv = p[ds.noisy_labels[i]];
        if (pv < 1e-300) throw std::runtime_error("small_loss_criterion: probability underflow");
        out.scores[i] = -std::log(pv);
    }
    return out;
}

// z_i = fraction of the k nearest neighbours (Euclidean, excluding self)
// whose noisy label differs from sample i's.
inline CriterionScores knn_criterion(const NoisyDataset& ds, std::size_t k) {
    if (k == 0) throw std::invalid_argument("knn_criterion: k must be positive");
    if (k >= ds.n) throw std::invalid_argument("knn_criterion: k must be < N");
    CriterionScores out;
    out.kind = CriterionKind::knn;
    out.scores.resize(ds.n);
    std::vector<std::pair<double, std::size_t>> dist(ds.n);
    for (std::size_t i = 0; i < ds.n; ++i) {
        auto xi = ds.x(i);
        for (std::size_t j = 0; j < ds.n; ++j) {
            double d2 = 0.0;
            auto xj = ds.x(j);
            for (std::size_t f = 0; f < ds.d; ++f) {
                double diff = xi[f] - xj[f];
                d2 += diff * diff;
            }
            dist[j] = {d2, j};
        }
        dist[i].first = std::numeric_limits<double>::infinity();  // exclude self
        std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
        std::size_t disagree = 0;
        for (std::size_t t = 0; t < k; ++t)
            disagree += ds.noisy_labels[dist[t].second] != ds.noisy_labels[i];
        out.scores[i] = static_cast<double>(disagree) / static_cast<double>(k);
    }
    return out;
}

// R(t) = 1 - eps^(t)
inline double curriculum_rate(double eps_t) { return 1.0 - eps_t; }

// Stable ascending sort; clean = first floor(R*N), ties broken by index.
inline SelectionSplit select_split(const CriterionScores& scores, double rate) {
    std::size_t n = scores.scores.size();
    double r = std::clamp(rate, 0.0, 1.0);
    std::size_t n_clean = static_cast<std::size_t>(r * static_cast<double>(n));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return scores.scores[a] < scores.scores[b];
    });
    SelectionSplit split;
    split.rate = r;
    split.clean.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_clean));
    split.noisy.assign(order.begin() + static_cast<std::ptrdiff_t>(n_clean), order.end());
    std::sort(split.clean.begin(), split.clean.end());
    std::sort(split.noisy.begin(), split.noisy.end());
    return split;
}

// Mean cross-entropy -ln clean_prob(x)[y^] over the selected clean samples,
// with its exact gradient for the clean classifier. The KL against a one-hot
// target reduces to this cross-entropy.
inline double constraint_loss(const MlpParams& clean, const NoisyDataset& ds,
                              const std::vector<std::size_t>& clean_indices, MlpGrads* grads) {
    if (clean_indices.empty()) return 0.0;
    double total = 0.0;
    MlpCache cache;
    double inv = 1.0 / static_cast<double>(clean_indices.size());
    for (std::size_t i : clean_indices) {
        Vec logits = mlp_forward_cached(clean, ds.x(i), cache);
        Vec p = softmax(logits);
        std::size_t y_hat = ds.noisy_labels[i];
        total += -std::log(std::max(p[y_hat], 1e-300));
        if (grads) {
            Vec up(p);
            up[y_hat] -= 1.0;
            for (double& v : up) v *= inv;
            mlp_backward_accum(clean, cache, up, *grads);
        }
    }
    return total * inv;
}

}  // namespace nlre
