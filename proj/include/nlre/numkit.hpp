#pragma once
// Dense-numerics substrate: vectors/matrices, a small MLP with explicit
// forward/backward passes, SGD with momentum, and a central finite-difference
// gradient checker. All arithmetic in double precision.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nlre/rng.hpp"

namespace nlre {

using Vec = std::vector<double>;

struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    Vec data;  // row-major

    Mat() = default;
    Mat(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

inline bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// Numerically stable softmax (max subtraction).
inline Vec softmax(std::span<const double> logits) {
    if (!all_finite(logits)) throw std::invalid_argument("softmax: non-finite logit");
    double mx = *std::max_element(logits.begin(), logits.end());
    Vec out(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::max(std::exp(logits[i] - mx), std::numeric_limits<double>::min());
        sum += out[i];
    }
    for (double& v : out) v /= sum;
    return out;
}

inline double sigmoid(double logit) {
    if (!std::isfinite(logit)) throw std::invalid_argument("sigmoid: non-finite logit");
    if (logit >= 0.0) {
        return 1.0 / (1.0 + std::exp(-logit));
    }
    double e = std::exp(logit);
    return e / (1.0 + e);
}

inline double log_sum_exp(std::span<const double> v) {
    double mx = *std::max_element(v.begin(), v.end());
    if (!std::isfinite(mx)) return mx;
    double s = 0.0;
    for (double x : v) s += std::exp(x - mx);
    return mx + std::log(s);
}

// ---------------------------------------------------------------------------
// MLP: fully connected layers with rectifier activations between them
// (none after the last layer; outputs are logits).

struct Layer {
    Mat w;  // [out x in]
    Vec b;  // [out]
};

struct MlpParams {
    std::vector<Layer> layers;

    std::size_t in_dim() const { return layers.front().w.cols; }
    std::size_t out_dim() const { return layers.back().w.rows; }

    // He-scaled normal weights, zero biases.
    static MlpParams init(const std::vector<std::size_t>& widths, Rng& rng) {
        if (widths.size() < 2) throw std::invalid_argument("MlpParams::init: need >= 2 widths");
        MlpParams p;
        for (std::size_t k = 0; k + 1 < widths.size(); ++k) {
            Layer layer;
            layer.w = Mat(widths[k + 1], widths[k]);
            layer.b = Vec(widths[k + 1], 0.0);
            double std = std::sqrt(2.0 / static_cast<double>(widths[k]));
            for (double& v : layer.w.data) v = std * rng.normal();
            p.layers.push_back(std::move(layer));
        }
        return p;
    }

    static MlpParams zeros_like(const MlpParams& other) {
        MlpParams p = other;
        for (auto& layer : p.layers) {
            std::fill(layer.w.data.begin(), layer.w.data.end(), 0.0);
            std::fill(layer.b.begin(), layer.b.end(), 0.0);
        }
        return p;
    }

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& layer : layers) n += layer.w.data.size() + layer.b.size();
        return n;
    }
};

// Gradients share the parameter layout.
using MlpGrads = MlpParams;

inline void flatten_into(const MlpParams& p, Vec& out) {
    for (const auto& layer : p.layers) {
        out.insert(out.end(), layer.w.data.begin(), layer.w.data.end());
        out.insert(out.end(), layer.b.begin(), layer.b.end());
    }
}

inline std::size_t unflatten_from(std::span<const double> flat, std::size_t pos, MlpParams& p) {
    for (auto& layer : p.layers) {
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), layer.w.data.size(),
                    layer.w.data.begin());
        pos += layer.w.data.size();
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), layer.b.size(),
                    layer.b.begin());
        pos += layer.b.size();
    }
    return pos;
}

inline void scale_params(MlpParams& p, double a) {
    for (auto& layer : p.layers) {
        for (double& v : layer.w.data) v *= a;
        for (double& v : layer.b) v *= a;
    }
}

inline void axpy(MlpParams& p, const MlpGrads& g, double a) {
    for (std::size_t k = 0; k < p.layers.size(); ++k) {
        for (std::size_t i = 0; i < p.layers[k].w.data.size(); ++i)
            p.layers[k].w.data[i] += a * g.layers[k].w.data[i];
        for (std::size_t i = 0; i < p.layers[k].b.size(); ++i)
            p.layers[k].b[i] += a * g.layers[k].b[i];
    }
}

struct MlpCache {
    std::vector<Vec> inputs;  // inputs[k] = input to layer k (post-relu of k-1)
    std::vector<Vec> pre;     // pre[k] = pre-activation output of layer k
};

inline Vec mlp_forward_cached(const MlpParams& p, std::span<const double> x, MlpCache& cache) {
    if (x.size() != p.in_dim())
        throw std::invalid_argument("mlp_forward: input width " + std::to_string(x.size()) +
                                    " != " + std::to_string(p.in_dim()));
    cache.inputs.clear();
    cache.pre.clear();
    Vec h(x.begin(), x.end());
    for (std::size_t k = 0; k < p.layers.size(); ++k) {
        const Layer& layer = p.layers[k];
        cache.inputs.push_back(h);
        Vec z(layer.b);
        for (std::size_t r = 0; r < layer.w.rows; ++r) {
            double acc = 0.0;
            const double* wr = &layer.w.data[r * layer.w.cols];
            for (std::size_t c = 0; c < layer.w.cols; ++c) acc += wr[c] * h[c];
            z[r] += acc;
        }
        cache.pre.push_back(z);
        if (k + 1 < p.layers.size()) {
            for (double& v : z) v = std::max(v, 0.0);
        }
        h = std::move(z);
    }
    return h;
}

inline Vec mlp_forward(const MlpParams& p, std::span<const double> x) {
    MlpCache cache;
    return mlp_forward_cached(p, x, cache);
}

// Reverse-mode gradients of logits^T . upstream w.r.t. parameters and input.
// Accumulates into `grads` (so per-sample contributions can be summed).
inline Vec mlp_backward_accum(const MlpParams& p, const MlpCache& cache,
                              std::span<const double> upstream, MlpGrads& grads) {
    if (upstream.size() != p.out_dim())
        throw std::invalid_argument("backprop: upstream width mismatch");
    Vec delta(upstream.begin(), upstream.end());
    for (std::size_t k = p.layers.size(); k-- > 0;) {
        const Layer& layer = p.layers[k];
        Layer& g = grads.layers[k];
        if (k + 1 < p.layers.size()) {
            // through the rectifier of this layer's output
            for (std::size_t r = 0; r < delta.size(); ++r)
                if (cache.pre[k][r] <= 0.0) delta[r] = 0.0;
        }
        const Vec& in = cache.inputs[k];
        for (std::size_t r = 0; r < layer.w.rows; ++r) {
            double* gr = &g.w.data[r * layer.w.cols];
            for (std::size_t c = 0; c < layer.w.cols; ++c) gr[c] += delta[r] * in[c];
            g.b[r] += delta[r];
        }
        Vec prev(layer.w.cols, 0.0);
        for (std::size_t r = 0; r < layer.w.rows; ++r) {
            const double* wr = &layer.w.data[r * layer.w.cols];
            for (std::size_t c = 0; c < layer.w.cols; ++c) prev[c] += wr[c] * delta[r];
        }
        delta = std::move(prev);
    }
    return delta;  // gradient w.r.t. the input
}

inline std::pair<MlpGrads, Vec> backprop(const MlpParams& p, std::span<const double> x,
                                         std::span<const double> upstream) {
    MlpCache cache;
    mlp_forward_cached(p, x, cache);
    MlpGrads grads = MlpParams::zeros_like(p);
    Vec dx = mlp_backward_accum(p, cache, upstream, grads);
    return {std::move(grads), std::move(dx)};
}

// ---------------------------------------------------------------------------
// SGD with momentum: v <- m*v + g; p <- p - lr*v.
// Ascent objectives are negated by callers.

struct SgdMomentum {
    double lr;
    double momentum;
    MlpParams velocity;

    SgdMomentum(double learning_rate, double m, const MlpParams& shape)
        : lr(learning_rate), momentum(m), velocity(MlpParams::zeros_like(shape)) {
        if (lr < 0.0) throw std::invalid_argument("SgdMomentum: lr must be >= 0");
        if (m < 0.0 || m >= 1.0) throw std::invalid_argument("SgdMomentum: momentum in [0,1)");
    }

    void step(MlpParams& params, const MlpGrads& grads) {
        for (std::size_t k = 0; k < params.layers.size(); ++k) {
            auto upd = [&](Vec& v, Vec& p, const Vec& g) {
                for (std::size_t i = 0; i < p.size(); ++i) {
                    if (!std::isfinite(g[i]))
                        throw std::runtime_error("SgdMomentum: non-finite gradient");
                    v[i] = momentum * v[i] + g[i];
                    p[i] -= lr * v[i];
                }
            };
            upd(velocity.layers[k].w.data, params.layers[k].w.data, grads.layers[k].w.data);
            upd(velocity.layers[k].b, params.layers[k].b, grads.layers[k].b);
        }
    }
};

struct ScalarSgd {
    double lr;
    double momentum;
    double velocity = 0.0;

    ScalarSgd(double learning_rate, double m) : lr(learning_rate), momentum(m) {
        if (lr < 0.0) throw std::invalid_argument("ScalarSgd: lr must be >= 0");
        if (m < 0.0 || m >= 1.0) throw std::invalid_argument("ScalarSgd: momentum in [0,1)");
    }

    void step(double& param, double grad) {
        if (!std::isfinite(grad)) throw std::runtime_error("ScalarSgd: non-finite gradient");
        velocity = momentum * velocity + grad;
        param -= lr * velocity;
    }
};

// ---------------------------------------------------------------------------
// Central finite differences, the gradient oracle for the whole repository.

inline Vec finite_diff_grad(const std::function<double(std::span<const double>)>& objective,
                            std::span<const double> params, double h) {
    if (h <= 0.0) throw std::invalid_argument("finite_diff_grad: h must be > 0");
    Vec p(params.begin(), params.end());
    Vec grad(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        double orig = p[i];
        p[i] = orig + h;
        double fp = objective(p);
        p[i] = orig - h;
        double fm = objective(p);
        p[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::runtime_error("finite_diff_grad: non-finite objective evaluation");
        grad[i] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

// Relative error used by gradient checks: |a-b| / max(1, |a|, |b|).
inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

}  // namespace nlre
