#pragma once
// Probabilistic graphical model for noisy labels: clean-label classifier,
// noisy-label head over (x, one-hot y), a learnable noise rate stored as a
// logit, and an amortized variational posterior over (x, one-hot noisy
// label). The generative story per sample is
//   y  ~ Cat(softmax(f_y(x)))
//   y^ ~ Cat(eps * softmax(f_y^(x, y)) + (1 - eps) * y).
// Expectations over the latent clean label are exact C-term sums.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nlre/datagen.hpp"
#include "nlre/numkit.hpp"
#include "nlre/rng.hpp"

namespace nlre {

struct GraphicalModel {
    MlpParams clean;      // x[d] -> logits[C]
    MlpParams noisy;      // (x, one-hot y)[d+C] -> logits[C]
    MlpParams posterior;  // (x, one-hot y^)[d+C] -> logits[C]
    double eps_logit = 0.0;
    std::size_t d = 0;
    std::size_t c = 0;

    double eps() const { return sigmoid(eps_logit); }

    static GraphicalModel init(std::size_t d, std::size_t c, std::size_t hidden, Rng& rng) {
        GraphicalModel m;
        m.d = d;
        m.c = c;
        m.clean = MlpParams::init({d, hidden, c}, rng);
        m.noisy = MlpParams::init({d + c, hidden, c}, rng);
        m.posterior = MlpParams::init({d + c, hidden, c}, rng);
        m.eps_logit = 2.0 * rng.uniform() - 1.0;  // random init of the noise rate
        return m;
    }
};

inline Vec one_hot(std::size_t c, std::size_t cls) {
    Vec v(c, 0.0);
    v[cls] = 1.0;
    return v;
}

inline void check_one_hot(std::span<const double> y) {
    double sum = 0.0;
    for (double v : y) {
        if (v != 0.0 && v != 1.0) throw std::invalid_argument("expected a one-hot vector");
        sum += v;
    }
    if (sum != 1.0) throw std::invalid_argument("expected a one-hot vector");
}

inline Vec concat(std::span<const double> a, std::span<const double> b) {
    Vec v;
    v.reserve(a.size() + b.size());
    v.insert(v.end(), a.begin(), a.end());
    v.insert(v.end(), b.begin(), b.end());
    return v;
}

inline Vec clean_prob(const MlpParams& clean, std::span<const double> x) {
    return softmax(mlp_forward(clean, x));
}

// eps * softmax(f_y^(x, y)) + (1 - eps) * y
inline Vec noisy_mixture(const MlpParams& noisy, double eps, std::span<const double> x,
                         std::span<const double> y) {
    check_one_hot(y);
    Vec s = softmax(mlp_forward(noisy, concat(x, y)));
    for (std::size_t j = 0; j < s.size(); ++j) s[j] = eps * s[j] + (1.0 - eps) * y[j];
    return s;
}

inline Vec posterior_q(const MlpParams& posterior, std::span<const double> x,
                       std::span<const double> y_hat) {
    check_one_hot(y_hat);
    return softmax(mlp_forward(posterior, concat(x, y_hat)));
}

inline std::size_t sample_categorical(std::span<const double> probs, Rng& rng) {
    double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) return i;
    }
    return probs.size() - 1;
}

// Draw (clean label, noisy label) from the generative process.
inline std::pair<std::size_t, std::size_t> sample_generative(const GraphicalModel& m,
                                                             std::span<const double> x, Rng& rng) {
    Vec p = clean_prob(m.clean, x);
    std::size_t y = sample_categorical(p, rng);
    Vec mix = noisy_mixture(m.noisy, m.eps(), x, one_hot(m.c, y));
    std::size_t y_hat = sample_categorical(mix, rng);
    return {y, y_hat};
}

// p(y=c | x, y^) by enumeration over the C latent states.
inline Vec exact_posterior(const MlpParams& clean, const MlpParams& noisy, double eps,
                           std::span<const double> x, std::size_t y_hat) {
    std::size_t c = clean.out_dim();
    Vec p = clean_prob(clean, x);
    Vec post(c);
    double z = 0.0;
    for (std::size_t cc = 0; cc < c; ++cc) {
        Vec mix = noisy_mixture(noisy, eps, x, one_hot(c, cc));
        post[cc] = p[cc] * mix[y_hat];
        z += post[cc];
    }
    if (z <= 0.0) throw std::runtime_error("exact_posterior: zero normalizer");
    for (double& v : post) v /= z;
    return post;
}

// ln sum_c p(y=c|x) p(y^|x,c), in log space.
inline double marginal_loglik(const MlpParams& clean, const MlpParams& noisy, double eps,
                              std::span<const double> x, std::size_t y_hat) {
    std::size_t c = clean.out_dim();
    Vec p = clean_prob(clean, x);
    Vec terms(c);
    for (std::size_t cc = 0; cc < c; ++cc) {
        Vec mix = noisy_mixture(noisy, eps, x, one_hot(c, cc));
        terms[cc] = std::log(p[cc]) + std::log(mix[y_hat]);
    }
    return log_sum_exp(terms);
}

// sum_c q_c [ln p(c|x) + ln p(y^|x,c)] + H(q), with an arbitrary simplex q.
inline double elbo_with_q(const MlpParams& clean, const MlpParams& noisy, double eps,
                          std::span<const double> q, std::span<const double> x,
                          std::size_t y_hat) {
    std::size_t c = clean.out_dim();
    Vec p = clean_prob(clean, x);
    double v = 0.0;
    for (std::size_t cc = 0; cc < c; ++cc) {
        if (q[cc] <= 0.0) continue;  // 0 ln 0 = 0
        Vec mix = noisy_mixture(noisy, eps, x, one_hot(c, cc));
        v += q[cc] * (std::log(p[cc]) + std::log(mix[y_hat]) - std::log(q[cc]));
    }
    return v;
}

// ELBO with q taken from the model's amortized posterior.
inline double elbo(const GraphicalModel& m, std::span<const double> x, std::size_t y_hat) {
    Vec q = posterior_q(m.posterior, x, one_hot(m.c, y_hat));
    return elbo_with_q(m.clean, m.noisy, m.eps(), q, x, y_hat);
}

// ---------------------------------------------------------------------------
// Batch ELBO and its exact reverse-mode gradients

struct ModelGrads {
    MlpGrads clean;
    MlpGrads noisy;
    MlpGrads posterior;
    double eps_logit = 0.0;

    static ModelGrads zeros_like(const GraphicalModel& m) {
        return {MlpParams::zeros_like(m.clean), MlpParams::zeros_like(m.noisy),
                MlpParams::zeros_like(m.posterior), 0.0};
    }

};

struct Batch {
    const NoisyDataset* ds = nullptr;
    std::vector<std::size_t> indices;

    std::size_t size() const { return indices.size(); }
};

// Mean ELBO over the batch and its gradients for (clean, noisy, eps-logit,
// posterior). Entropy and mixture terms are differentiated analytically.
inline double elbo_grads(const GraphicalModel& m, const Batch& batch, ModelGrads& grads) {
    if (batch.size() == 0) throw std::invalid_argument("elbo_grads: empty batch");
    const NoisyDataset& ds = *batch.ds;
    double eps = m.eps();
    double total = 0.0;
    double inv = 1.0 / static_cast<double>(batch.size());
    MlpCache cache;
    for (std::size_t i : batch.indices) {
        auto x = ds.x(i);
        std::size_t y_hat = ds.noisy_labels[i];

        Vec clean_logits = mlp_forward_cached(m.clean, x, cache);
        MlpCache clean_cache = cache;
        Vec p = softmax(clean_logits);

        Vec q_in = concat(x, one_hot(m.c, y_hat));
        Vec q_logits = mlp_forward_cached(m.posterior, q_in, cache);
        MlpCache q_cache = cache;
        Vec q = softmax(q_logits);

        // per-latent-state noisy head pass
        std::vector<Vec> s(m.c), noisy_in(m.c);
        std::vector<MlpCache> noisy_cache(m.c);
        Vec log_mix(m.c), mix(m.c);
        for (std::size_t cc = 0; cc < m.c; ++cc) {
            noisy_in[cc] = concat(x, one_hot(m.c, cc));
            Vec logits = mlp_forward_cached(m.noisy, noisy_in[cc], noisy_cache[cc]);
            s[cc] = softmax(logits);
            mix[cc] = eps * s[cc][y_hat] + (cc == y_hat ? 1.0 - eps : 0.0);
            log_mix[cc] = std::log(mix[cc]);
            if (!std::isfinite(log_mix[cc]))
                throw std::runtime_error("elbo_grads: non-finite mixture log term");
        }

        // a_c = ln p_c + ln mix_c; elbo_i = sum_c q_c (a_c - ln q_c)
        Vec a(m.c);
        double elbo_i = 0.0;
        for (std::size_t cc = 0; cc < m.c; ++cc) {
            a[cc] = std::log(p[cc]) + log_mix[cc];
            elbo_i += q[cc] * (a[cc] - std::log(q[cc]));
        }
        if (!std::isfinite(elbo_i)) throw std::runtime_error("elbo_grads: non-finite ELBO term");
        total += elbo_i;

        // clean logits: d/du sum_c q_c ln softmax(u)_c = q - p
        Vec up_clean(m.c);
        for (std::size_t cc = 0; cc < m.c; ++cc) up_clean[cc] = inv * (q[cc] - p[cc]);
        mlp_backward_accum(m.clean, clean_cache, up_clean, grads.clean);

        // noisy head logits, one backward per latent state:
        // d ln mix_c / d v_j = (eps / mix_c) * s_yhat * (delta_{j,yhat} - s_j)
        double d_eps = 0.0;
        for (std::size_t cc = 0; cc < m.c; ++cc) {
            double coef = inv * q[cc] * eps / mix[cc];
            Vec up(m.c);
            for (std::size_t j = 0; j < m.c; ++j)
                up[j] = coef * s[cc][y_hat] * ((j == y_hat ? 1.0 : 0.0) - s[cc][j]);
            mlp_backward_accum(m.noisy, noisy_cache[cc], up, grads.noisy);
            d_eps += q[cc] * (s[cc][y_hat] - (cc == y_hat ? 1.0 : 0.0)) / mix[cc];
        }
        grads.eps_logit += inv * d_eps * eps * (1.0 - eps);

        // posterior logits: with t_c = a_c - ln q_c,
        // d elbo / d w_j = q_j (t_j - sum_c q_c t_c)
        Vec t(m.c);
        double mean_t = 0.0;
        for (std::size_t cc = 0; cc < m.c; ++cc) {
            t[cc] = a[cc] - std::log(q[cc]);
            mean_t += q[cc] * t[cc];
        }
        Vec up_q(m.c);
        for (std::size_t j = 0; j < m.c; ++j) up_q[j] = inv * q[j] * (t[j] - mean_t);
        mlp_backward_accum(m.posterior, q_cache, up_q, grads.posterior);
    }
    return total * inv;
}

inline double mean_elbo(const GraphicalModel& m, const Batch& batch) {
    double total = 0.0;
    for (std::size_t i : batch.indices) total += elbo(m, batch.ds->x(i), batch.ds->noisy_labels[i]);
    return total / static_cast<double>(batch.size());
}

// ---------------------------------------------------------------------------
// Checkpoint: magic "NLGM", version u16, (d, C) u32, each parameter block as
// length-prefixed f64, eps-logit last.

inline constexpr std::uint16_t kModelFormatVersion = 1;

inline std::string serialize_model(const GraphicalModel& m) {
    detail::ByteWriter w;
    w.buf.append("NLGM", 4);
    w.put<std::uint16_t>(kModelFormatVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(m.d));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(m.c));
    auto put_block = [&w](const MlpParams& p) {
        Vec flat;
        flatten_into(p, flat);
        w.put<std::uint64_t>(flat.size());
        w.put<std::uint64_t>(p.layers.size());
        for (const auto& layer : p.layers) {
            w.put<std::uint32_t>(static_cast<std::uint32_t>(layer.w.rows));
            w.put<std::uint32_t>(static_cast<std::uint32_t>(layer.w.cols));
        }
        for (double v : flat) w.put(v);
    };
    put_block(m.clean);
    put_block(m.noisy);
    put_block(m.posterior);
    w.put(m.eps_logit);
    return std::move(w.buf);
}

inline GraphicalModel deserialize_model(const std::string& bytes) {
    detail::ByteReader r{bytes};
    if (bytes.size() < 4 || bytes.compare(0, 4, "NLGM") != 0)
        throw ParseError("bad magic, expected NLGM", 0);
    r.pos = 4;
    auto version = r.get<std::uint16_t>("version");
    if (version != kModelFormatVersion)
        throw ParseError("unsupported model format version " + std::to_string(version), 4);
    GraphicalModel m;
    m.d = r.get<std::uint32_t>("d");
    m.c = r.get<std::uint32_t>("C");
    auto get_block = [&r]() {
        auto flat_len = r.get<std::uint64_t>("block length");
        auto n_layers = r.get<std::uint64_t>("layer count");
        MlpParams p;
        for (std::uint64_t k = 0; k < n_layers; ++k) {
            Layer layer;
            auto rows = r.get<std::uint32_t>("layer rows");
            auto cols = r.get<std::uint32_t>("layer cols");
            layer.w = Mat(rows, cols);
            layer.b = Vec(rows, 0.0);
            p.layers.push_back(std::move(layer));
        }
        if (p.count() != flat_len) throw ParseError("block length mismatch", r.pos);
        Vec flat(flat_len);
        for (double& v : flat) v = r.get<double>("parameters");
        unflatten_from(flat, 0, p);
        return p;
    };
    m.clean = get_block();
    m.noisy = get_block();
    m.posterior = get_block();
    m.eps_logit = r.get<double>("eps logit");
    if (r.pos != bytes.size()) throw ParseError("trailing bytes after model", r.pos);
    return m;
}

inline void save_model(const GraphicalModel& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("save_model: cannot open " + path);
    std::string bytes = serialize_model(m);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("save_model: write failed for " + path);
}

inline GraphicalModel load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_model: cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_model(bytes);
}

}  // namespace nlre
