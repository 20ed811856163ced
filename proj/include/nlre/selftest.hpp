#pragma once
// Oracle self-test suites, runnable from the CLI release gate: gradients vs
// central finite differences, ELBO tightness and bound identities, generative
// Monte-Carlo consistency, and the selection laws.

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "nlre/emtrain.hpp"

namespace nlre {

struct SuiteResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

namespace selftest_detail {

inline Vec flatten_model(const GraphicalModel& m) {
    Vec flat;
    flatten_into(m.clean, flat);
    flatten_into(m.noisy, flat);
    flatten_into(m.posterior, flat);
    flat.push_back(m.eps_logit);
    return flat;
}

inline void unflatten_model(std::span<const double> flat, GraphicalModel& m) {
    std::size_t pos = unflatten_from(flat, 0, m.clean);
    pos = unflatten_from(flat, pos, m.noisy);
    pos = unflatten_from(flat, pos, m.posterior);
    m.eps_logit = flat[pos];
}

inline Vec flatten_grads(const ModelGrads& g) {
    Vec flat;
    flatten_into(g.clean, flat);
    flatten_into(g.noisy, flat);
    flatten_into(g.posterior, flat);
    flat.push_back(g.eps_logit);
    return flat;
}

// Tiny random batch over a tiny random model, used by the gradient suites.
struct Fixture {
    GraphicalModel model;
    NoisyDataset ds;
    Batch batch;

    static Fixture make(Rng& rng, std::size_t d = 3, std::size_t c = 3, std::size_t n = 5,
                        std::size_t hidden = 4) {
        Fixture f;
        f.model = GraphicalModel::init(d, c, hidden, rng);
        f.ds.n = n;
        f.ds.d = d;
        f.ds.c = c;
        f.ds.features.resize(n * d);
        for (double& v : f.ds.features) v = rng.normal();
        std::vector<std::uint16_t> labels(n);
        for (auto& v : labels) v = static_cast<std::uint16_t>(rng.uniform_int(c));
        f.ds.noisy_labels.resize(n);
        for (auto& v : f.ds.noisy_labels) v = static_cast<std::uint16_t>(rng.uniform_int(c));
        f.ds.set_clean_labels(std::move(labels));
        f.ds.flip_mask.assign(n, false);
        f.ds.recompute_flip_stats();
        f.batch.ds = &f.ds;
        for (std::size_t i = 0; i < n; ++i) f.batch.indices.push_back(i);
        return f;
    }
};

}  // namespace selftest_detail

// Every differentiable operation vs central finite differences at h=1e-5,
// relative error <= 1e-4, 10 random draws each. `inject_bug` perturbs the
// analytic gradient; used as a negative control.
inline SuiteResult run_gradient_suite(std::uint64_t seed, bool inject_bug = false) {
    using namespace selftest_detail;
    SuiteResult res{"finite-difference", true, ""};
    const double h = 1e-5, tol = 1e-4;
    Rng rng(seed);
    for (int draw = 0; draw < 10 && res.passed; ++draw) {
        Fixture f = Fixture::make(rng);

        // mean batch ELBO w.r.t. every parameter
        ModelGrads grads = ModelGrads::zeros_like(f.model);
        elbo_grads(f.model, f.batch, grads);
        Vec analytic = flatten_grads(grads);
        if (inject_bug && !analytic.empty()) analytic[analytic.size() / 2] += 0.5;
        Vec flat = flatten_model(f.model);
        GraphicalModel probe = f.model;
        Vec numeric = finite_diff_grad(
            [&](std::span<const double> p) {
                unflatten_model(p, probe);
                return mean_elbo(probe, f.batch);
            },
            flat, h);
        for (std::size_t i = 0; i < flat.size(); ++i) {
            if (rel_err(analytic[i], numeric[i]) > tol) {
                res.passed = false;
                std::ostringstream os;
                os << "ELBO grad mismatch at draw " << draw << " coord " << i << ": analytic "
                   << analytic[i] << " vs numeric " << numeric[i];
                res.detail = os.str();
                break;
            }
        }
        if (!res.passed) break;

        // constraint loss w.r.t. the clean classifier
        MlpGrads cgrads = MlpParams::zeros_like(f.model.clean);
        constraint_loss(f.model.clean, f.ds, f.batch.indices, &cgrads);
        Vec canalytic;
        flatten_into(cgrads, canalytic);
        Vec cflat;
        flatten_into(f.model.clean, cflat);
        MlpParams cprobe = f.model.clean;
        Vec cnumeric = finite_diff_grad(
            [&](std::span<const double> p) {
                unflatten_from(p, 0, cprobe);
                return constraint_loss(cprobe, f.ds, f.batch.indices, nullptr);
            },
            cflat, h);
        for (std::size_t i = 0; i < cflat.size(); ++i) {
            if (rel_err(canalytic[i], cnumeric[i]) > tol) {
                res.passed = false;
                res.detail = "constraint grad mismatch at coord " + std::to_string(i);
                break;
            }
        }
        if (!res.passed) break;

        // raw MLP backprop of logits . upstream
        Vec x(f.model.d);
        for (double& v : x) v = rng.normal();
        Vec up(f.model.c);
        for (double& v : up) v = rng.normal();
        auto [mgrads, dx] = backprop(f.model.clean, x, up);
        Vec manalytic;
        flatten_into(mgrads, manalytic);
        MlpParams mprobe = f.model.clean;
        Vec mflat;
        flatten_into(f.model.clean, mflat);
        Vec mnumeric = finite_diff_grad(
            [&](std::span<const double> p) {
                unflatten_from(p, 0, mprobe);
                Vec logits = mlp_forward(mprobe, x);
                double v = 0.0;
                for (std::size_t j = 0; j < logits.size(); ++j) v += logits[j] * up[j];
                return v;
            },
            mflat, h);
        for (std::size_t i = 0; i < mflat.size(); ++i) {
            if (rel_err(manalytic[i], mnumeric[i]) > tol) {
                res.passed = false;
                res.detail = "backprop mismatch at coord " + std::to_string(i);
                break;
            }
        }
    }
    if (res.passed) res.detail = "all gradients within rel 1e-4 of central differences";
    return res;
}

// elbo(q = exact posterior) == marginal log-likelihood within 1e-9, and
// elbo(q) <= marginal + 1e-9 for random q, over 100 random (x, y^).
inline SuiteResult run_elbo_suite(std::uint64_t seed) {
    using namespace selftest_detail;
    SuiteResult res{"elbo-identities", true, ""};
    Rng rng(seed);
    Fixture f = Fixture::make(rng, 3, 4, 1, 5);
    double eps = f.model.eps();
    for (int trial = 0; trial < 100; ++trial) {
        Vec x(f.model.d);
        for (double& v : x) v = rng.normal();
        std::size_t y_hat = rng.uniform_int(f.model.c);
        double ll = marginal_loglik(f.model.clean, f.model.noisy, eps, x, y_hat);
        Vec post = exact_posterior(f.model.clean, f.model.noisy, eps, x, y_hat);
        double tight = elbo_with_q(f.model.clean, f.model.noisy, eps, post, x, y_hat);
        if (std::abs(tight - ll) > 1e-9) {
            res.passed = false;
            res.detail = "tightness violated: |elbo - loglik| = " + std::to_string(tight - ll);
            return res;
        }
        // random q on the simplex
        Vec q(f.model.c);
        double sum = 0.0;
        for (double& v : q) {
            v = -std::log(rng.uniform() + 1e-300);
            sum += v;
        }
        for (double& v : q) v /= sum;
        double bound = elbo_with_q(f.model.clean, f.model.noisy, eps, q, x, y_hat);
        if (bound > ll + 1e-9) {
            res.passed = false;
            res.detail = "bound violated: elbo - loglik = " + std::to_string(bound - ll);
            return res;
        }
    }
    res.detail = "tightness and bound hold on 100 random (x, y^)";
    return res;
}

// Monte-Carlo mislabel frequency over 1e5 generative draws vs the analytic
// eps * E[1 - softmax(f_y^(x,y))[y]], within 3 sigma binomial.
inline SuiteResult run_generative_suite(std::uint64_t seed) {
    using namespace selftest_detail;
    SuiteResult res{"generative-consistency", true, ""};
    Rng rng(seed);
    Fixture f = Fixture::make(rng, 2, 4, 1, 6);
    const std::size_t n_x = 50, draws_per_x = 2000;
    double eps = f.model.eps();
    double analytic = 0.0;
    std::size_t mislabels = 0, total = 0;
    for (std::size_t ix = 0; ix < n_x; ++ix) {
        Vec x(f.model.d);
        for (double& v : x) v = rng.normal();
        Vec p = clean_prob(f.model.clean, x);
        for (std::size_t cc = 0; cc < f.model.c; ++cc) {
            Vec s = softmax(mlp_forward(f.model.noisy, concat(x, one_hot(f.model.c, cc))));
            analytic += p[cc] * eps * (1.0 - s[cc]);
        }
        for (std::size_t t = 0; t < draws_per_x; ++t) {
            auto [y, y_hat] = sample_generative(f.model, x, rng);
            mislabels += y != y_hat;
            ++total;
        }
    }
    analytic /= static_cast<double>(n_x);
    double freq = static_cast<double>(mislabels) / static_cast<double>(total);
    double sigma = std::sqrt(analytic * (1.0 - analytic) / static_cast<double>(total));
    std::ostringstream os;
    os << "empirical " << freq << " vs analytic " << analytic << " (3 sigma = " << 3 * sigma
       << ")";
    res.detail = os.str();
    res.passed = std::abs(freq - analytic) <= 3.0 * sigma;
    return res;
}

// |S_clean| = floor(R*N) exactly, nestedness in R, and invariance of the
// split under strictly increasing score transforms; 1000 random instances.
inline SuiteResult run_selection_suite(std::uint64_t seed) {
    SuiteResult res{"selection-laws", true, ""};
    Rng rng(seed);
    for (int trial = 0; trial < 1000; ++trial) {
        std::size_t n = 1 + rng.uniform_int(200);
        CriterionScores scores;
        scores.scores.resize(n);
        for (double& v : scores.scores) v = rng.normal();
        double r1 = rng.uniform();
        double r2 = rng.uniform();
        if (r1 > r2) std::swap(r1, r2);
        SelectionSplit s1 = select_split(scores, r1);
        SelectionSplit s2 = select_split(scores, r2);
        if (s1.clean.size() != static_cast<std::size_t>(r1 * static_cast<double>(n)) ||
            s2.clean.size() != static_cast<std::size_t>(r2 * static_cast<double>(n))) {
            res.passed = false;
            res.detail = "cardinality law violated at trial " + std::to_string(trial);
            return res;
        }
        if (!std::includes(s2.clean.begin(), s2.clean.end(), s1.clean.begin(), s1.clean.end())) {
            res.passed = false;
            res.detail = "nestedness violated at trial " + std::to_string(trial);
            return res;
        }
        // strictly increasing transform: a*exp(z) + tanh(z)
        CriterionScores warped = scores;
        for (double& v : warped.scores) v = 2.0 * std::exp(v / 4.0) + std::tanh(v);
        SelectionSplit s3 = select_split(warped, r2);
        if (s3.clean != s2.clean) {
            res.passed = false;
            res.detail = "transform invariance violated at trial " + std::to_string(trial);
            return res;
        }
    }
    res.detail = "cardinality, nestedness, transform invariance hold on 1000 instances";
    return res;
}

inline std::vector<SuiteResult> run_selftests(std::uint64_t seed, const std::string& only = "",
                                              bool inject_gradient_bug = false) {
    std::vector<SuiteResult> out;
    auto want = [&](const char* name) { return only.empty() || only == name; };
    if (want("grad")) out.push_back(run_gradient_suite(seed, inject_gradient_bug));
    if (want("elbo")) out.push_back(run_elbo_suite(seed + 1));
    if (want("generative")) out.push_back(run_generative_suite(seed + 2));
    if (want("selection")) out.push_back(run_selection_suite(seed + 3));
    return out;
}

}  // namespace nlre
