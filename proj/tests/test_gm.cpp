#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "nlre/gm.hpp"
#include "nlre/selftest.hpp"

using namespace nlre;
using nlre::selftest_detail::Fixture;

TEST_CASE("clean_prob") {
    Rng rng(1);
    GraphicalModel m = GraphicalModel::init(3, 4, 5, rng);

    MlpParams zero = MlpParams::zeros_like(m.clean);
    Vec u = clean_prob(zero, Vec{1.0, 2.0, 3.0});
    for (double v : u) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

    Vec p = clean_prob(m.clean, Vec{0.5, -0.5, 1.0});
    double sum = 0.0;
    for (double v : p) sum += v;
    CHECK(std::abs(sum - 1.0) <= 1e-12);
}

TEST_CASE("noisy_mixture") {
    Rng rng(2);
    GraphicalModel m = GraphicalModel::init(2, 4, 5, rng);
    Vec x{0.3, -0.7};

    SUBCASE("eps=0 returns y exactly") {
        Vec y = one_hot(4, 2);
        Vec mix = noisy_mixture(m.noisy, 0.0, x, y);
        for (std::size_t j = 0; j < 4; ++j) CHECK(mix[j] == y[j]);
    }

    SUBCASE("eps=1 returns the head softmax exactly") {
        Vec y = one_hot(4, 1);
        Vec mix = noisy_mixture(m.noisy, 1.0, x, y);
        Vec s = softmax(mlp_forward(m.noisy, concat(x, y)));
        for (std::size_t j = 0; j < 4; ++j) CHECK(mix[j] == doctest::Approx(s[j]).epsilon(1e-15));
    }

    SUBCASE("eps=0.5 with a uniform head: hand mixture") {
        MlpParams zero = MlpParams::zeros_like(m.noisy);
        Vec mix = noisy_mixture(zero, 0.5, x, one_hot(4, 0));
        CHECK(mix[0] == doctest::Approx(0.625).epsilon(1e-12));
        for (std::size_t j = 1; j < 4; ++j) CHECK(mix[j] == doctest::Approx(0.125).epsilon(1e-12));
    }

    SUBCASE("simplex for all eps in (0,1)") {
        for (double eps : {0.01, 0.3, 0.7, 0.99}) {
            Vec mix = noisy_mixture(m.noisy, eps, x, one_hot(4, 3));
            double sum = 0.0;
            for (double v : mix) {
                CHECK(v >= 0.0);
                sum += v;
            }
            CHECK(std::abs(sum - 1.0) <= 1e-12);
        }
    }

    SUBCASE("rejects a non-one-hot y") {
        CHECK_THROWS(noisy_mixture(m.noisy, 0.5, x, Vec{0.5, 0.5, 0.0, 0.0}));
    }
}

TEST_CASE("sample_generative") {
    Rng rng(3);
    GraphicalModel m = GraphicalModel::init(2, 3, 5, rng);

    SUBCASE("eps -> 0 limit: noisy equals clean") {
        m.eps_logit = -50.0;
        Rng draw(10);
        for (int t = 0; t < 10000; ++t) {
            Vec x{draw.normal(), draw.normal()};
            auto [y, y_hat] = sample_generative(m, x, draw);
            CHECK(y == y_hat);
        }
    }

    SUBCASE("fixed seed gives an identical stream") {
        auto run = [&m] {
            Rng draw(11);
            std::vector<std::size_t> out;
            for (int t = 0; t < 100; ++t) {
                Vec x{draw.normal(), draw.normal()};
                auto [y, y_hat] = sample_generative(m, x, draw);
                out.push_back(y * 10 + y_hat);
            }
            return out;
        };
        CHECK(run() == run());
    }

    SUBCASE("Monte-Carlo mislabel frequency matches the analytic rate") {
        SuiteResult r = run_generative_suite(123);
        INFO(r.detail);
        CHECK(r.passed);
    }
}

TEST_CASE("posterior_q basics") {
    Rng rng(4);
    GraphicalModel m = GraphicalModel::init(2, 3, 5, rng);
    MlpParams zero = MlpParams::zeros_like(m.posterior);
    Vec q = posterior_q(zero, Vec{1.0, 2.0}, one_hot(3, 1));
    for (double v : q) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    Vec q2 = posterior_q(m.posterior, Vec{0.1, -0.2}, one_hot(3, 2));
    double sum = 0.0;
    for (double v : q2) sum += v;
    CHECK(std::abs(sum - 1.0) <= 1e-12);
}

TEST_CASE("exact_posterior") {
    Rng rng(5);
    GraphicalModel m = GraphicalModel::init(2, 3, 4, rng);
    Vec x{0.4, -0.9};

    SUBCASE("eps -> 0 gives a one-hot at the observed label") {
        Vec post = exact_posterior(m.clean, m.noisy, 1e-12, x, 1);
        CHECK(post[1] == doctest::Approx(1.0).epsilon(1e-9));
    }

    SUBCASE("uniform model: maximum at the observed label") {
        MlpParams zc = MlpParams::zeros_like(m.clean);
        MlpParams zn = MlpParams::zeros_like(m.noisy);
        Vec post = exact_posterior(zc, zn, 0.4, x, 2);
        for (std::size_t cc = 0; cc < 3; ++cc)
            if (cc != 2) CHECK(post[2] > post[cc]);
    }

    SUBCASE("matches a straight-line enumeration to 1e-12") {
        double eps = m.eps();
        Vec post = exact_posterior(m.clean, m.noisy, eps, x, 0);
        // independent re-implementation
        Vec p = softmax(mlp_forward(m.clean, x));
        Vec unnorm(3);
        double z = 0.0;
        for (std::size_t cc = 0; cc < 3; ++cc) {
            Vec in = concat(x, one_hot(3, cc));
            Vec s = softmax(mlp_forward(m.noisy, in));
            double mix = eps * s[0] + (cc == 0 ? 1.0 - eps : 0.0);
            unnorm[cc] = p[cc] * mix;
            z += unnorm[cc];
        }
        for (std::size_t cc = 0; cc < 3; ++cc)
            CHECK(post[cc] == doctest::Approx(unnorm[cc] / z).epsilon(1e-12));
    }
}

TEST_CASE("marginal_loglik and elbo identities") {
    Rng rng(6);
    GraphicalModel m = GraphicalModel::init(2, 4, 5, rng);
    Vec x{0.2, 1.1};

    SUBCASE("eps -> 0 collapses to ln clean_prob") {
        double ll = marginal_loglik(m.clean, m.noisy, 1e-14, x, 2);
        Vec p = clean_prob(m.clean, x);
        CHECK(ll == doctest::Approx(std::log(p[2])).epsilon(1e-9));
    }

    SUBCASE("uniform model gives ln(1/C)") {
        MlpParams zc = MlpParams::zeros_like(m.clean);
        MlpParams zn = MlpParams::zeros_like(m.noisy);
        double ll = marginal_loglik(zc, zn, 0.37, x, 1);
        CHECK(ll == doctest::Approx(std::log(0.25)).epsilon(1e-12));
    }

    SUBCASE("one-hot q drops the entropy term") {
        double eps = m.eps();
        Vec q = one_hot(4, 3);
        double e = elbo_with_q(m.clean, m.noisy, eps, q, x, 1);
        Vec p = clean_prob(m.clean, x);
        Vec mix = noisy_mixture(m.noisy, eps, x, one_hot(4, 3));
        CHECK(e == doctest::Approx(std::log(p[3]) + std::log(mix[1])).epsilon(1e-12));
    }

    SUBCASE("tightness, bound and KL gap") {
        Rng draws(7);
        double eps = m.eps();
        for (int t = 0; t < 100; ++t) {
            Vec xx{draws.normal(), draws.normal()};
            std::size_t y_hat = draws.uniform_int(4);
            double ll = marginal_loglik(m.clean, m.noisy, eps, xx, y_hat);
            Vec post = exact_posterior(m.clean, m.noisy, eps, xx, y_hat);
            CHECK(std::abs(elbo_with_q(m.clean, m.noisy, eps, post, xx, y_hat) - ll) <= 1e-9);

            Vec q(4);
            double sum = 0.0;
            for (double& v : q) {
                v = -std::log(draws.uniform() + 1e-300);
                sum += v;
            }
            for (double& v : q) v /= sum;
            double e = elbo_with_q(m.clean, m.noisy, eps, q, xx, y_hat);
            CHECK(e <= ll + 1e-9);
            // gap equals KL(q || exact posterior)
            double kl = 0.0;
            for (std::size_t cc = 0; cc < 4; ++cc)
                if (q[cc] > 0.0) kl += q[cc] * (std::log(q[cc]) - std::log(post[cc]));
            CHECK(ll - e == doctest::Approx(kl).epsilon(1e-9));
        }
    }
}

TEST_CASE("elbo_grads matches finite differences") {
    SuiteResult r = run_gradient_suite(2024);
    INFO(r.detail);
    CHECK(r.passed);
}

TEST_CASE("gradient suite negative control catches an injected bug") {
    SuiteResult r = run_gradient_suite(2024, /*inject_bug=*/true);
    CHECK_FALSE(r.passed);
}

TEST_CASE("posterior gradient of the entropy term vanishes at uniform q") {
    Rng rng(8);
    Fixture f = Fixture::make(rng, 2, 3, 1, 4);
    // zero posterior net -> uniform q; only the a_c part should drive rho
    f.model.posterior = MlpParams::zeros_like(f.model.posterior);
    f.model.clean = MlpParams::zeros_like(f.model.clean);
    f.model.noisy = MlpParams::zeros_like(f.model.noisy);
    f.model.eps_logit = 0.0;
    // uniform clean and noisy heads make a_c constant in c for y_hat-symmetric
    // terms only when mix is constant; with everything uniform the posterior
    // upstream must vanish except through the (1-eps) delta term.
    ModelGrads grads = ModelGrads::zeros_like(f.model);
    elbo_grads(f.model, f.batch, grads);
    // finite-difference cross-check on the posterior block alone
    Vec flat;
    flatten_into(f.model.posterior, flat);
    MlpParams probe = f.model.posterior;
    GraphicalModel probe_model = f.model;
    Vec numeric = finite_diff_grad(
        [&](std::span<const double> p) {
            unflatten_from(p, 0, probe);
            probe_model.posterior = probe;
            return mean_elbo(probe_model, f.batch);
        },
        flat, 1e-5);
    Vec analytic;
    flatten_into(grads.posterior, analytic);
    for (std::size_t i = 0; i < flat.size(); ++i) CHECK(rel_err(analytic[i], numeric[i]) <= 1e-4);
}

TEST_CASE("model checkpoint round trip") {
    Rng rng(9);
    GraphicalModel m = GraphicalModel::init(3, 4, 6, rng);
    std::string path = (std::filesystem::temp_directory_path() / "nlre_test_model.nlgm").string();
    save_model(m, path);
    GraphicalModel back = load_model(path);
    CHECK(serialize_model(m) == serialize_model(back));
    std::remove(path.c_str());

    std::string bytes = serialize_model(m);
    CHECK_THROWS_AS(deserialize_model(bytes.substr(0, 20)), ParseError);
    bytes[0] = 'Z';
    CHECK_THROWS_AS(deserialize_model(bytes), ParseError);
}

TEST_CASE("elbo suite passes") {
    SuiteResult r = run_elbo_suite(99);
    INFO(r.detail);
    CHECK(r.passed);
}
