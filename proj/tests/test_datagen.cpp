#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "nlre/datagen.hpp"
#include "nlre/numkit.hpp"

using namespace nlre;

namespace {

// Linear probe: single-layer softmax classifier, full-batch cross-entropy.
double linear_probe_accuracy(const CleanDataset& ds, int epochs = 200, double lr = 0.05) {
    Rng rng(99);
    MlpParams probe = MlpParams::init({ds.d, ds.c}, rng);
    SgdMomentum opt(lr, 0.9, probe);
    MlpCache cache;
    for (int e = 0; e < epochs; ++e) {
        MlpGrads grads = MlpParams::zeros_like(probe);
        double inv = 1.0 / static_cast<double>(ds.n);
        for (std::size_t i = 0; i < ds.n; ++i) {
            Vec logits = mlp_forward_cached(probe, ds.x(i), cache);
            Vec up = softmax(logits);
            up[ds.labels[i]] -= 1.0;
            for (double& v : up) v *= inv;
            mlp_backward_accum(probe, cache, up, grads);
        }
        opt.step(probe, grads);
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < ds.n; ++i) {
        Vec p = softmax(mlp_forward(probe, ds.x(i)));
        std::size_t arg = 0;
        for (std::size_t cc = 1; cc < ds.c; ++cc)
            if (p[cc] > p[arg]) arg = cc;
        hits += arg == ds.labels[i];
    }
    return static_cast<double>(hits) / static_cast<double>(ds.n);
}

std::string temp_path(const char* stem) {
    return (std::filesystem::temp_directory_path() / stem).string();
}

}  // namespace

TEST_CASE("gaussian blobs: minimal balanced case") {
    Rng rng(1);
    CleanDataset ds = gen_gaussian_blobs(4, 4, 2, 10.0, rng);
    CHECK(ds.n == 4);
    std::map<int, int> counts;
    for (auto l : ds.labels) counts[l]++;
    CHECK(counts.size() == 4);
    for (auto& [k, v] : counts) CHECK(v == 1);
    CHECK_THROWS(gen_gaussian_blobs(3, 4, 2, 10.0, rng));
    CHECK_THROWS(gen_gaussian_blobs(10, 4, 1, 10.0, rng));
    CHECK_THROWS(gen_gaussian_blobs(10, 1, 2, 10.0, rng));
}

TEST_CASE("gaussian blobs: class balance and determinism") {
    Rng a(7), b(7);
    CleanDataset d1 = gen_gaussian_blobs(1001, 4, 3, 6.0, a);
    CleanDataset d2 = gen_gaussian_blobs(1001, 4, 3, 6.0, b);
    CHECK(d1.features == d2.features);
    CHECK(d1.labels == d2.labels);
    std::map<int, int> counts;
    for (auto l : d1.labels) counts[l]++;
    int mn = 1 << 30, mx = 0;
    for (auto& [k, v] : counts) {
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    CHECK(mx - mn <= 1);
}

TEST_CASE("gaussian blobs: separability probes") {
    Rng rng(21);
    CleanDataset merged = gen_gaussian_blobs(2000, 4, 2, 0.0, rng);
    double acc0 = linear_probe_accuracy(merged);
    CHECK(std::abs(acc0 - 0.25) <= 0.1);

    Rng rng2(22);
    CleanDataset sep = gen_gaussian_blobs(4000, 4, 2, 10.0, rng2);
    double acc1 = linear_probe_accuracy(sep);
    CHECK(acc1 >= 0.99);
}

TEST_CASE("symmetric noise injector") {
    Rng rng(5);
    CleanDataset ds = gen_gaussian_blobs(4000, 4, 2, 8.0, rng);

    SUBCASE("rate 0 is identity") {
        NoisyDataset nd = inject_symmetric_noise(ds, 0.0, rng);
        CHECK(nd.noisy_labels == ds.labels);
        CHECK(nd.true_rate == 0.0);
        for (std::size_t i = 0; i < nd.n; ++i) CHECK_FALSE(nd.flip_mask[i]);
    }

    SUBCASE("rate 0.5 flips exactly 2000, never to self") {
        NoisyDataset nd = inject_symmetric_noise(ds, 0.5, rng);
        std::size_t flips = 0;
        for (std::size_t i = 0; i < nd.n; ++i) {
            if (nd.flip_mask[i]) {
                ++flips;
                CHECK(nd.noisy_labels[i] != ds.labels[i]);
            } else {
                CHECK(nd.noisy_labels[i] == ds.labels[i]);
            }
        }
        CHECK(flips == 2000);
        CHECK(nd.true_rate == 0.5);
    }

    SUBCASE("flip targets approximately uniform over C-1 alternatives") {
        NoisyDataset nd = inject_symmetric_noise(ds, 0.5, rng);
        // offset histogram (noisy - clean) mod C over flipped samples
        std::map<int, int> hist;
        int total = 0;
        for (std::size_t i = 0; i < nd.n; ++i) {
            if (!nd.flip_mask[i]) continue;
            hist[(nd.noisy_labels[i] + nd.c - ds.labels[i]) % nd.c]++;
            ++total;
        }
        double expected = static_cast<double>(total) / 3.0;
        double chi2 = 0.0;
        for (int off = 1; off <= 3; ++off) {
            double diff = hist[off] - expected;
            chi2 += diff * diff / expected;
        }
        CHECK(chi2 < 9.21);  // chi-square 2 dof, p > 0.01
    }

    SUBCASE("invalid rate") { CHECK_THROWS(inject_symmetric_noise(ds, 1.0, rng)); }
}

TEST_CASE("pairflip noise injector") {
    Rng rng(6);
    CleanDataset ds = gen_gaussian_blobs(1000, 4, 2, 8.0, rng);

    NoisyDataset id = inject_pairflip_noise(ds, 0.0, rng);
    CHECK(id.noisy_labels == ds.labels);

    NoisyDataset nd = inject_pairflip_noise(ds, 0.3, rng);
    for (std::size_t i = 0; i < nd.n; ++i) {
        if (nd.flip_mask[i])
            CHECK(nd.noisy_labels[i] == (ds.labels[i] + 1) % 4);
    }
    CHECK_THROWS(inject_pairflip_noise(ds, 0.5, rng));

    // C=2: all flips are 0<->1
    Rng rng2(8);
    CleanDataset two = gen_gaussian_blobs(500, 2, 2, 8.0, rng2);
    NoisyDataset nd2 = inject_pairflip_noise(two, 0.3, rng2);
    for (std::size_t i = 0; i < nd2.n; ++i)
        if (nd2.flip_mask[i]) CHECK(nd2.noisy_labels[i] == 1 - two.labels[i]);
}

TEST_CASE("idn noise injector") {
    Rng rng(9);
    CleanDataset ds = gen_gaussian_blobs(4000, 4, 2, 8.0, rng);

    SUBCASE("rate 0 std 0 flips nothing") {
        NoiseSpec spec{NoiseKind::idn, 0.0, 0.0};
        NoisyDataset nd = inject_idn_noise(ds, spec, rng);
        CHECK(nd.true_rate == 0.0);
    }

    SUBCASE("realized rate concentrates around nominal") {
        NoiseSpec spec{NoiseKind::idn, 0.5, 0.1};
        NoisyDataset nd = inject_idn_noise(ds, spec, rng);
        CHECK(std::abs(nd.true_rate - 0.5) <= 0.03);
    }

    SUBCASE("flip targets are feature-dependent") {
        // Targets follow softmax(xW) with the clean class masked out, so the
        // top-scoring alternative should be picked far more often than the
        // 1/(C-1) an instance-independent injector would give.
        Rng gen_rng(17);
        NoiseSpec spec{NoiseKind::idn, 0.5, 0.1};
        NoisyDataset nd = inject_idn_noise(ds, spec, gen_rng);
        // Recover the projection: W is the first d*C normals of the stream.
        Rng replay(17);
        Vec w(ds.d * ds.c);
        for (double& v : w) v = replay.normal();
        std::size_t agree = 0, flips = 0;
        for (std::size_t i = 0; i < nd.n; ++i) {
            if (!nd.flip_mask[i]) continue;
            auto xi = ds.x(i);
            std::size_t best = ds.c;
            double best_score = -1e300;
            for (std::size_t cc = 0; cc < ds.c; ++cc) {
                if (cc == ds.labels[i]) continue;
                double s = 0.0;
                for (std::size_t j = 0; j < ds.d; ++j) s += xi[j] * w[j * ds.c + cc];
                if (s > best_score) {
                    best_score = s;
                    best = cc;
                }
            }
            agree += nd.noisy_labels[i] == best;
            ++flips;
        }
        double frac = static_cast<double>(agree) / static_cast<double>(flips);
        CHECK(frac > 0.5);  // instance-independent would give ~1/3
    }

    SUBCASE("realized rate within 3 binomial sigmas for stochastic injectors") {
        for (double eps : {0.2, 0.4}) {
            NoiseSpec spec{NoiseKind::idn, eps, 0.1};
            Rng r2(31);
            NoisyDataset nd = inject_idn_noise(ds, spec, r2);
            double sigma = std::sqrt(eps * (1 - eps) / static_cast<double>(ds.n));
            CHECK(std::abs(nd.true_rate - eps) <= 3 * sigma + 0.1 / std::sqrt(ds.n) * 3);
        }
    }
}

TEST_CASE("noisy dataset invariants hold for every injector") {
    Rng rng(13);
    CleanDataset ds = gen_gaussian_blobs(500, 3, 2, 6.0, rng);
    NoiseSpec idn{NoiseKind::idn, 0.3, 0.1};
    NoisyDataset cases[] = {inject_symmetric_noise(ds, 0.3, rng),
                            inject_pairflip_noise(ds, 0.3, rng), inject_idn_noise(ds, idn, rng)};
    for (const auto& nd : cases) {
        std::size_t flips = 0;
        for (std::size_t i = 0; i < nd.n; ++i) {
            CHECK(nd.flip_mask[i] == (nd.noisy_labels[i] != ds.labels[i]));
            flips += nd.flip_mask[i];
        }
        CHECK(nd.true_rate == static_cast<double>(flips) / static_cast<double>(nd.n));
    }
}

TEST_CASE("same seed gives identical dataset bytes") {
    auto make = [] {
        Rng rng(77);
        CleanDataset ds = gen_gaussian_blobs(200, 3, 2, 5.0, rng);
        NoiseSpec spec{NoiseKind::idn, 0.4, 0.1};
        return serialize_dataset(inject_idn_noise(ds, spec, rng));
    };
    CHECK(make() == make());
}

TEST_CASE("train/test split") {
    Rng rng(3);
    CleanDataset ds = gen_gaussian_blobs(100, 4, 2, 8.0, rng);
    NoisyDataset nd = inject_symmetric_noise(ds, 0.2, rng);

    auto [train, test] = split_train_test(nd, 0.2, rng);
    CHECK(train.n == 80);
    CHECK(test.n == 20);
    CHECK(train.d == nd.d);
    CHECK(test.c == nd.c);

    CHECK_THROWS(split_train_test(nd, 0.001, rng));  // empty test side
    CHECK_THROWS(split_train_test(nd, 1.0, rng));
}

TEST_CASE("dataset file round trip") {
    Rng rng(15);
    CleanDataset ds = gen_gaussian_blobs(64, 3, 2, 5.0, rng);
    NoisyDataset nd = inject_symmetric_noise(ds, 0.25, rng);
    std::string path = temp_path("nlre_test_roundtrip.nlds");
    save_dataset(nd, path);
    NoisyDataset back = load_dataset(path);
    CHECK(nd == back);
    std::remove(path.c_str());
}

TEST_CASE("dataset parse errors") {
    Rng rng(16);
    CleanDataset ds = gen_gaussian_blobs(16, 2, 2, 5.0, rng);
    NoisyDataset nd = inject_symmetric_noise(ds, 0.25, rng);
    std::string bytes = serialize_dataset(nd);

    SUBCASE("truncated file") {
        std::string cut = bytes.substr(0, bytes.size() / 2);
        CHECK_THROWS_AS(deserialize_dataset(cut), ParseError);
    }

    SUBCASE("bad magic") {
        std::string bad = bytes;
        bad[0] = 'X';
        CHECK_THROWS_AS(deserialize_dataset(bad), ParseError);
    }

    SUBCASE("version mismatch") {
        std::string bad = bytes;
        bad[4] = 99;
        try {
            deserialize_dataset(bad);
            CHECK(false);
        } catch (const ParseError& e) {
            CHECK(std::string(e.what()).find("version") != std::string::npos);
        }
    }
}
