#pragma once
// Synthetic classification datasets with controlled label noise. Clean labels
// stay inside NoisyDataset for evaluation; training code must go through the
// noisy view. A tripwire hook on the clean accessors enforces that in tests.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "nlre/numkit.hpp"
#include "nlre/rng.hpp"

namespace nlre {

enum class NoiseKind : std::uint8_t { symmetric = 0, pairflip = 1, idn = 2 };

inline const char* noise_kind_name(NoiseKind k) {
    switch (k) {
        case NoiseKind::symmetric: return "symmetric";
        case NoiseKind::pairflip: return "pairflip";
        case NoiseKind::idn: return "idn";
    }
    return "?";
}

struct CleanDataset {
    std::size_t n = 0;
    std::size_t d = 0;
    std::size_t c = 0;
    Vec features;                      // [n x d] row-major
    std::vector<std::uint16_t> labels; // clean labels

    std::span<const double> x(std::size_t i) const { return {features.data() + i * d, d}; }
};

struct NoiseSpec {
    NoiseKind kind = NoiseKind::symmetric;
    double rate = 0.0;          // nominal epsilon_true in [0,1)
    double per_sample_std = 0.1;  // idn only
};

class NoisyDataset {
  public:
    std::size_t n = 0;
    std::size_t d = 0;
    std::size_t c = 0;
    Vec features;                            // [n x d]
    std::vector<std::uint16_t> noisy_labels;
    std::vector<bool> flip_mask;             // noisy != clean
    NoiseKind noise_kind = NoiseKind::symmetric;
    double true_rate = 0.0;                  // mean(flip_mask), exact

    // Evaluation-only hook: set in tests to trip on any clean-label access.
    std::function<void()> clean_access_hook;

    std::span<const double> x(std::size_t i) const { return {features.data() + i * d, d}; }

    std::uint16_t clean_label(std::size_t i) const {
        if (clean_access_hook) clean_access_hook();
        return clean_labels_[i];
    }
    const std::vector<std::uint16_t>& clean_labels() const {
        if (clean_access_hook) clean_access_hook();
        return clean_labels_;
    }

    static NoisyDataset from_clean(const CleanDataset& ds) {
        NoisyDataset out;
        out.n = ds.n;
        out.d = ds.d;
        out.c = ds.c;
        out.features = ds.features;
        out.clean_labels_ = ds.labels;
        out.noisy_labels = ds.labels;
        out.flip_mask.assign(ds.n, false);
        return out;
    }

    void set_clean_labels(std::vector<std::uint16_t> labels) { clean_labels_ = std::move(labels); }

    void recompute_flip_stats() {
        std::size_t flips = 0;
        for (std::size_t i = 0; i < n; ++i) {
            flip_mask[i] = noisy_labels[i] != clean_labels_[i];
            flips += flip_mask[i];
        }
        true_rate = static_cast<double>(flips) / static_cast<double>(n);
    }

    bool operator==(const NoisyDataset& o) const {
        return n == o.n && d == o.d && c == o.c && features == o.features &&
               clean_labels_ == o.clean_labels_ && noisy_labels == o.noisy_labels &&
               flip_mask == o.flip_mask && noise_kind == o.noise_kind && true_rate == o.true_rate;
    }

  private:
    std::vector<std::uint16_t> clean_labels_;
};

// ---------------------------------------------------------------------------
// Generators

// C isotropic unit-variance Gaussian clusters with means on a circle of
// radius class_separation/2 in the first two feature dimensions. Classes are
// balanced (|count difference| <= 1), assignment i mod C.
inline CleanDataset gen_gaussian_blobs(std::size_t n, std::size_t c, std::size_t d,
                                       double separation, Rng& rng) {
    if (c < 2) throw std::invalid_argument("gen_gaussian_blobs: need C >= 2");
    if (d < 2) throw std::invalid_argument("gen_gaussian_blobs: need d >= 2");
    if (n < c) throw std::invalid_argument("gen_gaussian_blobs: need N >= C");
    CleanDataset ds;
    ds.n = n;
    ds.d = d;
    ds.c = c;
    ds.features.resize(n * d);
    ds.labels.resize(n);
    double radius = separation / 2.0;
    for (std::size_t i = 0; i < n; ++i) {
        std::uint16_t label = static_cast<std::uint16_t>(i % c);
        ds.labels[i] = label;
        double angle = 2.0 * M_PI * static_cast<double>(label) / static_cast<double>(c);
        double* row = &ds.features[i * d];
        for (std::size_t j = 0; j < d; ++j) row[j] = rng.normal();
        row[0] += radius * std::cos(angle);
        row[1] += radius * std::sin(angle);
    }
    return ds;
}

namespace detail {

// First k entries of a uniformly random permutation of 0..n-1.
inline std::vector<std::size_t> choose_indices(std::size_t n, std::size_t k, Rng& rng) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
        std::size_t j = i + rng.uniform_int(n - i);
        std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    return idx;
}

}  // namespace detail

// Exactly floor(rate*N) uniformly chosen samples relabeled to a uniformly
// random different class.
inline NoisyDataset inject_symmetric_noise(const CleanDataset& ds, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0)
        throw std::invalid_argument("inject_symmetric_noise: rate must be in [0,1)");
    NoisyDataset out = NoisyDataset::from_clean(ds);
    out.noise_kind = NoiseKind::symmetric;
    std::size_t k = static_cast<std::size_t>(rate * static_cast<double>(ds.n));
    for (std::size_t i : detail::choose_indices(ds.n, k, rng)) {
        std::size_t offset = 1 + rng.uniform_int(ds.c - 1);
        out.noisy_labels[i] =
            static_cast<std::uint16_t>((out.noisy_labels[i] + offset) % ds.c);
    }
    out.recompute_flip_stats();
    return out;
}

// floor(rate*N) uniformly chosen samples relabeled c -> (c+1) mod C.
inline NoisyDataset inject_pairflip_noise(const CleanDataset& ds, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 0.5)
        throw std::invalid_argument("inject_pairflip_noise: rate must be in [0,0.5)");
    NoisyDataset out = NoisyDataset::from_clean(ds);
    out.noise_kind = NoiseKind::pairflip;
    std::size_t k = static_cast<std::size_t>(rate * static_cast<double>(ds.n));
    for (std::size_t i : detail::choose_indices(ds.n, k, rng))
        out.noisy_labels[i] = static_cast<std::uint16_t>((out.noisy_labels[i] + 1) % ds.c);
    out.recompute_flip_stats();
    return out;
}

// Instance-dependent noise: per-sample flip probability q_i drawn from a
// truncated normal around the nominal rate; flip targets follow a softmax of
// a fixed random projection of the features with the true class masked out.
inline NoisyDataset inject_idn_noise(const CleanDataset& ds, const NoiseSpec& spec, Rng& rng) {
    if (spec.kind != NoiseKind::idn) throw std::invalid_argument("inject_idn_noise: kind != idn");
    if (spec.rate < 0.0 || spec.rate >= 1.0)
        throw std::invalid_argument("inject_idn_noise: rate must be in [0,1)");
    NoisyDataset out = NoisyDataset::from_clean(ds);
    out.noise_kind = NoiseKind::idn;
    // Fixed projection W [d x C], standard normal, one per dataset.
    Vec w(ds.d * ds.c);
    for (double& v : w) v = rng.normal();
    for (std::size_t i = 0; i < ds.n; ++i) {
        double q = spec.rate;
        if (spec.per_sample_std > 0.0) {
            int tries = 0;
            do {
                q = spec.rate + spec.per_sample_std * rng.normal();
            } while ((q < 0.0 || q > 1.0) && ++tries < 100);
            q = std::clamp(q, 0.0, 1.0);
        }
        Vec scores(ds.c, 0.0);
        auto xi = ds.x(i);
        for (std::size_t cc = 0; cc < ds.c; ++cc)
            for (std::size_t j = 0; j < ds.d; ++j) scores[cc] += xi[j] * w[j * ds.c + cc];
        std::uint16_t y = ds.labels[i];
        // categorical over classes: keep with prob 1-q, otherwise softmax(s)
        // over the other classes
        double mx = -1e300;
        for (std::size_t cc = 0; cc < ds.c; ++cc)
            if (cc != y) mx = std::max(mx, scores[cc]);
        double z = 0.0;
        Vec probs(ds.c, 0.0);
        for (std::size_t cc = 0; cc < ds.c; ++cc) {
            if (cc == y) continue;
            probs[cc] = std::exp(scores[cc] - mx);
            z += probs[cc];
        }
        for (std::size_t cc = 0; cc < ds.c; ++cc)
            probs[cc] = (cc == y) ? 1.0 - q : q * probs[cc] / z;
        double u = rng.uniform();
        double acc = 0.0;
        std::size_t pick = ds.c - 1;
        for (std::size_t cc = 0; cc < ds.c; ++cc) {
            acc += probs[cc];
            if (u < acc) {
                pick = cc;
                break;
            }
        }
        out.noisy_labels[i] = static_cast<std::uint16_t>(pick);
    }
    out.recompute_flip_stats();
    return out;
}

inline NoisyDataset inject_noise(const CleanDataset& ds, const NoiseSpec& spec, Rng& rng) {
    switch (spec.kind) {
        case NoiseKind::symmetric: return inject_symmetric_noise(ds, spec.rate, rng);
        case NoiseKind::pairflip: return inject_pairflip_noise(ds, spec.rate, rng);
        case NoiseKind::idn: return inject_idn_noise(ds, spec, rng);
    }
    throw std::invalid_argument("inject_noise: unknown kind");
}

// Disjoint train/test partition; the test side carries clean labels only.
inline std::pair<NoisyDataset, CleanDataset> split_train_test(const NoisyDataset& ds,
                                                              double test_fraction, Rng& rng) {
    if (test_fraction <= 0.0 || test_fraction >= 1.0)
        throw std::invalid_argument("split_train_test: fraction must be in (0,1)");
    std::size_t n_test = static_cast<std::size_t>(test_fraction * static_cast<double>(ds.n));
    if (n_test == 0 || n_test == ds.n)
        throw std::invalid_argument("split_train_test: a side would be empty");
    std::vector<std::size_t> idx(ds.n);
    for (std::size_t i = 0; i < ds.n; ++i) idx[i] = i;
    for (std::size_t i = 0; i + 1 < ds.n; ++i) {
        std::size_t j = i + rng.uniform_int(ds.n - i);
        std::swap(idx[i], idx[j]);
    }
    NoisyDataset train;
    train.d = ds.d;
    train.c = ds.c;
    train.noise_kind = ds.noise_kind;
    CleanDataset test;
    test.d = ds.d;
    test.c = ds.c;
    std::vector<std::uint16_t> train_clean;
    for (std::size_t k = 0; k < ds.n; ++k) {
        std::size_t i = idx[k];
        auto xi = ds.x(i);
        if (k < n_test) {
            test.features.insert(test.features.end(), xi.begin(), xi.end());
            test.labels.push_back(ds.clean_labels()[i]);
        } else {
            train.features.insert(train.features.end(), xi.begin(), xi.end());
            train.noisy_labels.push_back(ds.noisy_labels[i]);
            train_clean.push_back(ds.clean_labels()[i]);
        }
    }
    test.n = n_test;
    train.n = ds.n - n_test;
    train.set_clean_labels(std::move(train_clean));
    train.flip_mask.assign(train.n, false);
    train.recompute_flip_stats();
    return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Binary container: magic "NLDS", version u16, N/d/C u32 LE, features f64 LE,
// clean labels u16, noisy labels u16, flip mask packed bits, kind u8,
// nominal rate f64. Round trips are bit-exact.

inline constexpr std::uint16_t kDatasetFormatVersion = 1;

class ParseError : public std::runtime_error {
  public:
    ParseError(const std::string& msg, std::size_t offset)
        : std::runtime_error(msg + " (byte offset " + std::to_string(offset) + ")"),
          byte_offset(offset) {}
    std::size_t byte_offset;
};

namespace detail {

struct ByteWriter {
    std::string buf;
    template <typename T>
    void put(T v) {
        static_assert(std::is_trivially_copyable_v<T>);
        char tmp[sizeof(T)];
        std::memcpy(tmp, &v, sizeof(T));
        buf.append(tmp, sizeof(T));  // host is little-endian
    }
};

struct ByteReader {
    const std::string& buf;
    std::size_t pos = 0;
    template <typename T>
    T get(const char* what) {
        if (pos + sizeof(T) > buf.size())
            throw ParseError(std::string("truncated reading ") + what, pos);
        T v;
        std::memcpy(&v, buf.data() + pos, sizeof(T));
        pos += sizeof(T);
        return v;
    }
};

}  // namespace detail

inline std::string serialize_dataset(const NoisyDataset& ds) {
    detail::ByteWriter w;
    w.buf.append("NLDS", 4);
    w.put<std::uint16_t>(kDatasetFormatVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.n));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.d));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.c));
    for (double v : ds.features) w.put(v);
    for (std::uint16_t v : ds.clean_labels()) w.put(v);
    for (std::uint16_t v : ds.noisy_labels) w.put(v);
    for (std::size_t i = 0; i < ds.n; i += 8) {
        std::uint8_t byte = 0;
        for (std::size_t b = 0; b < 8 && i + b < ds.n; ++b)
            if (ds.flip_mask[i + b]) byte |= static_cast<std::uint8_t>(1u << b);
        w.put(byte);
    }
    w.put<std::uint8_t>(static_cast<std::uint8_t>(ds.noise_kind));
    w.put(ds.true_rate);
    return std::move(w.buf);
}

inline NoisyDataset deserialize_dataset(const std::string& bytes) {
    detail::ByteReader r{bytes};
    if (bytes.size() < 4 || bytes.compare(0, 4, "NLDS") != 0)
        throw ParseError("bad magic, expected NLDS", 0);
    r.pos = 4;
    auto version = r.get<std::uint16_t>("version");
    if (version != kDatasetFormatVersion)
        throw ParseError("unsupported dataset format version " + std::to_string(version), 4);
    NoisyDataset ds;
    ds.n = r.get<std::uint32_t>("N");
    ds.d = r.get<std::uint32_t>("d");
    ds.c = r.get<std::uint32_t>("C");
    ds.features.resize(ds.n * ds.d);
    for (double& v : ds.features) v = r.get<double>("features");
    std::vector<std::uint16_t> clean(ds.n);
    for (auto& v : clean) v = r.get<std::uint16_t>("clean labels");
    ds.set_clean_labels(std::move(clean));
    ds.noisy_labels.resize(ds.n);
    for (auto& v : ds.noisy_labels) v = r.get<std::uint16_t>("noisy labels");
    ds.flip_mask.assign(ds.n, false);
    for (std::size_t i = 0; i < ds.n; i += 8) {
        auto byte = r.get<std::uint8_t>("flip mask");
        for (std::size_t b = 0; b < 8 && i + b < ds.n; ++b)
            ds.flip_mask[i + b] = (byte >> b) & 1u;
    }
    auto kind = r.get<std::uint8_t>("noise kind");
    if (kind > 2) throw ParseError("invalid noise kind " + std::to_string(kind), r.pos - 1);
    ds.noise_kind = static_cast<NoiseKind>(kind);
    ds.true_rate = r.get<double>("true rate");
    if (r.pos != bytes.size()) throw ParseError("trailing bytes after dataset", r.pos);
    // consistency with the stored mask
    double check = 0.0;
    for (std::size_t i = 0; i < ds.n; ++i) check += ds.flip_mask[i];
    if (ds.n > 0 && std::abs(check / static_cast<double>(ds.n) - ds.true_rate) > 1e-12)
        throw ParseError("true_rate inconsistent with flip mask", bytes.size() - sizeof(double));
    return ds;
}

inline void save_dataset(const NoisyDataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("save_dataset: cannot open " + path);
    std::string bytes = serialize_dataset(ds);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("save_dataset: write failed for " + path);
}

inline NoisyDataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_dataset: cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_dataset(bytes);
}

}  // namespace nlre
