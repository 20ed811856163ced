#pragma once
// Counter-based deterministic RNG. Identical seed + identical call sequence
// gives an identical stream on every platform; streams can be split by label
// so that experiment arms share data while drawing independent randomness.

#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace nlre {

namespace detail {
inline std::uint64_t mix64(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ULL;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebULL;
    z ^= z >> 31;
    return z;
}
}  // namespace detail

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : seed_(seed), counter_(0) {}

    std::uint64_t next_u64() {
        ++counter_;
        return detail::mix64(seed_ + 0x9e3779b97f4a7c15ULL * counter_);
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller; consumes exactly two uniforms per call.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // Uniform integer in [0, n).
    std::size_t uniform_int(std::size_t n) {
        if (n == 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
        return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
    }

    // Independent child stream; deterministic in (seed, label).
    Rng split(std::uint64_t label) const {
        return Rng(detail::mix64(seed_ ^ detail::mix64(label + 0x632be59bd9b4e019ULL)));
    }

    std::uint64_t seed() const { return seed_; }

  private:
    std::uint64_t seed_;
    std::uint64_t counter_;
};

}  // namespace nlre
