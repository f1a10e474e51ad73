#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace peftkit {

// Deterministic 64-bit generator (splitmix64). Used for every weight init
// and shuffle so a run is reproducible from a single seed across platforms.
// std::mt19937 + std::normal_distribution are avoided on purpose: the
// distribution adaptors are not bit-stable across standard libraries.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, n).
    uint64_t next_below(uint64_t n) { return next_u64() % n; }

    // Standard normal via Box-Muller; one fresh pair per call keeps the
    // stream independent of call parity.
    double next_gaussian() {
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 0.0) u1 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(2.0 * std::numbers::pi * u2);
    }

    float next_gaussian(float mean, float stddev) {
        return mean + stddev * static_cast<float>(next_gaussian());
    }

  private:
    uint64_t state_;
};

// Derives an independent stream, e.g. per-epoch shuffle seeds.
inline uint64_t fork_seed(uint64_t seed, uint64_t stream) {
    Rng r(seed ^ (0xA5A5A5A5A5A5A5A5ULL + stream * 0x9E3779B97F4A7C15ULL));
    return r.next_u64();
}

}  // namespace peftkit
