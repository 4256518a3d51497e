#ifndef HAMKIT_RNG_HPP
#define HAMKIT_RNG_HPP

#include <cmath>
#include <cstdint>
#include <string>

#include "matrix.hpp"

namespace hamkit {

// Counter-based splitmix64 generator. Identical seed gives an identical
// draw sequence on every platform, and (seed, counter) round-trips through
// checkpoints so interrupted runs can resume mid-stream.
struct RngState {
    std::uint64_t seed = 0;
    std::uint64_t counter = 0;

    static constexpr const char* algorithm = "splitmix64";

    explicit RngState(std::uint64_t s = 0, std::uint64_t c = 0) : seed(s), counter(c) {}

    std::uint64_t next_u64() {
        std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (++counter);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform on [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; consumes exactly two uniforms per call.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    std::uint64_t uniform_index(std::uint64_t n) { return next_u64() % n; }

    // Derives an independent stream for a named sub-component, so one
    // top-level seed fans out deterministically.
    RngState derive(const std::string& label) const {
        std::uint64_t h = 1469598103934665603ull;  // FNV-1a offset
        for (unsigned char c : label) {
            h ^= c;
            h *= 1099511628211ull;
        }
        RngState mix(seed ^ h, 0);
        return RngState(mix.next_u64(), 0);
    }

    RngState derive(std::uint64_t index) const { return derive(std::to_string(index)); }
};

inline Matrix random_uniform(std::size_t rows, std::size_t cols, RngState& rng,
                             double lo = 0.0, double hi = 1.0) {
    Matrix m(rows, cols);
    for (double& v : m.data) v = rng.uniform(lo, hi);
    return m;
}

inline Matrix random_normal(std::size_t rows, std::size_t cols, RngState& rng,
                            double mean = 0.0, double stddev = 1.0) {
    Matrix m(rows, cols);
    for (double& v : m.data) v = mean + stddev * rng.normal();
    return m;
}

}  // namespace hamkit

#endif
