#pragma once

#include <cstdint>
#include <random>

#include "orchidkit/array.hpp"

namespace orchid {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Deterministic random stream: mt19937_64 plus a self-contained Box-Muller
/// normal so results are bit-identical across platforms and library versions.
/// Every normal() consumes exactly two engine draws.
class RandomStream {
public:
    explicit RandomStream(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

    std::uint64_t seed() const { return seed_; }

    /// Derive an independent substream. Same (seed, tag) always yields the
    /// same stream regardless of how much this stream has been consumed.
    RandomStream split(std::uint64_t tag) const {
        return RandomStream(splitmix64(seed_ ^ splitmix64(tag + 0x51ED2701ull)));
    }

    std::uint64_t bits() { return engine_(); }

    /// Uniform in [0,1) with 53-bit resolution.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [lo, hi] inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(engine_() % span);
    }

    /// Standard normal via Box-Muller (cosine branch only).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        // log1p(-u1) keeps the log finite for u1 == 0
        double r = std::sqrt(-2.0 * std::log1p(-u1));
        return r * std::cos(6.283185307179586477 * u2);
    }

    DenseArray normal_array(std::vector<std::size_t> shape, double stddev = 1.0) {
        DenseArray a(std::move(shape));
        for (double& v : a.data) v = stddev * normal();
        return a;
    }

    DenseArray uniform_array(std::vector<std::size_t> shape, double lo, double hi) {
        DenseArray a(std::move(shape));
        for (double& v : a.data) v = lo + (hi - lo) * uniform();
        return a;
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

/// FNV-1a over raw bytes; used for artifact checksums and parameter hashes.
inline std::uint64_t fnv1a64(const void* bytes, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
    const unsigned char* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t hash_array(const DenseArray& a, std::uint64_t h = 0xcbf29ce484222325ull) {
    h = fnv1a64(a.shape.data(), a.shape.size() * sizeof(std::size_t), h);
    return fnv1a64(a.data.data(), a.data.size() * sizeof(double), h);
}

}  // namespace orchid
