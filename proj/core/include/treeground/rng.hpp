#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace tg {

/// splitmix64 step; used for seed derivation and hashing.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Derive an independent stream seed from (root, id), e.g. one per video.
inline uint64_t derive_seed(uint64_t root, uint64_t id) {
    uint64_t s = root ^ (0x853c49e6748fea9bULL + id * 0xda3e39cb94b95bdbULL);
    return splitmix64(s);
}

/// Deterministic PRNG (xoshiro256**) with hand-rolled distributions so that
/// streams are reproducible across standard libraries and platforms.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t s = seed;
        for (auto& w : state_) w = splitmix64(s);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform in [0, 1).
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Uniform integer in [0, n). n must be > 0.
    int64_t below(int64_t n) { return static_cast<int64_t>(uniform01() * static_cast<double>(n)); }

    /// Uniform integer in [lo, hi] inclusive.
    int64_t between(int64_t lo, int64_t hi) { return lo + below(hi - lo + 1); }

    bool coin(double p_true) { return uniform01() < p_true; }

    /// Standard normal via Box-Muller (deterministic, no cached spare).
    double normal() {
        double u1 = uniform01();
        double u2 = uniform01();
        while (u1 <= 1e-300) u1 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(static_cast<int64_t>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// k distinct indices drawn from [0, n), in ascending order.
    std::vector<int64_t> sample_indices(int64_t n, int64_t k);

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t state_[4];
};

inline std::vector<int64_t> Rng::sample_indices(int64_t n, int64_t k) {
    std::vector<int64_t> all(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
    shuffle(all);
    if (k > n) k = n;
    all.resize(static_cast<size_t>(k));
    std::sort(all.begin(), all.end());
    return all;
}

/// FNV-1a over a byte string; used for config hashes.
inline uint64_t fnv1a(const void* data, size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = 0xcbf29ce484222325ULL;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace tg
