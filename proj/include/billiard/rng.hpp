#pragma once

#include <cstdint>

namespace billiard {

// All stochastic routines in this project draw from one global 64-bit seed.
// Child streams are derived by hashing (seed, tag...) so every task owns an
// independent, reproducible stream regardless of execution order or thread
// count. The generators are fixed-algorithm (not std::) so that reports are
// bit-identical across standard libraries.

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Deterministic child-seed derivation: hash-mixes the parent seed with tags.
inline std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t tag0,
                                 std::uint64_t tag1 = 0, std::uint64_t tag2 = 0) {
    std::uint64_t s = parent;
    std::uint64_t h = splitmix64(s);
    s ^= tag0 + 0x632be59bd9b4e019ULL;
    h ^= splitmix64(s);
    s ^= tag1 + 0x9e3779b97f4a7c15ULL;
    h ^= splitmix64(s);
    s ^= tag2 + 0xd1b54a32d192ed03ULL;
    h ^= splitmix64(s);
    return h;
}

/// xoshiro256** — small, fast, reproducible.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64(sm);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    /// Uniform double in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform double in [a, b).
    double uniform(double a, double b) { return a + (b - a) * uniform(); }

    /// Integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // Lemire-style bounded draw with rejection; unbiased and reproducible.
        std::uint64_t x = next_u64();
        __uint128_t m = static_cast<__uint128_t>(x) * n;
        auto lo = static_cast<std::uint64_t>(m);
        if (lo < n) {
            const std::uint64_t threshold = (0 - n) % n;
            while (lo < threshold) {
                x = next_u64();
                m = static_cast<__uint128_t>(x) * n;
                lo = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

private:
    static std::uint64_t rotl(std::uint64_t v, int k) {
        return (v << k) | (v >> (64 - k));
    }
    std::uint64_t s_[4];
};

} // namespace billiard
