#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace phenoauth {

/// splitmix64 step, used for seeding and for deriving child streams.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// xoshiro256++ deterministic stream. Every source of randomness in the
/// project flows through one of these, derived from a single root seed,
/// so whole runs replay bit-exactly.
class Rng {
public:
    Rng() : Rng(0xdeadbeefULL) {}

    explicit Rng(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64(sm);
    }

    /// Child stream derived from this one plus a domain tag. Advances this
    /// stream by one draw.
    Rng fork(uint64_t tag) {
        uint64_t sm = next() ^ (tag * 0x9e3779b97f4a7c15ULL);
        Rng child(0);
        for (auto& w : child.s_) w = splitmix64(sm);
        return child;
    }

    uint64_t next() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    double u01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    bool bernoulli(double p) { return u01() < p; }

    bool coin() { return (next() & 1) != 0; }

    /// Uniform integer in [0, n). n must be nonzero.
    uint64_t below(uint64_t n) {
        // Lemire-style rejection-free-enough bound; bias is negligible for
        // the desk-scale n used here, but keep a rejection loop anyway.
        uint64_t threshold = (-n) % n;
        for (;;) {
            uint64_t r = next();
            __uint128_t m = static_cast<__uint128_t>(r) * n;
            if (static_cast<uint64_t>(m) >= threshold) return static_cast<uint64_t>(m >> 64);
        }
    }

    uint8_t byte() { return static_cast<uint8_t>(next() & 0xff); }

    /// Standard normal via Box-Muller (one value per call, cached pair).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * u01() - 1.0;
            v = 2.0 * u01() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        double mul = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * mul;
        have_spare_ = true;
        return u * mul;
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t s_[4]{};
    double spare_ = 0.0;
    bool have_spare_ = false;
};

/// Stable 64-bit tag for domain-separating child streams by name.
inline uint64_t stream_tag(std::string_view name) {
    // FNV-1a
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : name) {
        h ^= static_cast<uint8_t>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace phenoauth
