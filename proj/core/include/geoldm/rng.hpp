#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace geoldm {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline constexpr std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<std::uint8_t>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Stage/stream seed derivation: one global seed fans out to independent,
/// documented sub-streams. Same scheme everywhere in the pipeline.
inline constexpr std::uint64_t derive_seed(std::uint64_t root, std::string_view stage) {
    return splitmix64(root ^ fnv1a64(stage));
}

inline constexpr std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index) {
    return splitmix64(root ^ (0x9e3779b97f4a7c15ULL + index));
}

/// Deterministic RNG. mt19937_64 is bit-exact by the standard; the normal and
/// bounded-int draws below avoid std::*_distribution, whose output is
/// implementation-defined and would break run-to-run file identity.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi], inclusive, unbiased (rejection).
    int uniform_int(int lo, int hi) {
        const std::uint64_t n = static_cast<std::uint64_t>(hi - lo) + 1;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return lo + static_cast<int>(x % n);
    }

    /// Standard normal via Box-Muller (pair cached).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    float normal_f() { return static_cast<float>(normal()); }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace geoldm
