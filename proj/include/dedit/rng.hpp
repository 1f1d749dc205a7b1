#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace dedit {

constexpr std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

// Counter-based splittable PRNG. Every output is a hash of (key, counter), so a
// stream can be forked by deriving a child key without touching the parent's
// state. All randomness in the project flows from one seed through splits of
// this type; there is no global generator.
class Rng {
public:
    explicit Rng(std::uint64_t key = 0) : key_(key) {}

    // Child stream for an independent purpose. Splitting is a pure function of
    // (parent key, label), so the order in which siblings are used is irrelevant.
    Rng split(std::uint64_t label) const { return Rng(mix(key_ ^ mix(label ^ kSplitSalt))); }
    Rng split(std::string_view label) const { return split(fnv1a64(label)); }

    std::uint64_t next_u64() { return mix(key_ ^ mix(counter_++ ^ kDrawSalt)); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform_in(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Rejection keeps the draw exactly uniform.
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return x % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal via Box-Muller; consumes two uniforms per call.
    double normal() {
        double u1 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    std::uint64_t key() const { return key_; }
    std::uint64_t counter() const { return counter_; }

private:
    static constexpr std::uint64_t kSplitSalt = 0x9e2b6e7a8c1d3f55ull;
    static constexpr std::uint64_t kDrawSalt = 0x5bf0a8b1c3d2e4f7ull;

    // SplitMix64 finalizer; full avalanche on 64 bits.
    static constexpr std::uint64_t mix(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ull;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

}  // namespace dedit
