#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <string_view>

namespace seegraph {

// Counter-based random numbers: every draw is a pure function of a key
// tuple, so generation order and thread assignment never change results.
namespace rng {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Hashes an ordered key tuple into 64 random bits.
inline std::uint64_t hash(std::initializer_list<std::uint64_t> key) noexcept {
    std::uint64_t h = 0x6A09E667F3BCC908ULL;
    for (std::uint64_t k : key) h = splitmix64(h ^ splitmix64(k));
    return h;
}

/// FNV-1a over bytes; turns names into stable key components.
constexpr std::uint64_t hash_string(std::string_view s) noexcept {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ULL;
    }
    return h;
}

/// Uniform in the open interval (0, 1); never returns 0 or 1.
inline double to_open_unit(std::uint64_t bits) noexcept {
    return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

inline double uniform(std::initializer_list<std::uint64_t> key) noexcept {
    return to_open_unit(hash(key));
}

/// Standard normal via Box-Muller on two sub-streams of the same key.
inline double normal(std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t d) noexcept {
    const double u1 = uniform({a, b, c, d, 0});
    const double u2 = uniform({a, b, c, d, 1});
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

/// Logistic(0, 1) sample: log(u) - log(1 - u).
inline double logistic(std::initializer_list<std::uint64_t> key) noexcept {
    const double u = uniform(key);
    return std::log(u) - std::log1p(-u);
}

}  // namespace rng

/// Sequential generator for places where a stream is natural (initialization,
/// shuffling). Still keyed, so two streams with the same key agree.
class Stream {
public:
    explicit Stream(std::uint64_t key) : key_(key) {}

    std::uint64_t next_bits() noexcept { return rng::hash({key_, counter_++}); }
    double next_uniform() noexcept { return rng::to_open_unit(next_bits()); }
    double next_uniform(double lo, double hi) noexcept { return lo + (hi - lo) * next_uniform(); }

    /// Uniform integer in [0, n) by rejection, n > 0.
    std::uint64_t next_below(std::uint64_t n) noexcept {
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        for (;;) {
            const std::uint64_t r = next_bits();
            if (r < limit) return r % n;
        }
    }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace seegraph
