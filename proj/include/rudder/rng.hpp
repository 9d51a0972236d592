#pragma once

#include <cstdint>
#include <string_view>

namespace rudder {

/// splitmix64 finalizer; a bijective 64-bit mixer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Map 64 random bits to a double in [0, 1).
constexpr double to_unit_interval(std::uint64_t bits) noexcept {
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

/// Stateless generator: the i-th draw is a pure function of (key, i), so a
/// parameter tensor's values do not depend on how many other tensors exist.
class CounterRng {
public:
    constexpr CounterRng(std::uint64_t seed, std::string_view stream) noexcept
        : key_(mix64(seed ^ mix64(fnv1a64(stream)))) {}

    constexpr std::uint64_t bits(std::uint64_t counter) const noexcept {
        return mix64(key_ ^ mix64(counter));
    }

    double uniform(std::uint64_t counter) const noexcept { return to_unit_interval(bits(counter)); }

    /// Standard normal via Box-Muller on draws (2i, 2i+1).
    double normal(std::uint64_t i) const noexcept;

private:
    std::uint64_t key_;
};

/// Sequential splitmix64 stream for sampling.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) noexcept : state_(seed) {}

    std::uint64_t next() noexcept {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    double uniform() noexcept { return to_unit_interval(next()); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) noexcept;

private:
    std::uint64_t state_;
};

}  // namespace rudder
