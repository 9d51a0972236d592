#include "rudder/rng.hpp"

#include <cmath>
#include <numbers>

namespace rudder {

double CounterRng::normal(std::uint64_t i) const noexcept {
    // u1 in (0, 1] keeps the log finite.
    const double u1 = 1.0 - uniform(2 * i);
    const double u2 = uniform(2 * i + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t SplitMix64::below(std::uint64_t n) noexcept {
    // Rejection sampling removes modulo bias.
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x = next();
    while (x >= limit) x = next();
    return x % n;
}

}  // namespace rudder
