#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

namespace rudder::numerics {

/// Engine-wide guard for zero-norm inputs.
inline constexpr double kDefaultEpsilon = 1e-12;

/// A dense, finite, non-empty vector of doubles. Construction rejects NaN/Inf
/// so every value that crosses a module boundary is known to be finite.
class RealVector {
public:
    explicit RealVector(std::vector<double> values);
    RealVector(std::initializer_list<double> values);

    /// All-zero vector of the given dimension.
    static RealVector zeros(std::size_t dim);

    std::size_t dim() const noexcept { return values_.size(); }
    double operator[](std::size_t i) const { return values_[i]; }

    std::span<const double> span() const noexcept { return values_; }
    const std::vector<double>& values() const noexcept { return values_; }
    auto begin() const noexcept { return values_.begin(); }
    auto end() const noexcept { return values_.end(); }

    double norm() const;

    friend bool operator==(const RealVector&, const RealVector&) = default;

private:
    std::vector<double> values_;
};

enum class PoolMode { Mean, NormWeightedMean };

const char* to_string(PoolMode mode);
PoolMode pool_mode_from_string(const std::string_view name);

// Compensated (Kahan) reductions in fixed left-to-right order.
double kahan_sum(std::span<const double> xs);
double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> v);

double softplus(double x);
double sigmoid(double x);

double cosine_similarity(const RealVector& a, const RealVector& b,
                         double epsilon = kDefaultEpsilon);
double cosine_similarity(std::span<const double> a, std::span<const double> b,
                         double epsilon = kDefaultEpsilon);

RealVector l2_normalize(const RealVector& v, double epsilon = kDefaultEpsilon);

RealVector pool(std::span<const RealVector> vectors, PoolMode mode,
                double epsilon = kDefaultEpsilon);

/// Clamp into [-1, 1] for arccos consumers.
double clamp_unit(double x);

}  // namespace rudder::numerics
