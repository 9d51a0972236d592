#include "rudder/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <string_view>

#include "rudder/error.hpp"

namespace rudder::numerics {

namespace {

void require_finite(std::span<const double> values) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw InvalidArgument("non-finite element at index " + std::to_string(i));
        }
    }
}

void require_same_dim(std::size_t a, std::size_t b) {
    if (a != b) {
        throw DimMismatch("dimension " + std::to_string(a) + " vs " + std::to_string(b));
    }
}

double sorted_sum(std::vector<double> xs) {
    std::sort(xs.begin(), xs.end());
    return kahan_sum(xs);
}

}  // namespace

RealVector::RealVector(std::vector<double> values) : values_(std::move(values)) {
    if (values_.empty()) throw InvalidArgument("RealVector must have dim >= 1");
    require_finite(values_);
}

RealVector::RealVector(std::initializer_list<double> values)
    : RealVector(std::vector<double>(values)) {}

RealVector RealVector::zeros(std::size_t dim) { return RealVector(std::vector<double>(dim, 0.0)); }

double RealVector::norm() const { return l2_norm(values_); }

const char* to_string(PoolMode mode) {
    switch (mode) {
        case PoolMode::Mean: return "mean";
        case PoolMode::NormWeightedMean: return "norm_weighted_mean";
    }
    return "?";
}

PoolMode pool_mode_from_string(const std::string_view name) {
    if (name == "mean") return PoolMode::Mean;
    if (name == "norm_weighted_mean") return PoolMode::NormWeightedMean;
    throw InvalidArgument("unknown pool mode '" + std::string(name) + "'");
}

double kahan_sum(std::span<const double> xs) {
    double sum = 0.0;
    double comp = 0.0;
    for (double x : xs) {
        const double y = x - comp;
        const double t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    return sum;
}

double dot(std::span<const double> a, std::span<const double> b) {
    require_same_dim(a.size(), b.size());
    double sum = 0.0;
    double comp = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double y = a[i] * b[i] - comp;
        const double t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    return sum;
}

double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double softplus(double x) {
    // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double clamp_unit(double x) { return std::clamp(x, -1.0, 1.0); }

double cosine_similarity(std::span<const double> a, std::span<const double> b, double epsilon) {
    require_same_dim(a.size(), b.size());
    const double na = l2_norm(a);
    const double nb = l2_norm(b);
    if (na < epsilon || nb < epsilon) throw ZeroNormInput("cosine of a zero-norm vector");
    // Product of norms is commutative, so cos(a,b) == cos(b,a) bit-for-bit.
    return clamp_unit(dot(a, b) / (na * nb));
}

double cosine_similarity(const RealVector& a, const RealVector& b, double epsilon) {
    return cosine_similarity(a.span(), b.span(), epsilon);
}

RealVector l2_normalize(const RealVector& v, double epsilon) {
    const double n = v.norm();
    if (n < epsilon) throw ZeroNormInput("cannot normalize a vector of norm " + std::to_string(n));
    std::vector<double> out(v.begin(), v.end());
    for (double& x : out) x /= n;
    return RealVector(std::move(out));
}

RealVector pool(std::span<const RealVector> vectors, PoolMode mode, double epsilon) {
    if (vectors.empty()) throw EmptyPool("pool over an empty list");
    const std::size_t dim = vectors.front().dim();
    for (const auto& v : vectors) require_same_dim(dim, v.dim());

    std::vector<double> weights(vectors.size(), 1.0);
    if (mode == PoolMode::NormWeightedMean) {
        for (std::size_t i = 0; i < vectors.size(); ++i) {
            const double n = vectors[i].norm();
            weights[i] = n < epsilon ? 0.0 : n;
        }
    }
    const double total = sorted_sum(weights);
    if (total < epsilon) throw ZeroNormInput("norm-weighted pool with all members zero-norm");

    // Each coordinate is summed in ascending value order, so the pooled vector
    // depends only on the multiset of members, not on their order.
    std::vector<double> out(dim, 0.0);
    std::vector<double> column(vectors.size());
    for (std::size_t d = 0; d < dim; ++d) {
        for (std::size_t i = 0; i < vectors.size(); ++i) column[i] = weights[i] * vectors[i][d];
        out[d] = sorted_sum(column) / total;
    }
    return RealVector(std::move(out));
}

}  // namespace rudder::numerics
