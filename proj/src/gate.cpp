#include "rudder/gate.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "rudder/error.hpp"

namespace rudder::gate {

using numerics::RealVector;

void GateConfig::validate(Validation mode) const {
    auto require = [](bool ok, const std::string& msg) {
        if (!ok) throw InvalidConfig("gate: " + msg);
    };
    require(std::isfinite(k) && std::isfinite(c) && std::isfinite(alpha_max), "non-finite parameter");
    if (mode == Validation::AllowFlatGate) {
        require(k >= 0.0, "k must be >= 0");
    } else {
        require(k > 0.0, "k must be > 0");
    }
    require(g_min >= 0.0 && g_min <= 1.0, "g_min must lie in [0, 1]");
    require(g_max >= 0.0 && g_max <= 1.0, "g_max must lie in [0, 1]");
    require(g_min <= g_max, "g_min must not exceed g_max");
    require(alpha_max >= 0.0, "alpha_max must be >= 0");
    if (tau) require(std::isfinite(*tau) && *tau > 0.0, "tau must be > 0 when set");
}

GateOutput gate_value(double s, const GateConfig& cfg) {
    if (!std::isfinite(s)) throw InvalidArgument("alignment score must be finite");
    GateOutput out{};
    out.s = numerics::clamp_unit(s);
    out.alpha = numerics::softplus(cfg.k * out.s + cfg.c);
    out.beta = numerics::softplus(-cfg.k * out.s + cfg.c);
    out.g_raw = out.alpha / (out.alpha + out.beta);
    out.g = std::clamp(out.g_raw, cfg.g_min, cfg.g_max);
    return out;
}

double gate_slope_at_zero(const GateConfig& cfg) {
    return cfg.k * numerics::sigmoid(cfg.c) / (2.0 * numerics::softplus(cfg.c));
}

RealVector scaled_direction(double strength, const GateConfig& cfg, const RealVector& direction) {
    const double n = direction.norm();
    if (std::abs(n - 1.0) > 1e-6) {
        throw NonUnitDirection("steering direction has norm " + std::to_string(n));
    }
    double scale = strength;
    if (cfg.tau && std::abs(strength) * n > *cfg.tau) scale = std::copysign(*cfg.tau / n, strength);
    std::vector<double> v(direction.begin(), direction.end());
    for (double& x : v) x *= scale;
    return RealVector(std::move(v));
}

RealVector steering_strength(const GateOutput& g, const GateConfig& cfg, const RealVector& direction) {
    return scaled_direction(cfg.alpha_max * g.g, cfg, direction);
}

}  // namespace rudder::gate
