#pragma once

#include <optional>

#include "rudder/numerics.hpp"

namespace rudder::gate {

/// Beta-gate hyperparameters. Defaults follow the published setting
/// (c = 1, output clamped to [0, 1], no per-token norm cap).
struct GateConfig {
    double k = 5.0;
    double c = 1.0;
    double g_min = 0.0;
    double g_max = 1.0;
    double alpha_max = 20.0;
    std::optional<double> tau;

    enum class Validation { Production, AllowFlatGate };

    /// k == 0 is accepted only under AllowFlatGate (test fixtures).
    void validate(Validation mode = Validation::Production) const;

    friend bool operator==(const GateConfig&, const GateConfig&) = default;
};

struct GateOutput {
    double s;      // alignment score after clipping to [-1, 1]
    double alpha;  // softplus(k s + c)
    double beta;   // softplus(-k s + c)
    double g_raw;  // alpha / (alpha + beta)
    double g;      // g_raw clamped to [g_min, g_max]
};

/// Posterior-mean gate for one token.
GateOutput gate_value(double s, const GateConfig& cfg);

/// d g_raw / d s at s = 0:  k sigmoid(c) / (2 softplus(c)).
double gate_slope_at_zero(const GateConfig& cfg);

/// Scales `strength` along a unit `direction`, then applies the optional
/// per-token norm cap. Throws NonUnitDirection if |direction| deviates from 1
/// by more than 1e-6.
numerics::RealVector scaled_direction(double strength, const GateConfig& cfg,
                                      const numerics::RealVector& direction);

/// v = (alpha_max * g) * direction, capped at tau when configured.
numerics::RealVector steering_strength(const GateOutput& g, const GateConfig& cfg,
                                       const numerics::RealVector& direction);

}  // namespace rudder::gate
