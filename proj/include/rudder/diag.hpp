#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "rudder/card.hpp"
#include "rudder/model.hpp"
#include "rudder/steer.hpp"

namespace rudder::diag {

using numerics::RealVector;

struct LayerDynamics {
    int layer = 0;
    int n_tokens = 0;
    double mean_update_norm = 0.0;               // mean |Delta|
    std::optional<double> mean_relative_strength;  // mean |Delta| / |h_pre|
    /// Mean pairwise cosine over unordered pairs of nonzero updates; null
    /// when fewer than two nonzero updates exist.
    std::optional<double> coherence;
};

/// Mean cosine over all unordered pairs; null below two vectors. Zero-norm
/// vectors are dropped first.
std::optional<double> pairwise_coherence(std::span<const RealVector> vectors,
                                         double epsilon = numerics::kDefaultEpsilon);

/// One prefill per prompt with read hooks on every layer. Prompts fan out
/// over `threads` workers; reduction runs in prompt order.
std::vector<LayerDynamics> layer_dynamics(const model::Model& model,
                                          std::span<const std::vector<model::TokenId>> prompts,
                                          int threads = 1);

card::CardVector card_text_only(const model::Model& model, std::span<const model::TokenId> text_prompt,
                                int layer, numerics::PoolMode mode = numerics::PoolMode::Mean);

struct DirectionalEvidence {
    double delta_theta = 0.0;  // radians
    double alignment_gain = 0.0;
    std::optional<double> mean_gate;  // null when no gated tokens
};

/// Mean of the applied steering vectors over the answer span: each steered
/// token contributed steer_norm along the CARD direction.
RealVector mean_steering_vector(const steer::GenerationTrace& trace, const card::CardVector& card);

/// Mean g over answer-span records that carry a gate value.
std::optional<double> mean_gate(const steer::GenerationTrace& trace);

/// delta_theta = arccos<v_text, v_full>; alignment_gain = <v_full, u> -
/// <v_text, u> with u the unit direction of `v_steer` (0 when v_steer is 0).
/// Throws NonUnitDirection for non-unit CARD directions.
DirectionalEvidence directional_evidence(const card::CardVector& v_text, const card::CardVector& v_full,
                                         const RealVector& v_steer, std::optional<double> mean_gate);

struct AngleSummary {
    double mean_deg = 0.0;
    double median_deg = 0.0;
    double mean_gain = 0.0;
    double median_gain = 0.0;
};

AngleSummary summarize(std::span<const DirectionalEvidence> samples);

std::string to_csv(std::span<const LayerDynamics> rows);
nlohmann::json to_json(const DirectionalEvidence& e);
nlohmann::json to_json(const AngleSummary& s);

/// Minimal SVG bar chart of per-layer update norms and relative strengths.
std::string layer_dynamics_svg(std::span<const LayerDynamics> rows);

}  // namespace rudder::diag
