#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "rudder/card.hpp"
#include "rudder/gate.hpp"
#include "rudder/model.hpp"

namespace rudder::steer {

using model::TokenId;

enum class SteerMode { Off, RudderBeta, RudderAdd, ContrastiveTwoPass };

const char* to_string(SteerMode mode);
SteerMode steer_mode_from_string(std::string_view name);

struct SteerConfig {
    SteerMode mode = SteerMode::Off;
    int layer = 0;
    gate::GateConfig gate;
    numerics::PoolMode pool_mode = numerics::PoolMode::Mean;
    double contrastive_lambda = 1.0;

    void validate(const model::ModelConfig& model,
                  gate::GateConfig::Validation gate_mode = gate::GateConfig::Validation::Production) const;
};

struct DecodeStrategy {
    enum class Kind { Greedy, Beam, Nucleus };

    Kind kind = Kind::Greedy;
    int width = 5;
    double top_p = 0.9;
    double temperature = 1.0;
    std::uint64_t seed = 0;

    static DecodeStrategy greedy() { return {}; }
    static DecodeStrategy beam(int width = 5) { return {Kind::Beam, width, 0.9, 1.0, 0}; }
    static DecodeStrategy nucleus(double top_p = 0.9, double temperature = 1.0,
                                  std::uint64_t seed = 0) {
        return {Kind::Nucleus, 5, top_p, temperature, seed};
    }

    void validate() const;
};

const char* to_string(DecodeStrategy::Kind kind);

struct TokenRecord {
    int position = 0;
    TokenId token_id = 0;
    std::optional<double> s;
    std::optional<double> alpha;
    std::optional<double> beta;
    std::optional<double> g;
    double steer_norm = 0.0;
    bool in_answer_span = false;
};

struct GenerationTrace {
    /// Prompt positions first (never steered), then one record per generated
    /// token at the position where that token was fed back.
    std::vector<TokenRecord> records;
    model::ForwardCounter forward_counter;
    std::optional<card::CardVector> card;
    /// Decode forward invocations (batched across beams).
    int decode_steps = 0;
    /// Wall-clock nanoseconds per generated token. Never serialized with the
    /// trace body; timing goes to sidecar logs only.
    std::vector<std::int64_t> timing_ns;
    /// Logits used to select each generated token (when requested).
    std::vector<std::vector<double>> logits;
};

struct GenerationResult {
    std::vector<TokenId> tokens;
    GenerationTrace trace;
};

struct GenerateOptions {
    /// Generation stops after this token has been emitted and fed.
    std::optional<TokenId> stop_token;
    bool record_logits = false;
    /// Restrict CARD pooling to prompt positions marked true.
    std::optional<std::vector<bool>> pool_mask;
    /// Replacement token for the contrastive baseline's perturbed prompt.
    TokenId noise_token = 0;
};

/// r + v. The steering hook applies exactly this to the post-attention residual.
numerics::RealVector inject(const numerics::RealVector& r, const numerics::RealVector& v);

/// Single-pass generation: one prefill (extracting the CARD vector when
/// steering), then one decode forward per generated token. Every generated
/// token is fed back, so T tokens cost exactly (1 prefill, T decodes).
GenerationResult generate(const model::Model& model, std::span<const TokenId> prompt,
                          const SteerConfig& steer, const DecodeStrategy& strategy,
                          int max_new_tokens, const GenerateOptions& options = {});

/// Two-context contrastive baseline: logits_main - lambda * logits_perturbed.
GenerationResult generate_contrastive(const model::Model& model, std::span<const TokenId> prompt,
                                      std::span<const TokenId> perturbed_prompt, double lambda,
                                      const DecodeStrategy& strategy, int max_new_tokens,
                                      const GenerateOptions& options = {});

/// Replaces every other prompt token (odd indices) with `noise_token`.
std::vector<TokenId> perturb_prompt(std::span<const TokenId> prompt, TokenId noise_token);

struct TraceHeader {
    std::string config_hash;
    std::uint64_t seed = 0;
    SteerMode mode = SteerMode::Off;
    std::string strategy;
};

nlohmann::json to_json(const TokenRecord& record);

/// Header line followed by one JSON record per token. Timing is excluded.
std::string trace_to_jsonl(const GenerationResult& result, const TraceHeader& header);

}  // namespace rudder::steer
