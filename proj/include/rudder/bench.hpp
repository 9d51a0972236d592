#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "rudder/model.hpp"
#include "rudder/steer.hpp"

namespace rudder::bench {

struct BenchConfig {
    int tokens_per_run = 256;
    int repeats = 5;
    int warmup = 2;
    /// Measurement workers. Anything but 1 is refused.
    int workers = 1;
    std::uint64_t seed = 0;

    void validate() const;
};

struct BenchResult {
    steer::SteerMode mode = steer::SteerMode::Off;
    double ms_per_token = 0.0;  // median over repeats
    double tokens_per_second = 0.0;
    int n_tokens = 0;           // generated tokens per repeat
    int n_warmup = 0;
    int repeats = 0;
    std::int64_t wall_clock_total_ns = 0;  // all timed repeats
    double relative_throughput_vs_vanilla = 0.0;
    std::vector<double> repeat_ms_per_token;
    model::ForwardCounter forward_counter;  // one repeat
    /// Tokens of every timed run equal the untimed reference run.
    bool outputs_consistent = true;
    std::vector<std::vector<model::TokenId>> reference_tokens;
};

/// Default desk-scale model for timing: large enough that a forward pass
/// dominates the per-token bookkeeping.
model::ModelConfig default_bench_model_config(std::uint64_t seed = 0);

/// Seeded random prompts over the model vocabulary.
std::vector<std::vector<model::TokenId>> make_prompts(const model::ModelConfig& config, int n_prompts,
                                                      int prompt_len, std::uint64_t seed);

/// Times every steer configuration on the same prompts and strategy. An Off
/// run is added first when absent; relative throughput is measured against
/// it. Throws InsufficientTokens below 64 tokens per run.
std::vector<BenchResult> run_bench(const model::Model& model,
                                   std::span<const std::vector<model::TokenId>> prompts,
                                   std::span<const steer::SteerConfig> configs,
                                   const steer::DecodeStrategy& strategy, const BenchConfig& config);

/// Timing table: mode, ms_per_token, tokens_per_second, relative_throughput,
/// repeats, seed, config_hash.
std::string to_csv(std::span<const BenchResult> results, std::uint64_t seed, const std::string& config_hash);

/// Everything about a bench run except timing.
nlohmann::json deterministic_summary(std::span<const BenchResult> results);

}  // namespace rudder::bench
