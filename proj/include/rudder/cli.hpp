#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rudder/model.hpp"
#include "rudder/steer.hpp"
#include "rudder/taskgen.hpp"

namespace rudder::cli {

enum ExitCode : int { kOk = 0, kConfigError = 2, kRuntimeError = 3, kThresholdFailure = 4 };

enum class ModelKind { ToyCopy, Random, Checkpoint };

struct ModelSpec {
    ModelKind kind = ModelKind::ToyCopy;
    taskgen::CopyModelParams copy;   // ToyCopy
    model::ModelConfig random;       // Random
    std::string checkpoint;          // Checkpoint
};

struct TaskSpec {
    int n_scenes = 200;
    int objects_min = 1;
    int objects_max = 4;
    int n_objects = 20;
    int n_frequent = 4;
    double prior_strength = 0.3;  // ToyCopy only
    int max_new_tokens = 4;
    int prompt_len = 16;          // random prompts for non-toy models
};

struct BenchSpec {
    int tokens_per_run = 256;
    int repeats = 5;
    int warmup = 2;
    int n_prompts = 2;
    int prompt_len = 32;
    bool use_bench_model = true;  // time the default bench model instead of `model`
};

struct DiagSpec {
    int n_prompts = 50;
    bool plot = false;
};

struct EvalSpec {
    double recall_floor = 0.95;
    double min_relative_reduction = 0.2;
};

struct RunConfig {
    std::uint64_t seed = 1234;
    ModelSpec model;
    TaskSpec task;
    steer::SteerConfig steer;
    steer::DecodeStrategy strategy;
    BenchSpec bench;
    DiagSpec diag;
    EvalSpec eval;
    std::string output_dir = "out";
};

/// Strict parse: unknown fields and wrong types raise ConfigError naming the
/// field path. Missing fields take their defaults.
RunConfig parse_config(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);

/// Canonical form with every field present.
nlohmann::json to_json(const RunConfig& config);

/// FNV-1a 64 of the canonical dump, as 16 hex digits.
std::string config_hash(const RunConfig& config);

/// Throws ConfigError when a field value is out of range.
void validate(const RunConfig& config);

std::vector<std::string> preset_names();
RunConfig preset(const std::string& name);

/// Worker cap: RUDDER_THREADS when set, else hardware concurrency.
int worker_count();

struct CommandOutcome {
    int exit_code = kOk;
    std::vector<std::filesystem::path> artifacts;
    std::string summary;
};

struct CommandOptions {
    std::filesystem::path out_dir;
    bool assert_thresholds = false;
};

CommandOutcome cmd_generate(const RunConfig& config, const CommandOptions& options);
CommandOutcome cmd_eval(const RunConfig& config, const CommandOptions& options);
CommandOutcome cmd_bench(const RunConfig& config, const CommandOptions& options);
CommandOutcome cmd_diag(const RunConfig& config, const CommandOptions& options);

}  // namespace rudder::cli
