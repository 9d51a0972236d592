#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "rudder/model.hpp"
#include "rudder/numerics.hpp"
#include "rudder/steer.hpp"

namespace rudder::taskgen {

using model::TokenId;

/// Token layout of the toy captioning task: seven special tokens followed by
/// the object vocabulary. The first `n_frequent` objects form the
/// "frequent" subset a biased model over-predicts.
struct TaskVocab {
    static constexpr TokenId kBos = 0;
    static constexpr TokenId kSep = 1;         // fixed query token ("describe")
    static constexpr TokenId kStart = 2;       // caption start marker
    static constexpr TokenId kEos = 3;
    static constexpr TokenId kNoise = 4;       // contrastive perturbation token
    static constexpr TokenId kBackground = 5;  // empty scene slot
    static constexpr TokenId kFiller = 6;      // non-object caption word
    static constexpr TokenId kFirstObject = 7;

    int n_objects = 20;
    int n_frequent = 4;

    int vocab_size() const { return kFirstObject + n_objects; }
    TokenId object(int index) const { return kFirstObject + index; }
    bool is_object(TokenId t) const { return t >= kFirstObject && t < vocab_size(); }
    bool is_frequent(TokenId t) const { return is_object(t) && t < kFirstObject + n_frequent; }

    friend bool operator==(const TaskVocab&, const TaskVocab&) = default;
};

struct SceneParams {
    TaskVocab vocab;
    int objects_min = 1;
    int objects_max = 4;  // also the fixed number of scene slots

    void validate() const;
    /// BOS + scene slots + SEP.
    int prompt_len() const { return objects_max + 2; }
};

struct ToyScene {
    std::uint64_t seed = 0;
    std::vector<TokenId> present_objects;  // sorted, distinct
    std::vector<TokenId> prompt_ids;

    /// true for scene-slot positions of the prompt.
    std::vector<bool> scene_role_mask() const;

    friend bool operator==(const ToyScene&, const ToyScene&) = default;
};

ToyScene make_scene(const SceneParams& params, std::uint64_t seed);
std::vector<ToyScene> make_scenes(const SceneParams& params, std::uint64_t base_seed, int n);

/// The prompt with its scene prefix removed: [BOS, SEP].
std::vector<TokenId> text_only_prompt(const ToyScene& scene);

nlohmann::json to_json(const ToyScene& scene);
ToyScene scene_from_json(const nlohmann::json& j);

struct CopyModelParams {
    int d_model = 96;
    int n_heads = 2;
    int max_seq_len = 64;
    std::uint64_t seed = 0;
    double evidence_early = 0.0;   // layer-0 copy head gain
    double evidence_late = 4.0;    // layer-1 copy head gain (the CARD source)
    double suppression = 12.0;     // layer-0 already-mentioned suppression gain
    double text_bias = 0.2;        // constant layer-1 attention output
    double start_gain = 20.0;      // drives the caption-start token after SEP
    double filler_bias = 0.05;
    double attention_sharpness = 40.0;

    friend bool operator==(const CopyModelParams&, const CopyModelParams&) = default;
};

/// Hand-built two-layer model. Layer 0 marks objects already generated along
/// separate mention directions (and optionally copies scene evidence);
/// layer 1 copies the mean of the scene's objects into every later position,
/// so the layer-1 attention updates point along the mean of the present
/// objects' evidence directions. An object's unembedding row is its
/// evidence direction minus its mention direction.
struct CopyModel {
    model::Model model;
    SceneParams scene;
    CopyModelParams params;
    /// Unit evidence direction of each object.
    std::vector<numerics::RealVector> object_directions;
    numerics::RealVector text_direction;

    int card_layer() const { return 1; }
    const numerics::RealVector& direction_of(TokenId object) const;
};

/// Throws CapacityExceeded when the object vocabulary does not fit.
CopyModel build_copy_model(const SceneParams& scene, const CopyModelParams& params = {});

/// Adds `prior_strength` to the unembedding bias of every frequent object.
CopyModel build_biased_model(const CopyModel& copy, double prior_strength);

struct CaptionJudgment {
    std::vector<TokenId> mentioned;     // sorted sets
    std::vector<TokenId> hallucinated;
    std::vector<TokenId> recalled;
    int n_present = 0;
};

/// Object tokens in the caption are their own mentions; duplicates collapse.
CaptionJudgment judge_caption(std::span<const TokenId> generated, const ToyScene& scene,
                              const TaskVocab& vocab);

struct EvalReport {
    double chair_s = 0.0;
    double chair_i = 0.0;
    double recall = 0.0;  // mean over captions of |recalled| / |present|
    int n_captions = 0;
    int captions_with_hallucination = 0;
    int total_mentioned = 0;
    int total_hallucinated = 0;
    std::optional<double> recall_ratio;  // vs a paired vanilla run
    std::vector<CaptionJudgment> judgments;
};

EvalReport evaluate(std::span<const CaptionJudgment> judgments);

/// steered.recall / vanilla.recall; 1 when both are zero.
double recall_ratio(const EvalReport& steered, const EvalReport& vanilla);

nlohmann::json to_json(const EvalReport& report, bool include_judgments = true);

/// Captions every scene. Work fans out over up to `threads` workers; results
/// are stored by scene index so the output is independent of scheduling.
/// Nucleus runs use a per-scene seed mixed from the strategy and scene seeds.
std::vector<steer::GenerationResult> caption_scenes(const model::Model& model,
                                                    std::span<const ToyScene> scenes,
                                                    const steer::SteerConfig& steer,
                                                    const steer::DecodeStrategy& strategy,
                                                    int max_new_tokens, int threads = 1);

EvalReport evaluate_captions(std::span<const steer::GenerationResult> results,
                             std::span<const ToyScene> scenes, const TaskVocab& vocab);

}  // namespace rudder::taskgen
