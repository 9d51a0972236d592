#include "rudder/taskgen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

#include "rudder/error.hpp"
#include "rudder/rng.hpp"

namespace rudder::taskgen {

using numerics::RealVector;

namespace {

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

// Orthonormal directions, all orthogonal to the all-ones vector so that
// LayerNorm's mean subtraction leaves them untouched.
std::vector<std::vector<double>> orthonormal_directions(int dim, int count, std::uint64_t seed) {
    const auto d = sz(dim);
    std::vector<std::vector<double>> basis;
    basis.emplace_back(d, 1.0 / std::sqrt(static_cast<double>(dim)));
    const CounterRng rng(seed, "taskgen.directions");
    std::uint64_t draw = 0;
    while (basis.size() < sz(count) + 1) {
        std::vector<double> v(d);
        for (auto& x : v) x = rng.normal(draw++);
        for (const auto& b : basis) {
            const double p = numerics::dot(v, b);
            for (std::size_t i = 0; i < d; ++i) v[i] -= p * b[i];
        }
        const double n = numerics::l2_norm(v);
        if (n < 1e-6) continue;  // numerically dependent draw; take another
        for (auto& x : v) x /= n;
        basis.push_back(std::move(v));
    }
    basis.erase(basis.begin());
    return basis;
}

void add_scaled(std::span<double> dst, std::span<const double> src, double scale) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
}

std::vector<TokenId> sorted_unique(std::vector<TokenId> v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    return v;
}

}  // namespace

void SceneParams::validate() const {
    if (vocab.n_objects < 1) throw InvalidConfig("task.n_objects must be >= 1");
    if (vocab.n_frequent < 0 || vocab.n_frequent > vocab.n_objects) {
        throw InvalidConfig("task.n_frequent must lie in [0, n_objects]");
    }
    if (objects_min < 1 || objects_min > objects_max) {
        throw InvalidConfig("task.objects_min must lie in [1, objects_max]");
    }
    if (objects_max > vocab.n_objects) throw InvalidConfig("task.objects_max exceeds n_objects");
}

std::vector<bool> ToyScene::scene_role_mask() const {
    std::vector<bool> mask(prompt_ids.size(), true);
    mask.front() = false;
    mask.back() = false;
    return mask;
}

ToyScene make_scene(const SceneParams& params, std::uint64_t seed) {
    params.validate();
    SplitMix64 rng(seed);
    const int span = params.objects_max - params.objects_min + 1;
    const int m = params.objects_min + static_cast<int>(rng.below(static_cast<std::uint64_t>(span)));

    std::vector<TokenId> pool(sz(params.vocab.n_objects));
    for (int i = 0; i < params.vocab.n_objects; ++i) pool[sz(i)] = params.vocab.object(i);
    for (int i = 0; i < m; ++i) {
        const auto j = sz(i) + rng.below(pool.size() - sz(i));
        std::swap(pool[sz(i)], pool[j]);
    }
    std::vector<TokenId> slots(sz(params.objects_max), TaskVocab::kBackground);
    std::copy(pool.begin(), pool.begin() + m, slots.begin());
    for (std::size_t i = slots.size() - 1; i > 0; --i) std::swap(slots[i], slots[rng.below(i + 1)]);

    ToyScene scene;
    scene.seed = seed;
    scene.present_objects = sorted_unique({pool.begin(), pool.begin() + m});
    scene.prompt_ids.push_back(TaskVocab::kBos);
    scene.prompt_ids.insert(scene.prompt_ids.end(), slots.begin(), slots.end());
    scene.prompt_ids.push_back(TaskVocab::kSep);
    return scene;
}

std::vector<ToyScene> make_scenes(const SceneParams& params, std::uint64_t base_seed, int n) {
    std::vector<ToyScene> scenes;
    scenes.reserve(sz(std::max(n, 0)));
    for (int i = 0; i < n; ++i) {
        scenes.push_back(make_scene(params, mix64(base_seed ^ mix64(static_cast<std::uint64_t>(i)))));
    }
    return scenes;
}

std::vector<TokenId> text_only_prompt(const ToyScene&) { return {TaskVocab::kBos, TaskVocab::kSep}; }

nlohmann::json to_json(const ToyScene& scene) {
    return nlohmann::json{{"seed", scene.seed},
                          {"present_objects", scene.present_objects},
                          {"prompt_ids", scene.prompt_ids}};
}

ToyScene scene_from_json(const nlohmann::json& j) {
    ToyScene s;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.present_objects = j.at("present_objects").get<std::vector<TokenId>>();
    s.prompt_ids = j.at("prompt_ids").get<std::vector<TokenId>>();
    return s;
}

const RealVector& CopyModel::direction_of(TokenId object) const {
    if (!scene.vocab.is_object(object)) throw InvalidArgument("token is not an object");
    return object_directions.at(sz(object - TaskVocab::kFirstObject));
}

CopyModel build_copy_model(const SceneParams& scene, const CopyModelParams& p) {
    scene.validate();
    const int n_obj = scene.vocab.n_objects;
    if (p.n_heads < 2 || p.d_model % p.n_heads != 0) {
        throw InvalidConfig("copy model needs n_heads >= 2 dividing d_model");
    }
    const int head_dim = p.d_model / p.n_heads;
    // Input side: one direction per object, objectness, prefix flag and seven
    // special tokens. Output side: evidence and mention directions per object
    // plus the text bias.
    const int needed = 3 * n_obj + 10;
    if (n_obj > head_dim || needed + 1 > p.d_model) {
        throw CapacityExceeded(std::to_string(n_obj) + " objects need head_dim >= " +
                               std::to_string(n_obj) + " and d_model >= " + std::to_string(needed + 1) +
                               " (have head_dim " + std::to_string(head_dim) + ", d_model " +
                               std::to_string(p.d_model) + ")");
    }
    if (p.max_seq_len < scene.prompt_len() + 1) throw InvalidConfig("max_seq_len shorter than a prompt");

    model::ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = p.d_model;
    cfg.n_heads = p.n_heads;
    cfg.d_ff = 4;
    cfg.vocab_size = scene.vocab.vocab_size();
    cfg.max_seq_len = p.max_seq_len;
    cfg.tied_embeddings = false;
    cfg.seed = p.seed;
    model::Model m(cfg);
    auto& w = m.mutable_weights();

    const auto dirs = orthonormal_directions(p.d_model, needed, p.seed);
    std::size_t next = 0;
    auto take = [&] { return dirs[next++]; };
    std::vector<std::vector<double>> z(sz(n_obj)), e(sz(n_obj)), mention(sz(n_obj));
    for (auto& v : z) v = take();
    const auto objectness = take();
    const auto prefix_flag = take();
    std::vector<std::vector<double>> special(sz(TaskVocab::kFirstObject));
    for (auto& v : special) v = take();
    for (auto& v : e) v = take();
    for (auto& v : mention) v = take();
    const auto text = take();

    const auto d = sz(p.d_model);
    const auto hd = sz(head_dim);
    auto row = [&](std::vector<double>& mat, std::size_t r, std::size_t cols) {
        return std::span<double>(mat.data() + r * cols, cols);
    };

    // Every token embedding has unit norm and every position embedding is
    // +/- the prefix flag, so each block-0 input has norm sqrt(2).
    for (TokenId t = 0; t < TaskVocab::kFirstObject; ++t) {
        add_scaled(row(w.tok_emb, sz(t), d), special[sz(t)], 1.0);
    }
    for (int i = 0; i < n_obj; ++i) {
        auto r = row(w.tok_emb, sz(scene.vocab.object(i)), d);
        add_scaled(r, z[sz(i)], 1.0 / std::sqrt(2.0));
        add_scaled(r, objectness, 1.0 / std::sqrt(2.0));
    }
    for (int pos = 0; pos < p.max_seq_len; ++pos) {
        const bool in_scene = pos >= 1 && pos <= scene.objects_max;
        add_scaled(row(w.pos_emb, sz(pos), d), prefix_flag, in_scene ? 1.0 : -1.0);
    }

    // Attention keys read objectness and the prefix flag. With a constant
    // query, head 0 scores scene objects 2, scene background 1, generated
    // objects 0 and special tokens -1; head 1 prefers generated objects.
    const double kappa0 = std::sqrt(static_cast<double>(p.d_model) / 2.0);
    const double root2 = std::sqrt(2.0);
    for (int layer = 0; layer < 2; ++layer) {
        auto& lw = w.layers[sz(layer)];
        // Layer-1 inputs carry attention outputs too, which shrink LayerNorm's
        // gain on the key features; compensate with a larger scale.
        const double sharp = p.attention_sharpness * (layer == 0 ? 1.0 : 10.0);
        const double key_scale = std::sqrt(static_cast<double>(head_dim)) * sharp / kappa0;
        const int n_copy_heads = layer == 0 ? 2 : 1;
        for (int head = 0; head < n_copy_heads; ++head) {
            const std::size_t base = sz(head) * hd;
            lw.bq[base] = 1.0;
            const double flag_sign = head == 0 ? 1.0 : -1.0;
            auto k = row(lw.wk, base, d);
            add_scaled(k, objectness, key_scale * root2);
            add_scaled(k, prefix_flag, key_scale * flag_sign);
            const bool suppress = layer == 0 && head == 1;
            double gain = p.suppression;
            if (!suppress) gain = layer == 0 ? p.evidence_early : p.evidence_late;
            for (int i = 0; i < n_obj; ++i) {
                add_scaled(row(lw.wv, base + sz(i), d), z[sz(i)], root2 / kappa0);
                const auto& out = suppress ? mention[sz(i)] : e[sz(i)];
                for (std::size_t r = 0; r < d; ++r) lw.wo[r * d + base + sz(i)] += gain * out[r];
            }
        }
        if (layer == 1) {
            // Scene positions look at BOS (zero value) instead of a partial
            // scene, so only post-scene positions carry object evidence.
            add_scaled(row(lw.wq, 1, d), prefix_flag, 1.0);
            add_scaled(row(lw.wk, 1, d), special[sz(TaskVocab::kBos)], 4.0 * key_scale);
            add_scaled(lw.bo, text, p.text_bias);
        }
    }

    // Output head: objects read their output direction; the caption-start
    // token reads the SEP input direction; other specials are suppressed.
    for (int i = 0; i < n_obj; ++i) {
        auto r = row(w.lm_head, sz(scene.vocab.object(i)), d);
        add_scaled(r, e[sz(i)], 1.0);
        add_scaled(r, mention[sz(i)], -1.0);
    }
    add_scaled(row(w.lm_head, sz(TaskVocab::kStart), d), special[sz(TaskVocab::kSep)], p.start_gain);
    for (TokenId t : {TaskVocab::kBos, TaskVocab::kSep, TaskVocab::kEos, TaskVocab::kNoise,
                      TaskVocab::kBackground}) {
        w.lm_bias[sz(t)] = -30.0;
    }
    w.lm_bias[sz(TaskVocab::kFiller)] = p.filler_bias;

    std::vector<RealVector> object_dirs;
    for (auto& v : e) object_dirs.emplace_back(v);
    return CopyModel{std::move(m), scene, p, std::move(object_dirs), RealVector(text)};
}

CopyModel build_biased_model(const CopyModel& copy, double prior_strength) {
    if (!(prior_strength >= 0.0) || !std::isfinite(prior_strength)) {
        throw InvalidArgument("prior_strength must be finite and >= 0");
    }
    CopyModel biased = copy;
    auto& bias = biased.model.mutable_weights().lm_bias;
    for (int i = 0; i < copy.scene.vocab.n_frequent; ++i) {
        bias[sz(copy.scene.vocab.object(i))] += prior_strength;
    }
    return biased;
}

CaptionJudgment judge_caption(std::span<const TokenId> generated, const ToyScene& scene,
                              const TaskVocab& vocab) {
    CaptionJudgment j;
    for (TokenId t : generated) {
        if (vocab.is_object(t)) j.mentioned.push_back(t);
    }
    j.mentioned = sorted_unique(std::move(j.mentioned));
    const auto present = sorted_unique(scene.present_objects);
    std::set_difference(j.mentioned.begin(), j.mentioned.end(), present.begin(), present.end(),
                        std::back_inserter(j.hallucinated));
    std::set_intersection(j.mentioned.begin(), j.mentioned.end(), present.begin(), present.end(),
                          std::back_inserter(j.recalled));
    j.n_present = static_cast<int>(present.size());
    return j;
}

EvalReport evaluate(std::span<const CaptionJudgment> judgments) {
    EvalReport r;
    r.n_captions = static_cast<int>(judgments.size());
    if (judgments.empty()) throw InvalidArgument("evaluate needs at least one caption");
    // Recall is accumulated as an exact fraction sum(recalled_i * L / present_i)
    // over n * L, L = lcm of the present counts, then rounded once.
    std::int64_t lcm = 1;
    for (const auto& j : judgments) {
        r.total_mentioned += static_cast<int>(j.mentioned.size());
        r.total_hallucinated += static_cast<int>(j.hallucinated.size());
        if (!j.hallucinated.empty()) ++r.captions_with_hallucination;
        if (j.n_present > 0) lcm = std::lcm(lcm, static_cast<std::int64_t>(j.n_present));
        if (lcm > (std::int64_t{1} << 40)) throw CapacityExceeded("recall denominator overflow");
    }
    std::int64_t numerator = 0;
    for (const auto& j : judgments) {
        if (j.n_present > 0) numerator += static_cast<std::int64_t>(j.recalled.size()) * (lcm / j.n_present);
    }
    r.chair_s = static_cast<double>(r.captions_with_hallucination) / r.n_captions;
    r.chair_i = r.total_mentioned > 0
                    ? static_cast<double>(r.total_hallucinated) / r.total_mentioned
                    : 0.0;
    const std::int64_t denominator = lcm * r.n_captions;
    const std::int64_t g = std::gcd(numerator, denominator);
    r.recall = numerator == 0 ? 0.0 : static_cast<double>(numerator / g) / static_cast<double>(denominator / g);
    r.judgments.assign(judgments.begin(), judgments.end());
    return r;
}

double recall_ratio(const EvalReport& steered, const EvalReport& vanilla) {
    if (vanilla.recall == 0.0) return steered.recall == 0.0 ? 1.0 : INFINITY;
    return steered.recall / vanilla.recall;
}

nlohmann::json to_json(const EvalReport& r, bool include_judgments) {
    nlohmann::json j{{"chair_s", r.chair_s},
                     {"chair_i", r.chair_i},
                     {"recall", r.recall},
                     {"n_captions", r.n_captions},
                     {"captions_with_hallucination", r.captions_with_hallucination},
                     {"total_mentioned", r.total_mentioned},
                     {"total_hallucinated", r.total_hallucinated}};
    j["recall_ratio"] = r.recall_ratio ? nlohmann::json(*r.recall_ratio) : nlohmann::json(nullptr);
    if (include_judgments) {
        auto& arr = j["judgments"] = nlohmann::json::array();
        for (const auto& c : r.judgments) {
            arr.push_back({{"mentioned", c.mentioned},
                           {"hallucinated", c.hallucinated},
                           {"recalled", c.recalled},
                           {"n_present", c.n_present}});
        }
    }
    return j;
}

std::vector<steer::GenerationResult> caption_scenes(const model::Model& model,
                                                    std::span<const ToyScene> scenes,
                                                    const steer::SteerConfig& steer,
                                                    const steer::DecodeStrategy& strategy,
                                                    int max_new_tokens, int threads) {
    std::vector<steer::GenerationResult> out(scenes.size());
    steer::GenerateOptions options;
    options.noise_token = TaskVocab::kNoise;
    auto run_one = [&](std::size_t i) {
        auto strat = strategy;
        if (strat.kind == steer::DecodeStrategy::Kind::Nucleus) {
            strat.seed = mix64(strategy.seed ^ scenes[i].seed);
        }
        out[i] = steer::generate(model, scenes[i].prompt_ids, steer, strat, max_new_tokens, options);
    };
    const auto workers = static_cast<std::size_t>(std::max(1, threads));
    if (workers == 1 || scenes.size() < 2) {
        for (std::size_t i = 0; i < scenes.size(); ++i) run_one(i);
        return out;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < scenes.size(); i += workers) run_one(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return out;
}

EvalReport evaluate_captions(std::span<const steer::GenerationResult> results,
                             std::span<const ToyScene> scenes, const TaskVocab& vocab) {
    if (results.size() != scenes.size()) throw InvalidArgument("one result per scene required");
    std::vector<CaptionJudgment> judgments;
    judgments.reserve(scenes.size());
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        judgments.push_back(judge_caption(results[i].tokens, scenes[i], vocab));
    }
    return evaluate(judgments);
}

}  // namespace rudder::taskgen
