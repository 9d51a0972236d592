#include "rudder/steer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "rudder/error.hpp"
#include "rudder/rng.hpp"
#include "rudder/version.hpp"

namespace rudder::steer {

using model::DecodeSlot;
using model::ForwardCounter;
using model::KVCache;
using model::Model;
using numerics::RealVector;

const char* to_string(SteerMode mode) {
    switch (mode) {
        case SteerMode::Off: return "off";
        case SteerMode::RudderBeta: return "rudder_beta";
        case SteerMode::RudderAdd: return "rudder_add";
        case SteerMode::ContrastiveTwoPass: return "contrastive";
    }
    return "?";
}

SteerMode steer_mode_from_string(std::string_view name) {
    if (name == "off") return SteerMode::Off;
    if (name == "rudder_beta") return SteerMode::RudderBeta;
    if (name == "rudder_add") return SteerMode::RudderAdd;
    if (name == "contrastive") return SteerMode::ContrastiveTwoPass;
    throw InvalidArgument("unknown steer mode '" + std::string(name) + "'");
}

const char* to_string(DecodeStrategy::Kind kind) {
    switch (kind) {
        case DecodeStrategy::Kind::Greedy: return "greedy";
        case DecodeStrategy::Kind::Beam: return "beam";
        case DecodeStrategy::Kind::Nucleus: return "nucleus";
    }
    return "?";
}

void SteerConfig::validate(const model::ModelConfig& model,
                           gate::GateConfig::Validation gate_mode) const {
    if (layer < 0 || layer >= model.n_layers) {
        throw InvalidConfig("steer.layer " + std::to_string(layer) + " outside [0, " +
                            std::to_string(model.n_layers) + ")");
    }
    gate.validate(gate_mode);
    if (!std::isfinite(contrastive_lambda)) throw InvalidConfig("contrastive_lambda must be finite");
}

void DecodeStrategy::validate() const {
    switch (kind) {
        case Kind::Greedy: break;
        case Kind::Beam:
            if (width < 1) throw InvalidConfig("beam width must be >= 1");
            break;
        case Kind::Nucleus:
            if (!(top_p > 0.0 && top_p <= 1.0)) throw InvalidConfig("top_p must lie in (0, 1]");
            if (!(temperature > 0.0) || !std::isfinite(temperature)) {
                throw InvalidConfig("temperature must be > 0");
            }
            break;
    }
}

RealVector inject(const RealVector& r, const RealVector& v) {
    if (r.dim() != v.dim()) {
        throw DimMismatch("residual dim " + std::to_string(r.dim()) + " vs steering dim " +
                          std::to_string(v.dim()));
    }
    std::vector<double> out(r.begin(), r.end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
    return RealVector(std::move(out));
}

std::vector<TokenId> perturb_prompt(std::span<const TokenId> prompt, TokenId noise_token) {
    std::vector<TokenId> out(prompt.begin(), prompt.end());
    for (std::size_t i = 1; i < out.size(); i += 2) out[i] = noise_token;
    return out;
}

namespace {

using Clock = std::chrono::steady_clock;

struct Hypothesis {
    std::vector<TokenId> tokens;
    double score = 0.0;
    KVCache main;
    std::optional<KVCache> contrast;
    std::vector<TokenRecord> records;
    std::vector<std::vector<double>> logits_hist;
    std::vector<std::int64_t> timing;
    std::vector<double> next_logits;
    bool finished = false;
};

std::vector<double> log_softmax(std::span<const double> logits) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    for (double x : logits) total += std::exp(x - mx);
    const double lse = mx + std::log(total);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

TokenId argmax(std::span<const double> logits) {
    // First maximum wins, so ties resolve to the lowest token id.
    return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

TokenId sample_nucleus(std::span<const double> logits, double top_p, double temperature,
                       SplitMix64& rng) {
    const std::size_t n = logits.size();
    std::vector<double> probs(n);
    double mx = -INFINITY;
    for (double x : logits) mx = std::max(mx, x / temperature);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        probs[i] = std::exp(logits[i] / temperature - mx);
        total += probs[i];
    }
    for (double& p : probs) p /= total;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
    double mass = 0.0;
    std::size_t keep = 0;
    while (keep < n) {
        mass += probs[order[keep]];
        ++keep;
        if (mass >= top_p) break;
    }
    const double u = rng.uniform() * mass;
    double acc = 0.0;
    for (std::size_t i = 0; i < keep; ++i) {
        acc += probs[order[i]];
        if (u < acc) return static_cast<TokenId>(order[i]);
    }
    return static_cast<TokenId>(order[keep - 1]);
}

/// Shared decoding loop for single-pass and two-pass generation.
class Decoder {
public:
    Decoder(const Model& model, const DecodeStrategy& strategy, int max_new_tokens,
            const GenerateOptions& options, double lambda)
        : model_(model), strategy_(strategy), max_new_(max_new_tokens), options_(options),
          lambda_(lambda), rng_(strategy.seed) {}

    GenerationResult run(std::span<const TokenId> prompt,
                         std::optional<std::span<const TokenId>> contrast_prompt,
                         const model::HookSet& prefill_hooks, const model::HookSet& decode_hooks,
                         std::vector<TokenRecord*>* slot_records,
                         const std::function<void()>& after_prefill) {
        GenerationResult result;
        ForwardCounter counter;

        Hypothesis root{{}, 0.0, model_.new_cache(), std::nullopt, {}, {}, {}, {}, false};
        root.next_logits = model_.prefill(prompt, root.main, counter, prefill_hooks);
        if (contrast_prompt) {
            root.contrast = model_.new_cache();
            auto aux = model_.prefill(*contrast_prompt, *root.contrast, counter);
            combine(root.next_logits, aux);
        }
        for (std::size_t i = 0; i < prompt.size(); ++i) {
            TokenRecord rec;
            rec.position = static_cast<int>(i);
            rec.token_id = prompt[i];
            root.records.push_back(rec);
        }
        if (after_prefill) after_prefill();

        std::vector<Hypothesis> live;
        live.push_back(std::move(root));
        std::vector<Hypothesis> done;
        const int prompt_len = static_cast<int>(prompt.size());
        int steps = 0;

        for (int t = 0; t < max_new_ && !live.empty(); ++t) {
            const auto start = Clock::now();
            live = select(std::move(live), done);
            if (live.empty()) break;

            std::vector<DecodeSlot> slots;
            slots.reserve(live.size());
            if (slot_records) slot_records->assign(live.size(), nullptr);
            for (std::size_t i = 0; i < live.size(); ++i) {
                auto& h = live[i];
                TokenRecord rec;
                rec.position = prompt_len + t;
                rec.token_id = h.tokens.back();
                rec.in_answer_span = true;
                h.records.push_back(rec);
                if (slot_records) (*slot_records)[i] = &h.records.back();
                slots.push_back({h.tokens.back(), &h.main, {}});
            }
            model_.decode_batch(slots, counter, decode_hooks);
            if (contrast_prompt) {
                std::vector<DecodeSlot> aux;
                aux.reserve(live.size());
                for (auto& h : live) aux.push_back({h.tokens.back(), &*h.contrast, {}});
                model_.decode_batch(aux, counter);
                for (std::size_t i = 0; i < live.size(); ++i) combine(slots[i].logits, aux[i].logits);
            }
            ++steps;
            const auto elapsed =
                std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - start).count();

            std::vector<Hypothesis> next;
            for (std::size_t i = 0; i < live.size(); ++i) {
                auto& h = live[i];
                h.next_logits = std::move(slots[i].logits);
                h.timing.push_back(elapsed);
                if (options_.stop_token && h.tokens.back() == *options_.stop_token) {
                    h.finished = true;
                    done.push_back(std::move(h));
                } else {
                    next.push_back(std::move(h));
                }
            }
            live = std::move(next);
        }

        for (auto& h : live) done.push_back(std::move(h));
        // Highest score wins; earlier entries win ties.
        std::size_t best = 0;
        for (std::size_t i = 1; i < done.size(); ++i) {
            if (done[i].score > done[best].score) best = i;
        }
        auto& winner = done[best];
        result.tokens = std::move(winner.tokens);
        result.trace.records = std::move(winner.records);
        result.trace.timing_ns = std::move(winner.timing);
        result.trace.logits = std::move(winner.logits_hist);
        result.trace.forward_counter = counter;
        result.trace.decode_steps = steps;
        return result;
    }

private:
    void combine(std::vector<double>& main, const std::vector<double>& aux) const {
        for (std::size_t i = 0; i < main.size(); ++i) main[i] -= lambda_ * aux[i];
    }

    void extend(Hypothesis& h, TokenId token, double score) const {
        if (options_.record_logits) h.logits_hist.push_back(h.next_logits);
        h.tokens.push_back(token);
        h.score = score;
    }

    std::vector<Hypothesis> select(std::vector<Hypothesis> live, std::vector<Hypothesis>& done) {
        switch (strategy_.kind) {
            case DecodeStrategy::Kind::Greedy:
                for (auto& h : live) extend(h, argmax(h.next_logits), h.score);
                return live;
            case DecodeStrategy::Kind::Nucleus:
                for (auto& h : live) {
                    extend(h, sample_nucleus(h.next_logits, strategy_.top_p, strategy_.temperature, rng_),
                           h.score);
                }
                return live;
            case DecodeStrategy::Kind::Beam: return select_beam(std::move(live), done);
        }
        return live;
    }

    std::vector<Hypothesis> select_beam(std::vector<Hypothesis> live, std::vector<Hypothesis>& done) {
        struct Candidate {
            std::size_t parent;
            TokenId token;
            double score;
        };
        const auto width = static_cast<std::size_t>(strategy_.width);
        std::vector<Candidate> candidates;
        for (std::size_t p = 0; p < live.size(); ++p) {
            const auto lp = log_softmax(live[p].next_logits);
            std::vector<TokenId> ids(lp.size());
            std::iota(ids.begin(), ids.end(), 0);
            const auto k = std::min(width, ids.size());
            std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(),
                              [&](TokenId a, TokenId b) {
                                  return lp[static_cast<std::size_t>(a)] > lp[static_cast<std::size_t>(b)] ||
                                         (lp[static_cast<std::size_t>(a)] == lp[static_cast<std::size_t>(b)] && a < b);
                              });
            for (std::size_t i = 0; i < k; ++i) {
                candidates.push_back({p, ids[i], live[p].score + lp[static_cast<std::size_t>(ids[i])]});
            }
        }
        std::stable_sort(candidates.begin(), candidates.end(),
                         [](const Candidate& a, const Candidate& b) { return a.score > b.score; });

        // A finished hypothesis that already beats every candidate ends the search.
        if (!done.empty()) {
            const double best_done =
                std::max_element(done.begin(), done.end(), [](const auto& a, const auto& b) {
                    return a.score < b.score;
                })->score;
            if (candidates.empty() || best_done >= candidates.front().score) return {};
        }

        std::vector<Hypothesis> next;
        for (std::size_t i = 0; i < candidates.size() && next.size() < width; ++i) {
            const auto& c = candidates[i];
            Hypothesis h = live[c.parent];  // copies the KV cache(s) and history
            extend(h, c.token, c.score);
            next.push_back(std::move(h));
        }
        return next;
    }

    const Model& model_;
    DecodeStrategy strategy_;
    int max_new_;
    GenerateOptions options_;
    double lambda_;
    SplitMix64 rng_;
};

void check_span(const Model& model, std::size_t prompt_len, int max_new_tokens) {
    if (prompt_len == 0) throw InvalidArgument("prompt must not be empty");
    if (max_new_tokens < 0) throw InvalidArgument("max_new_tokens must be >= 0");
    const auto need = prompt_len + static_cast<std::size_t>(max_new_tokens);
    if (need > static_cast<std::size_t>(model.config().max_seq_len)) {
        throw SpanExceedsContext("prompt (" + std::to_string(prompt_len) + ") + max_new_tokens (" +
                                 std::to_string(max_new_tokens) + ") exceeds max_seq_len " +
                                 std::to_string(model.config().max_seq_len));
    }
}

}  // namespace

GenerationResult generate(const Model& model, std::span<const TokenId> prompt,
                          const SteerConfig& steer, const DecodeStrategy& strategy,
                          int max_new_tokens, const GenerateOptions& options) {
    strategy.validate();
    if (steer.mode == SteerMode::ContrastiveTwoPass) {
        const auto perturbed = perturb_prompt(prompt, options.noise_token);
        return generate_contrastive(model, prompt, perturbed, steer.contrastive_lambda, strategy,
                                    max_new_tokens, options);
    }
    check_span(model, prompt.size(), max_new_tokens);

    const bool steering = steer.mode == SteerMode::RudderBeta || steer.mode == SteerMode::RudderAdd;
    model::HookSet prefill_hooks;
    model::HookSet decode_hooks;
    std::optional<card::CardCollector> collector;
    std::optional<card::CardVector> card_vec;
    std::optional<RealVector> fixed_vec;  // RudderAdd: the same vector every step
    std::vector<TokenRecord*> slot_records;
    const int prompt_len = static_cast<int>(prompt.size());

    if (steering) {
        steer.validate(model.config(), gate::GateConfig::Validation::AllowFlatGate);
        collector.emplace(steer.layer, options.pool_mask);
        collector->attach(prefill_hooks);

        decode_hooks.set_write(steer.layer, [&](const model::WriteContext& ctx, std::span<double> delta) {
            // Prompt positions are never steered.
            if (ctx.position < prompt_len || !card_vec) return false;
            TokenRecord& rec = *slot_records.at(static_cast<std::size_t>(ctx.slot));
            RealVector v = RealVector::zeros(delta.size());
            if (steer.mode == SteerMode::RudderBeta) {
                const double s = numerics::cosine_similarity(ctx.pre_attn_norm_out,
                                                             card_vec->direction.span());
                const auto g = gate::gate_value(s, steer.gate);
                rec.s = g.s;
                rec.alpha = g.alpha;
                rec.beta = g.beta;
                rec.g = g.g;
                v = gate::steering_strength(g, steer.gate, card_vec->direction);
            } else {
                rec.g = 1.0;
                if (!fixed_vec) fixed_vec = gate::scaled_direction(steer.gate.alpha_max, steer.gate, card_vec->direction);
                v = *fixed_vec;
            }
            rec.steer_norm = v.norm();
            std::copy(v.begin(), v.end(), delta.begin());
            return true;
        });
    }

    Decoder decoder(model, strategy, max_new_tokens, options, 0.0);
    auto result = decoder.run(prompt, std::nullopt, prefill_hooks, decode_hooks,
                              steering ? &slot_records : nullptr, [&] {
                                  if (collector) card_vec = collector->finish(steer.pool_mode);
                              });
    result.trace.card = card_vec;
    return result;
}

GenerationResult generate_contrastive(const Model& model, std::span<const TokenId> prompt,
                                      std::span<const TokenId> perturbed_prompt, double lambda,
                                      const DecodeStrategy& strategy, int max_new_tokens,
                                      const GenerateOptions& options) {
    strategy.validate();
    check_span(model, prompt.size(), max_new_tokens);
    check_span(model, perturbed_prompt.size(), max_new_tokens);
    Decoder decoder(model, strategy, max_new_tokens, options, lambda);
    return decoder.run(prompt, perturbed_prompt, {}, {}, nullptr, {});
}

nlohmann::json to_json(const TokenRecord& r) {
    auto opt = [](const std::optional<double>& v) -> nlohmann::json {
        return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
    };
    return nlohmann::json{{"position", r.position},   {"token_id", r.token_id},
                          {"s", opt(r.s)},             {"alpha", opt(r.alpha)},
                          {"beta", opt(r.beta)},       {"g", opt(r.g)},
                          {"steer_norm", r.steer_norm}, {"in_answer_span", r.in_answer_span}};
}

std::string trace_to_jsonl(const GenerationResult& result, const TraceHeader& header) {
    nlohmann::json head{{"type", "header"},
                        {"config_hash", header.config_hash},
                        {"seed", header.seed},
                        {"engine_version", kEngineVersion},
                        {"mode", to_string(header.mode)},
                        {"strategy", header.strategy},
                        {"tokens", result.tokens},
                        {"forward_counter",
                         {{"prefill_calls", result.trace.forward_counter.prefill_calls},
                          {"decode_calls", result.trace.forward_counter.decode_calls}}}};
    if (result.trace.card) {
        const auto& c = *result.trace.card;
        head["card"] = {{"layer", c.layer_index},
                        {"pool_mode", numerics::to_string(c.pool_mode)},
                        {"prefill_len", c.prefill_len}};
    } else {
        head["card"] = nullptr;
    }
    std::ostringstream os;
    os << head.dump() << '\n';
    for (const auto& r : result.trace.records) os << to_json(r).dump() << '\n';
    return os.str();
}

}  // namespace rudder::steer
