#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "rudder/card.hpp"
#include "rudder/error.hpp"
#include "rudder/gate.hpp"
#include "rudder/steer.hpp"
#include "rudder/taskgen.hpp"

using namespace rudder;
using namespace rudder::steer;
using numerics::RealVector;

namespace {

model::Model random_model(std::uint64_t seed = 21) {
    model::ModelConfig c;
    c.n_layers = 3;
    c.d_model = 24;
    c.n_heads = 4;
    c.d_ff = 48;
    c.vocab_size = 50;
    c.max_seq_len = 48;
    c.seed = seed;
    auto m = model::Model::init(c);
    // Sharper logits so decoding strategies produce distinct outputs.
    for (double& x : m.mutable_weights().tok_emb) x *= 50.0;
    return m;
}

const std::vector<model::TokenId> kPrompt{3, 17, 22, 8, 41, 5, 9, 30};

SteerConfig steer_cfg(SteerMode mode, double alpha_max = 20.0, int layer = 1) {
    SteerConfig s;
    s.mode = mode;
    s.layer = layer;
    s.gate.alpha_max = alpha_max;
    return s;
}

GenerateOptions with_logits() {
    GenerateOptions o;
    o.record_logits = true;
    return o;
}

}  // namespace

TEST(Inject, Examples) {
    RealVector r({1.0, -2.0, 0.5});
    RealVector v({0.25, 3.0, -7.0});
    EXPECT_EQ(inject(r, RealVector::zeros(3)), r);
    auto back = inject(inject(r, v), RealVector({-0.25, -3.0, 7.0}));
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(back[i], r[i], 1e-12);
    auto moved = inject(r, v);
    std::vector<double> diff(3);
    for (std::size_t i = 0; i < 3; ++i) diff[i] = moved[i] - r[i];
    EXPECT_NEAR(RealVector(diff).norm(), v.norm(), 1e-9);
    EXPECT_THROW(inject(r, RealVector({1.0})), DimMismatch);
}

TEST(Generate, ZeroAlphaMatchesOff) {
    auto m = random_model();
    auto off = generate(m, kPrompt, steer_cfg(SteerMode::Off), DecodeStrategy::greedy(), 10, with_logits());
    auto zero = generate(m, kPrompt, steer_cfg(SteerMode::RudderBeta, 0.0), DecodeStrategy::greedy(), 10,
                         with_logits());
    EXPECT_EQ(off.tokens, zero.tokens);
    EXPECT_EQ(off.trace.logits, zero.trace.logits);
    auto zero_add = generate(m, kPrompt, steer_cfg(SteerMode::RudderAdd, 0.0), DecodeStrategy::greedy(), 10,
                             with_logits());
    EXPECT_EQ(off.trace.logits, zero_add.trace.logits);
}

TEST(Generate, SinglePassCounters) {
    auto m = random_model();
    for (auto mode : {SteerMode::Off, SteerMode::RudderBeta, SteerMode::RudderAdd}) {
        for (auto strat : {DecodeStrategy::greedy(), DecodeStrategy::nucleus(0.9, 1.0, 4), DecodeStrategy::beam(3)}) {
            auto r = generate(m, kPrompt, steer_cfg(mode), strat, 12);
            ASSERT_EQ(r.tokens.size(), 12u);
            EXPECT_EQ(r.trace.forward_counter.prefill_calls, 1u);
            EXPECT_EQ(r.trace.forward_counter.decode_calls, 12u);
        }
    }
}

TEST(Generate, SteeringChangesOutput) {
    auto m = random_model();
    auto off = generate(m, kPrompt, steer_cfg(SteerMode::Off), DecodeStrategy::greedy(), 10, with_logits());
    auto on = generate(m, kPrompt, steer_cfg(SteerMode::RudderAdd, 20.0), DecodeStrategy::greedy(), 10,
                       with_logits());
    EXPECT_NE(off.trace.logits, on.trace.logits);
}

TEST(Generate, AnswerSpanAndGateTrace) {
    auto m = random_model();
    for (auto mode : {SteerMode::RudderBeta, SteerMode::RudderAdd}) {
        for (std::optional<double> tau : {std::optional<double>{}, std::optional<double>{6.0}}) {
            auto cfg = steer_cfg(mode, 20.0);
            cfg.gate.tau = tau;
            auto r = generate(m, kPrompt, cfg, DecodeStrategy::greedy(), 8);
            ASSERT_EQ(r.trace.records.size(), kPrompt.size() + 8);
            for (const auto& rec : r.trace.records) {
                if (!rec.in_answer_span) {
                    EXPECT_LT(rec.position, static_cast<int>(kPrompt.size()));
                    EXPECT_EQ(rec.steer_norm, 0.0);
                    continue;
                }
                EXPECT_GE(rec.position, static_cast<int>(kPrompt.size()));
                ASSERT_TRUE(rec.g.has_value());
                double expected = mode == SteerMode::RudderAdd ? 20.0 : 20.0 * *rec.g;
                if (tau) expected = std::min(expected, *tau);
                EXPECT_NEAR(rec.steer_norm, expected, 1e-9);
                if (mode == SteerMode::RudderBeta) {
                    ASSERT_TRUE(rec.s && rec.alpha && rec.beta);
                    const auto g = gate::gate_value(*rec.s, cfg.gate);
                    EXPECT_EQ(*rec.alpha, g.alpha);
                    EXPECT_EQ(*rec.beta, g.beta);
                    EXPECT_EQ(*rec.g, g.g);
                }
            }
        }
    }
}

TEST(Generate, AlignmentUsesSameLayerPreNorm) {
    auto m = random_model();
    auto cfg = steer_cfg(SteerMode::RudderBeta, 20.0, 2);
    auto r = generate(m, kPrompt, cfg, DecodeStrategy::greedy(), 4);
    ASSERT_TRUE(r.trace.card);
    const auto card = *r.trace.card;
    EXPECT_EQ(card.layer_index, 2);

    // Replay the same tokens with a read hook at layer 2 and the same steering.
    model::HookSet hooks;
    std::vector<double> scores;
    hooks.add_read({2, model::HookSite::PreAttnLayerNormOut}, [&](const model::HookEvent& e) {
        if (e.position >= static_cast<int>(kPrompt.size())) {
            scores.push_back(numerics::cosine_similarity(e.values, card.direction.span()));
        }
    });
    hooks.set_write(2, [&](const model::WriteContext& ctx, std::span<double> delta) {
        if (ctx.position < static_cast<int>(kPrompt.size())) return false;
        const double s = numerics::cosine_similarity(ctx.pre_attn_norm_out, card.direction.span());
        const auto v = gate::steering_strength(gate::gate_value(s, cfg.gate), cfg.gate, card.direction);
        for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = v[i];
        return true;
    });
    auto cache = m.new_cache();
    model::ForwardCounter counter;
    m.prefill(kPrompt, cache, counter, hooks);
    for (auto t : r.tokens) m.decode_step(t, cache, counter, hooks);
    const auto gen = r.trace.records.begin() + static_cast<long>(kPrompt.size());
    ASSERT_EQ(scores.size(), r.tokens.size());
    for (std::size_t i = 0; i < scores.size(); ++i) EXPECT_NEAR(*(gen + static_cast<long>(i))->s, scores[i], 1e-12);
}

TEST(Generate, SpanExceedsContext) {
    auto m = random_model();
    EXPECT_THROW(generate(m, kPrompt, steer_cfg(SteerMode::Off), DecodeStrategy::greedy(), 41),
                 SpanExceedsContext);
    EXPECT_NO_THROW(generate(m, kPrompt, steer_cfg(SteerMode::Off), DecodeStrategy::greedy(), 40));
}

TEST(Generate, InvalidLayer) {
    auto m = random_model();
    EXPECT_THROW(generate(m, kPrompt, steer_cfg(SteerMode::RudderBeta, 20.0, 3), DecodeStrategy::greedy(), 4),
                 InvalidConfig);
}

TEST(Generate, DegenerateDirectionPropagates) {
    model::ModelConfig c;
    c.n_layers = 1;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_ff = 8;
    c.vocab_size = 10;
    c.max_seq_len = 16;
    model::Model zero(c);  // all-zero projections: every attention update is zero
    std::vector<model::TokenId> prompt{1, 2, 3};
    EXPECT_THROW(generate(zero, prompt, steer_cfg(SteerMode::RudderBeta, 20.0, 0), DecodeStrategy::greedy(), 2),
                 DegenerateDirection);
}

TEST(Generate, StopToken) {
    auto m = random_model();
    auto full = generate(m, kPrompt, steer_cfg(SteerMode::Off), DecodeStrategy::greedy(), 10);
    GenerateOptions o;
    o.stop_token = full.tokens[3];
    auto stopped = generate(m, kPrompt, steer_cfg(SteerMode::Off), DecodeStrategy::greedy(), 10, o);
    auto first = std::find(full.tokens.begin(), full.tokens.end(), full.tokens[3]) - full.tokens.begin();
    EXPECT_EQ(stopped.tokens.size(), static_cast<std::size_t>(first + 1));
    EXPECT_EQ(stopped.trace.forward_counter.decode_calls, stopped.tokens.size());
}

TEST(Strategies, BeamWidthOneIsGreedy) {
    auto m = random_model();
    for (auto mode : {SteerMode::Off, SteerMode::RudderBeta}) {
        auto g = generate(m, kPrompt, steer_cfg(mode), DecodeStrategy::greedy(), 12);
        auto b = generate(m, kPrompt, steer_cfg(mode), DecodeStrategy::beam(1), 12);
        EXPECT_EQ(g.tokens, b.tokens);
    }
}

TEST(Strategies, ColdNucleusIsGreedy) {
    auto m = random_model();
    auto g = generate(m, kPrompt, steer_cfg(SteerMode::RudderBeta), DecodeStrategy::greedy(), 12);
    auto n = generate(m, kPrompt, steer_cfg(SteerMode::RudderBeta), DecodeStrategy::nucleus(1.0, 1e-6, 99), 12);
    EXPECT_EQ(g.tokens, n.tokens);
}

TEST(Strategies, NucleusSeeded) {
    auto m = random_model();
    auto a = generate(m, kPrompt, steer_cfg(SteerMode::RudderBeta), DecodeStrategy::nucleus(0.9, 1.0, 5), 16);
    auto b = generate(m, kPrompt, steer_cfg(SteerMode::RudderBeta), DecodeStrategy::nucleus(0.9, 1.0, 5), 16);
    EXPECT_EQ(a.tokens, b.tokens);
    EXPECT_EQ(trace_to_jsonl(a, {}), trace_to_jsonl(b, {}));
}

TEST(Strategies, BeamIsDeterministicAndScoresAtLeastGreedy) {
    auto m = random_model();
    auto b1 = generate(m, kPrompt, steer_cfg(SteerMode::Off), DecodeStrategy::beam(5), 10);
    auto b2 = generate(m, kPrompt, steer_cfg(SteerMode::Off), DecodeStrategy::beam(5), 10);
    EXPECT_EQ(b1.tokens, b2.tokens);
    auto score = [&](const std::vector<model::TokenId>& toks) {
        auto cache = m.new_cache();
        model::ForwardCounter c;
        auto logits = m.prefill(kPrompt, cache, c);
        double total = 0.0;
        for (auto t : toks) {
            const double mx = *std::max_element(logits.begin(), logits.end());
            double z = 0.0;
            for (double x : logits) z += std::exp(x - mx);
            total += logits[static_cast<std::size_t>(t)] - mx - std::log(z);
            logits = m.decode_step(t, cache, c);
        }
        return total;
    };
    auto g = generate(m, kPrompt, steer_cfg(SteerMode::Off), DecodeStrategy::greedy(), 10);
    EXPECT_GE(score(b1.tokens), score(g.tokens) - 1e-9);
}

TEST(Strategies, Validation) {
    EXPECT_THROW(DecodeStrategy::beam(0).validate(), InvalidConfig);
    EXPECT_THROW(DecodeStrategy::nucleus(0.0).validate(), InvalidConfig);
    EXPECT_THROW(DecodeStrategy::nucleus(1.5).validate(), InvalidConfig);
    EXPECT_THROW(DecodeStrategy::nucleus(0.9, 0.0).validate(), InvalidConfig);
    EXPECT_NO_THROW(DecodeStrategy::nucleus(1.0, 1e-6).validate());
}

TEST(Contrastive, LambdaZeroIsVanilla) {
    auto m = random_model();
    auto perturbed = perturb_prompt(kPrompt, 0);
    for (auto strat : {DecodeStrategy::greedy(), DecodeStrategy::beam(3)}) {
        auto vanilla = generate(m, kPrompt, steer_cfg(SteerMode::Off), strat, 10);
        auto c = generate_contrastive(m, kPrompt, perturbed, 0.0, strat, 10);
        EXPECT_EQ(vanilla.tokens, c.tokens);
    }
}

TEST(Contrastive, DoubleForwards) {
    auto m = random_model();
    auto c = generate_contrastive(m, kPrompt, perturb_prompt(kPrompt, 0), 1.0, DecodeStrategy::greedy(), 9);
    EXPECT_EQ(c.trace.forward_counter.prefill_calls, 2u);
    EXPECT_EQ(c.trace.forward_counter.decode_calls, 18u);
    auto cfg = steer_cfg(SteerMode::ContrastiveTwoPass);
    auto via_generate = generate(m, kPrompt, cfg, DecodeStrategy::greedy(), 9);
    EXPECT_EQ(via_generate.trace.forward_counter.decode_calls, 18u);
}

TEST(Contrastive, PerturbPrompt) {
    std::vector<model::TokenId> p{10, 11, 12, 13, 14};
    EXPECT_EQ(perturb_prompt(p, 4), (std::vector<model::TokenId>{10, 4, 12, 4, 14}));
}

TEST(Steer, ModeNames) {
    for (auto m : {SteerMode::Off, SteerMode::RudderBeta, SteerMode::RudderAdd, SteerMode::ContrastiveTwoPass}) {
        EXPECT_EQ(steer_mode_from_string(to_string(m)), m);
    }
    EXPECT_THROW(steer_mode_from_string("vista"), InvalidArgument);
}

TEST(Trace, JsonlExcludesTiming) {
    auto m = random_model();
    auto r = generate(m, kPrompt, steer_cfg(SteerMode::RudderBeta), DecodeStrategy::greedy(), 5);
    EXPECT_EQ(r.trace.timing_ns.size(), 5u);
    auto text = trace_to_jsonl(r, {"abc", 7, SteerMode::RudderBeta, "greedy"});
    EXPECT_EQ(text.find("timing"), std::string::npos);
    std::size_t lines = std::count(text.begin(), text.end(), '\n');
    EXPECT_EQ(lines, 1 + r.trace.records.size());
    auto header = nlohmann::json::parse(text.substr(0, text.find('\n')));
    EXPECT_EQ(header.at("config_hash"), "abc");
    EXPECT_EQ(header.at("seed"), 7);
}

// On the copy model, steering widens the gap between present and absent
// object logits at every steered step. Checked by replaying the vanilla
// tokens with and without the steering hook.
TEST(CopyModel, SteeringRaisesPresentObjectMargin) {
    taskgen::SceneParams sp;
    auto copy = taskgen::build_copy_model(sp);
    auto scenes = taskgen::make_scenes(sp, 77, 30);
    const auto& vocab = sp.vocab;
    auto cfg = steer_cfg(SteerMode::RudderBeta, 20.0, copy.card_layer());
    for (const auto& scene : scenes) {
        auto vanilla = generate(copy.model, scene.prompt_ids, steer_cfg(SteerMode::Off), DecodeStrategy::greedy(), 4);
        auto card = card::extract_card_from_prefill(copy.model, scene.prompt_ids, 1).card;
        auto margin = [&](const std::vector<double>& logits) {
            double present = 0.0, absent = 0.0;
            int np = 0, na = 0;
            for (int i = 0; i < vocab.n_objects; ++i) {
                const auto t = vocab.object(i);
                const bool in = std::binary_search(scene.present_objects.begin(), scene.present_objects.end(), t);
                (in ? present : absent) += logits[static_cast<std::size_t>(t)];
                (in ? np : na) += 1;
            }
            return present / np - absent / na;
        };
        auto replay = [&](bool steer_on) {
            model::HookSet hooks;
            if (steer_on) {
                hooks.set_write(1, [&](const model::WriteContext& ctx, std::span<double> delta) {
                    if (ctx.position < static_cast<int>(scene.prompt_ids.size())) return false;
                    const double s = numerics::cosine_similarity(ctx.pre_attn_norm_out, card.direction.span());
                    const auto v = gate::steering_strength(gate::gate_value(s, cfg.gate), cfg.gate, card.direction);
                    for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = v[i];
                    return true;
                });
            }
            auto cache = copy.model.new_cache();
            model::ForwardCounter counter;
            copy.model.prefill(scene.prompt_ids, cache, counter, hooks);
            std::vector<double> margins;
            for (std::size_t i = 0; i + 1 < vanilla.tokens.size(); ++i) {
                margins.push_back(margin(copy.model.decode_step(vanilla.tokens[i], cache, counter, hooks)));
            }
            return margins;
        };
        auto base = replay(false);
        auto steered = replay(true);
        for (std::size_t i = 0; i < base.size(); ++i) EXPECT_GT(steered[i], base[i]) << "step " << i;
    }
}
