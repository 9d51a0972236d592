#include <gtest/gtest.h>

#include "rudder/bench.hpp"
#include "rudder/error.hpp"

using namespace rudder;

namespace {

model::Model tiny() {
    model::ModelConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 32;
    c.vocab_size = 30;
    c.max_seq_len = 96;
    c.seed = 9;
    return model::Model::init(c);
}

steer::SteerConfig mode(steer::SteerMode m) {
    steer::SteerConfig s;
    s.mode = m;
    s.layer = 1;
    return s;
}

}  // namespace

TEST(BenchConfig, Validation) {
    bench::BenchConfig c;
    EXPECT_NO_THROW(c.validate());
    c.tokens_per_run = 63;
    EXPECT_THROW(c.validate(), InsufficientTokens);
    c.tokens_per_run = 64;
    c.repeats = 2;
    EXPECT_THROW(c.validate(), InvalidConfig);
    c.repeats = 3;
    c.workers = 2;
    EXPECT_THROW(c.validate(), InvalidConfig);
}

TEST(Bench, PromptsAreSeeded) {
    auto m = tiny();
    auto a = bench::make_prompts(m.config(), 3, 10, 1);
    EXPECT_EQ(a, bench::make_prompts(m.config(), 3, 10, 1));
    EXPECT_NE(a, bench::make_prompts(m.config(), 3, 10, 2));
    for (const auto& p : a) {
        ASSERT_EQ(p.size(), 10u);
        for (auto t : p) EXPECT_TRUE(t >= 0 && t < 30);
    }
}

TEST(Bench, RunAddsOffAndCountsCalls) {
    auto m = tiny();
    auto prompts = bench::make_prompts(m.config(), 2, 8, 4);
    std::vector<steer::SteerConfig> modes{mode(steer::SteerMode::RudderBeta),
                                          mode(steer::SteerMode::ContrastiveTwoPass)};
    bench::BenchConfig bc;
    bc.tokens_per_run = 64;
    bc.repeats = 3;
    bc.warmup = 1;
    auto r = bench::run_bench(m, prompts, modes, steer::DecodeStrategy::greedy(), bc);
    ASSERT_EQ(r.size(), 3u);
    EXPECT_EQ(r[0].mode, steer::SteerMode::Off);
    EXPECT_EQ(r[0].relative_throughput_vs_vanilla, 1.0);
    for (const auto& x : r) {
        EXPECT_TRUE(x.outputs_consistent);
        EXPECT_EQ(x.repeat_ms_per_token.size(), 3u);
        EXPECT_EQ(x.n_tokens, 128);
        EXPECT_GT(x.ms_per_token, 0.0);
    }
    EXPECT_EQ(r[1].forward_counter.prefill_calls, 2);
    EXPECT_EQ(r[1].forward_counter.decode_calls, 128);
    EXPECT_EQ(r[2].forward_counter.prefill_calls, 4);
    EXPECT_EQ(r[2].forward_counter.decode_calls, 256);

    auto summary = bench::deterministic_summary(r);
    EXPECT_EQ(summary.dump().find("ms_per_token"), std::string::npos);
    auto csv = bench::to_csv(r, 7, "abc");
    EXPECT_EQ(csv.rfind("mode,ms_per_token,tokens_per_second,relative_throughput,repeats,seed,config_hash\n", 0), 0u);
    EXPECT_NE(csv.find("contrastive,"), std::string::npos);
}

TEST(Bench, RefusesShortRuns) {
    auto m = tiny();
    auto prompts = bench::make_prompts(m.config(), 1, 8, 4);
    bench::BenchConfig bc;
    bc.tokens_per_run = 32;
    std::vector<steer::SteerConfig> none;
    EXPECT_THROW(bench::run_bench(m, prompts, none, steer::DecodeStrategy::greedy(), bc), InsufficientTokens);
}
