#include "rudder/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <sstream>

#include "rudder/error.hpp"
#include "rudder/rng.hpp"

namespace rudder::bench {

namespace {

constexpr int kMinTokens = 64;

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fixed(double x, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, x);
    return buf;
}

}  // namespace

void BenchConfig::validate() const {
    if (tokens_per_run < kMinTokens) {
        throw InsufficientTokens("tokens_per_run " + std::to_string(tokens_per_run) + " is below the " +
                                 std::to_string(kMinTokens) + "-token timing floor");
    }
    if (repeats < 3) throw InvalidConfig("bench repeats must be >= 3");
    if (warmup < 0) throw InvalidConfig("bench warmup must be >= 0");
    if (workers != 1) throw InvalidConfig("bench measurements are serialized; workers must be 1");
}

model::ModelConfig default_bench_model_config(std::uint64_t seed) {
    model::ModelConfig c;
    c.n_layers = 4;
    c.d_model = 128;
    c.n_heads = 4;
    c.d_ff = 512;
    c.vocab_size = 512;
    c.max_seq_len = 320;
    c.seed = seed;
    return c;
}

std::vector<std::vector<model::TokenId>> make_prompts(const model::ModelConfig& config, int n_prompts,
                                                      int prompt_len, std::uint64_t seed) {
    if (n_prompts < 1 || prompt_len < 1) throw InvalidConfig("need at least one non-empty prompt");
    std::vector<std::vector<model::TokenId>> out;
    for (int i = 0; i < n_prompts; ++i) {
        SplitMix64 rng(mix64(seed ^ mix64(static_cast<std::uint64_t>(i))));
        std::vector<model::TokenId> p;
        for (int t = 0; t < prompt_len; ++t) {
            p.push_back(static_cast<model::TokenId>(rng.below(static_cast<std::uint64_t>(config.vocab_size))));
        }
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<BenchResult> run_bench(const model::Model& model,
                                   std::span<const std::vector<model::TokenId>> prompts,
                                   std::span<const steer::SteerConfig> configs,
                                   const steer::DecodeStrategy& strategy, const BenchConfig& config) {
    config.validate();
    if (prompts.empty()) throw InvalidArgument("bench needs at least one prompt");
    std::vector<steer::SteerConfig> modes(configs.begin(), configs.end());
    const bool has_off = std::any_of(modes.begin(), modes.end(),
                                     [](const auto& c) { return c.mode == steer::SteerMode::Off; });
    if (!has_off) {
        steer::SteerConfig off;
        off.layer = modes.empty() ? 0 : modes.front().layer;
        modes.insert(modes.begin(), off);
    }
    steer::GenerateOptions options;
    options.noise_token = 0;

    auto run_all = [&](const steer::SteerConfig& sc, std::vector<std::vector<model::TokenId>>* tokens,
                       model::ForwardCounter* counter) {
        for (const auto& p : prompts) {
            auto r = steer::generate(model, p, sc, strategy, config.tokens_per_run, options);
            if (tokens) tokens->push_back(std::move(r.tokens));
            if (counter) {
                counter->prefill_calls += r.trace.forward_counter.prefill_calls;
                counter->decode_calls += r.trace.forward_counter.decode_calls;
            }
        }
    };

    std::vector<BenchResult> results(modes.size());
    for (std::size_t m = 0; m < modes.size(); ++m) {
        auto& r = results[m];
        r.mode = modes[m].mode;
        r.n_warmup = config.warmup;
        r.repeats = config.repeats;
        r.n_tokens = config.tokens_per_run * static_cast<int>(prompts.size());
        run_all(modes[m], &r.reference_tokens, &r.forward_counter);
        for (int w = 0; w < config.warmup; ++w) run_all(modes[m], nullptr, nullptr);
    }
    // Modes interleave per prompt inside every repeat so slow drift in
    // machine speed hits all of them alike; the starting mode rotates so no
    // mode always runs right after another.
    std::size_t turn = 0;
    for (int rep = 0; rep < config.repeats; ++rep) {
        std::vector<std::int64_t> rep_ns(modes.size(), 0);
        for (std::size_t p = 0; p < prompts.size(); ++p, ++turn) {
            for (std::size_t k = 0; k < modes.size(); ++k) {
                const std::size_t m = (k + turn) % modes.size();
                const auto t0 = std::chrono::steady_clock::now();
                auto out = steer::generate(model, prompts[p], modes[m], strategy, config.tokens_per_run, options);
                const auto t1 = std::chrono::steady_clock::now();
                rep_ns[m] += std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count();
                if (out.tokens != results[m].reference_tokens[p]) results[m].outputs_consistent = false;
            }
        }
        for (std::size_t m = 0; m < modes.size(); ++m) {
            auto& r = results[m];
            r.wall_clock_total_ns += rep_ns[m];
            r.repeat_ms_per_token.push_back(static_cast<double>(rep_ns[m]) / 1e6 / r.n_tokens);
        }
    }
    double off_tps = 0.0;
    for (auto& r : results) {
        r.ms_per_token = median(r.repeat_ms_per_token);
        r.tokens_per_second = 1000.0 / r.ms_per_token;
        if (r.mode == steer::SteerMode::Off && off_tps == 0.0) off_tps = r.tokens_per_second;
    }
    for (auto& r : results) r.relative_throughput_vs_vanilla = r.tokens_per_second / off_tps;
    return results;
}

std::string to_csv(std::span<const BenchResult> results, std::uint64_t seed, const std::string& config_hash) {
    std::ostringstream os;
    os << "mode,ms_per_token,tokens_per_second,relative_throughput,repeats,seed,config_hash\n";
    for (const auto& r : results) {
        os << steer::to_string(r.mode) << ',' << fixed(r.ms_per_token, 6) << ',' << fixed(r.tokens_per_second, 3)
           << ',' << fixed(r.relative_throughput_vs_vanilla, 4) << ',' << r.repeats << ',' << seed << ','
           << config_hash << '\n';
    }
    return os.str();
}

nlohmann::json deterministic_summary(std::span<const BenchResult> results) {
    auto arr = nlohmann::json::array();
    for (const auto& r : results) {
        std::uint64_t digest = 0xcbf29ce484222325ULL;
        for (const auto& seq : r.reference_tokens) {
            for (auto t : seq) digest = mix64(digest ^ static_cast<std::uint64_t>(t));
            digest = mix64(digest ^ 0xffffffffULL);
        }
        char hex[17];
        std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(digest));
        arr.push_back({{"mode", steer::to_string(r.mode)},
                       {"n_tokens", r.n_tokens},
                       {"n_warmup", r.n_warmup},
                       {"repeats", r.repeats},
                       {"prefill_calls", r.forward_counter.prefill_calls},
                       {"decode_calls", r.forward_counter.decode_calls},
                       {"outputs_consistent", r.outputs_consistent},
                       {"token_digest", hex}});
    }
    return arr;
}

}  // namespace rudder::bench
