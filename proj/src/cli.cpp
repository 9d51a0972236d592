#include "rudder/cli.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "rudder/bench.hpp"
#include "rudder/card.hpp"
#include "rudder/diag.hpp"
#include "rudder/error.hpp"
#include "rudder/rng.hpp"
#include "rudder/version.hpp"

namespace rudder::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Strict reader over one JSON object. Every key must be consumed.
class Fields {
public:
    Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) fail(path_.empty() ? "<root>" : path_.substr(0, path_.size() - 1), "an object");
    }

    void integer(const char* key, int& out) {
        if (const json* v = take(key)) {
            if (!v->is_number_integer()) fail(name(key), "an integer");
            out = v->get<int>();
        }
    }
    void u64(const char* key, std::uint64_t& out) {
        if (const json* v = take(key)) {
            if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<std::int64_t>() >= 0)) {
                fail(name(key), "a non-negative integer");
            }
            out = v->get<std::uint64_t>();
        }
    }
    void real(const char* key, double& out) {
        if (const json* v = take(key)) {
            if (!v->is_number()) fail(name(key), "a number");
            out = v->get<double>();
        }
    }
    void optional_real(const char* key, std::optional<double>& out) {
        if (const json* v = take(key)) {
            if (v->is_null()) {
                out.reset();
                return;
            }
            if (!v->is_number()) fail(name(key), "a number or null");
            out = v->get<double>();
        }
    }
    void boolean(const char* key, bool& out) {
        if (const json* v = take(key)) {
            if (!v->is_boolean()) fail(name(key), "a boolean");
            out = v->get<bool>();
        }
    }
    void string(const char* key, std::string& out) {
        if (const json* v = take(key)) {
            if (!v->is_string()) fail(name(key), "a string");
            out = v->get<std::string>();
        }
    }
    template <typename Fn>
    void object(const char* key, Fn&& fn) {
        if (const json* v = take(key)) {
            Fields sub(*v, name(key) + ".");
            fn(sub);
            sub.finish();
        }
    }
    std::string name(const char* key) const { return path_ + key; }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            if (!seen_.count(key)) throw ConfigError("unknown field '" + path_ + key + "'");
        }
    }

private:
    const json* take(const char* key) {
        auto it = j_.find(key);
        if (it == j_.end()) return nullptr;
        seen_.insert(key);
        return &*it;
    }
    [[noreturn]] static void fail(const std::string& field, const char* expected) {
        throw ConfigError("field '" + field + "' must be " + expected);
    }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

const char* to_string(ModelKind k) {
    switch (k) {
        case ModelKind::ToyCopy: return "toy_copy";
        case ModelKind::Random: return "random";
        case ModelKind::Checkpoint: return "checkpoint";
    }
    return "?";
}

ModelKind model_kind_from_string(const std::string& s) {
    if (s == "toy_copy") return ModelKind::ToyCopy;
    if (s == "random") return ModelKind::Random;
    if (s == "checkpoint") return ModelKind::Checkpoint;
    throw ConfigError("field 'model.kind' must be one of toy_copy, random, checkpoint (got '" + s + "')");
}

steer::DecodeStrategy::Kind strategy_kind_from_string(const std::string& s) {
    using K = steer::DecodeStrategy::Kind;
    if (s == "greedy") return K::Greedy;
    if (s == "beam") return K::Beam;
    if (s == "nucleus") return K::Nucleus;
    throw ConfigError("field 'strategy.kind' must be one of greedy, beam, nucleus (got '" + s + "')");
}

std::string strategy_label(const steer::DecodeStrategy& s) {
    using K = steer::DecodeStrategy::Kind;
    char buf[96];
    switch (s.kind) {
        case K::Greedy: return "greedy";
        case K::Beam: std::snprintf(buf, sizeof buf, "beam(width=%d)", s.width); return buf;
        case K::Nucleus:
            std::snprintf(buf, sizeof buf, "nucleus(top_p=%.17g,temperature=%.17g)", s.top_p, s.temperature);
            return buf;
    }
    return "?";
}

json model_config_json(const model::ModelConfig& c) {
    return {{"n_layers", c.n_layers},     {"d_model", c.d_model},         {"n_heads", c.n_heads},
            {"d_ff", c.d_ff},             {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
            {"tied_embeddings", c.tied_embeddings}, {"seed", c.seed}};
}

void read_model_config(Fields& f, model::ModelConfig& c) {
    f.integer("n_layers", c.n_layers);
    f.integer("d_model", c.d_model);
    f.integer("n_heads", c.n_heads);
    f.integer("d_ff", c.d_ff);
    f.integer("vocab_size", c.vocab_size);
    f.integer("max_seq_len", c.max_seq_len);
    f.boolean("tied_embeddings", c.tied_embeddings);
    f.u64("seed", c.seed);
}

taskgen::SceneParams scene_params(const TaskSpec& t) {
    taskgen::SceneParams sp;
    sp.vocab.n_objects = t.n_objects;
    sp.vocab.n_frequent = t.n_frequent;
    sp.objects_min = t.objects_min;
    sp.objects_max = t.objects_max;
    return sp;
}

// Maps validation failures of nested components onto ConfigError.
template <typename Fn>
void as_config_error(const char* where, Fn&& fn) {
    try {
        fn();
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(std::string(where) + ": " + e.what());
    }
}

struct BuiltModel {
    model::Model model;
    bool toy = false;
};

BuiltModel build_model(const RunConfig& c) {
    switch (c.model.kind) {
        case ModelKind::ToyCopy: {
            const auto sp = scene_params(c.task);
            taskgen::CopyModel copy = taskgen::build_copy_model(sp, c.model.copy);
            if (c.task.prior_strength > 0) copy = taskgen::build_biased_model(copy, c.task.prior_strength);
            return {std::move(copy.model), true};
        }
        case ModelKind::Random: return {model::Model::init(c.model.random), false};
        case ModelKind::Checkpoint: {
            if (!fs::exists(c.model.checkpoint)) throw IoError("checkpoint not found: " + c.model.checkpoint);
            return {model::Model::load(c.model.checkpoint), false};
        }
    }
    throw ConfigError("unknown model kind");
}

struct Prompts {
    std::vector<std::vector<model::TokenId>> ids;
    std::vector<std::uint64_t> seeds;  // per-prompt nucleus seed material
    std::vector<taskgen::ToyScene> scenes;  // empty for random prompts
};

Prompts scene_prompts(const RunConfig& c, int n, const model::ModelConfig& mc) {
    const auto sp = scene_params(c.task);
    if (mc.vocab_size < sp.vocab.vocab_size()) {
        throw ConfigError("model vocab_size " + std::to_string(mc.vocab_size) + " cannot hold the " +
                          std::to_string(sp.vocab.vocab_size()) + "-token task vocabulary");
    }
    Prompts p;
    p.scenes = taskgen::make_scenes(sp, c.seed, n);
    for (const auto& s : p.scenes) {
        p.ids.push_back(s.prompt_ids);
        p.seeds.push_back(s.seed);
    }
    return p;
}

Prompts make_prompt_set(const RunConfig& c, const BuiltModel& m, int n) {
    if (m.toy) return scene_prompts(c, n, m.model.config());
    Prompts p;
    p.ids = bench::make_prompts(m.model.config(), n, c.task.prompt_len, c.seed);
    for (int i = 0; i < n; ++i) p.seeds.push_back(mix64(c.seed ^ mix64(static_cast<std::uint64_t>(i))));
    return p;
}

steer::DecodeStrategy strategy_for(const RunConfig& c) {
    auto s = c.strategy;
    s.seed = c.seed;
    return s;
}

void check_layer(const RunConfig& c, const model::ModelConfig& mc) {
    as_config_error("steer", [&] { c.steer.validate(mc); });
}

// Runs every prompt, fanning out across workers; results land by index.
std::vector<steer::GenerationResult> run_prompts(const model::Model& model, const Prompts& prompts,
                                                 const steer::SteerConfig& sc,
                                                 const steer::DecodeStrategy& strategy, int max_new_tokens,
                                                 const steer::GenerateOptions& options, int threads) {
    std::vector<steer::GenerationResult> out(prompts.ids.size());
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex mu;
    auto work = [&] {
        for (std::size_t i = next++; i < out.size(); i = next++) {
            try {
                auto strat = strategy;
                if (strat.kind == steer::DecodeStrategy::Kind::Nucleus) {
                    strat.seed = mix64(strategy.seed ^ prompts.seeds[i]);
                }
                out[i] = steer::generate(model, prompts.ids[i], sc, strat, max_new_tokens, options);
            } catch (...) {
                std::lock_guard lock(mu);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    const int workers = std::max(1, std::min<int>(threads, static_cast<int>(out.size())));
    if (workers == 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);
    return out;
}

json artifact_header(const char* artifact, const std::string& hash, std::uint64_t seed) {
    return {{"artifact", artifact}, {"config_hash", hash}, {"seed", seed}, {"engine_version", kEngineVersion}};
}

std::string csv_header_line(const std::string& hash, std::uint64_t seed) {
    return "# config_hash=" + hash + ",seed=" + std::to_string(seed) + ",engine_version=" + kEngineVersion + "\n";
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << content;
    f.close();
    if (!f) throw IoError("failed writing " + path.string());
}

std::string iso_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Timestamps and timings go to a sidecar so the artifacts stay reproducible.
class SidecarLog {
public:
    SidecarLog(fs::path path, const char* command, const std::string& hash)
        : path_(std::move(path)), start_(std::chrono::steady_clock::now()) {
        os_ << "command=" << command << "\nconfig_hash=" << hash << "\nstarted_at=" << iso_now()
            << "\nthreads=" << worker_count() << '\n';
    }
    void line(const std::string& s) { os_ << s << '\n'; }
    fs::path finish() {
        const auto ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
        os_ << "finished_at=" << iso_now() << "\nelapsed_ms=" << ms << '\n';
        write_file(path_, os_.str());
        return path_;
    }

private:
    fs::path path_;
    std::chrono::steady_clock::time_point start_;
    std::ostringstream os_;
};

double mean_ms_per_token(std::span<const steer::GenerationResult> results) {
    std::int64_t ns = 0;
    std::size_t n = 0;
    for (const auto& r : results) {
        for (auto t : r.trace.timing_ns) ns += t;
        n += r.trace.timing_ns.size();
    }
    return n ? static_cast<double>(ns) / 1e6 / static_cast<double>(n) : 0.0;
}

fs::path out_dir(const RunConfig& c, const CommandOptions& o) {
    return o.out_dir.empty() ? fs::path(c.output_dir) : o.out_dir;
}

}  // namespace

RunConfig parse_config(const json& j) {
    RunConfig c;
    Fields root(j, "");
    root.u64("seed", c.seed);
    root.object("model", [&](Fields& f) {
        std::string kind = to_string(c.model.kind);
        f.string("kind", kind);
        c.model.kind = model_kind_from_string(kind);
        f.object("copy", [&](Fields& g) {
            auto& p = c.model.copy;
            g.integer("d_model", p.d_model);
            g.integer("n_heads", p.n_heads);
            g.integer("max_seq_len", p.max_seq_len);
            g.u64("seed", p.seed);
            g.real("evidence_early", p.evidence_early);
            g.real("evidence_late", p.evidence_late);
            g.real("suppression", p.suppression);
            g.real("text_bias", p.text_bias);
            g.real("start_gain", p.start_gain);
            g.real("filler_bias", p.filler_bias);
            g.real("attention_sharpness", p.attention_sharpness);
        });
        f.object("random", [&](Fields& g) { read_model_config(g, c.model.random); });
        f.string("checkpoint", c.model.checkpoint);
    });
    root.object("task", [&](Fields& f) {
        f.integer("n_scenes", c.task.n_scenes);
        f.integer("objects_min", c.task.objects_min);
        f.integer("objects_max", c.task.objects_max);
        f.integer("n_objects", c.task.n_objects);
        f.integer("n_frequent", c.task.n_frequent);
        f.real("prior_strength", c.task.prior_strength);
        f.integer("max_new_tokens", c.task.max_new_tokens);
        f.integer("prompt_len", c.task.prompt_len);
    });
    root.object("steer", [&](Fields& f) {
        std::string mode = steer::to_string(c.steer.mode);
        f.string("mode", mode);
        as_config_error("steer.mode", [&] { c.steer.mode = steer::steer_mode_from_string(mode); });
        f.integer("layer", c.steer.layer);
        std::string pool = numerics::to_string(c.steer.pool_mode);
        f.string("pool_mode", pool);
        as_config_error("steer.pool_mode", [&] { c.steer.pool_mode = numerics::pool_mode_from_string(pool); });
        f.real("k", c.steer.gate.k);
        f.real("c", c.steer.gate.c);
        f.real("g_min", c.steer.gate.g_min);
        f.real("g_max", c.steer.gate.g_max);
        f.real("alpha_max", c.steer.gate.alpha_max);
        f.optional_real("tau", c.steer.gate.tau);
        f.real("contrastive_lambda", c.steer.contrastive_lambda);
    });
    root.object("strategy", [&](Fields& f) {
        std::string kind = steer::to_string(c.strategy.kind);
        f.string("kind", kind);
        c.strategy.kind = strategy_kind_from_string(kind);
        f.integer("width", c.strategy.width);
        f.real("top_p", c.strategy.top_p);
        f.real("temperature", c.strategy.temperature);
    });
    root.object("bench", [&](Fields& f) {
        f.integer("tokens_per_run", c.bench.tokens_per_run);
        f.integer("repeats", c.bench.repeats);
        f.integer("warmup", c.bench.warmup);
        f.integer("n_prompts", c.bench.n_prompts);
        f.integer("prompt_len", c.bench.prompt_len);
        f.boolean("use_bench_model", c.bench.use_bench_model);
    });
    root.object("diag", [&](Fields& f) {
        f.integer("n_prompts", c.diag.n_prompts);
        f.boolean("plot", c.diag.plot);
    });
    root.object("eval", [&](Fields& f) {
        f.real("recall_floor", c.eval.recall_floor);
        f.real("min_relative_reduction", c.eval.min_relative_reduction);
    });
    root.object("output", [&](Fields& f) { f.string("dir", c.output_dir); });
    root.finish();
    validate(c);
    return c;
}

RunConfig load_config(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read config " + path.string());
    json j;
    try {
        j = json::parse(f);
    } catch (const json::parse_error& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return parse_config(j);
}

json to_json(const RunConfig& c) {
    const auto& p = c.model.copy;
    const auto& g = c.steer.gate;
    return {
        {"seed", c.seed},
        {"model",
         {{"kind", to_string(c.model.kind)},
          {"copy",
           {{"d_model", p.d_model},
            {"n_heads", p.n_heads},
            {"max_seq_len", p.max_seq_len},
            {"seed", p.seed},
            {"evidence_early", p.evidence_early},
            {"evidence_late", p.evidence_late},
            {"suppression", p.suppression},
            {"text_bias", p.text_bias},
            {"start_gain", p.start_gain},
            {"filler_bias", p.filler_bias},
            {"attention_sharpness", p.attention_sharpness}}},
          {"random", model_config_json(c.model.random)},
          {"checkpoint", c.model.checkpoint}}},
        {"task",
         {{"n_scenes", c.task.n_scenes},
          {"objects_min", c.task.objects_min},
          {"objects_max", c.task.objects_max},
          {"n_objects", c.task.n_objects},
          {"n_frequent", c.task.n_frequent},
          {"prior_strength", c.task.prior_strength},
          {"max_new_tokens", c.task.max_new_tokens},
          {"prompt_len", c.task.prompt_len}}},
        {"steer",
         {{"mode", steer::to_string(c.steer.mode)},
          {"layer", c.steer.layer},
          {"pool_mode", numerics::to_string(c.steer.pool_mode)},
          {"k", g.k},
          {"c", g.c},
          {"g_min", g.g_min},
          {"g_max", g.g_max},
          {"alpha_max", g.alpha_max},
          {"tau", g.tau ? json(*g.tau) : json(nullptr)},
          {"contrastive_lambda", c.steer.contrastive_lambda}}},
        {"strategy",
         {{"kind", steer::to_string(c.strategy.kind)},
          {"width", c.strategy.width},
          {"top_p", c.strategy.top_p},
          {"temperature", c.strategy.temperature}}},
        {"bench",
         {{"tokens_per_run", c.bench.tokens_per_run},
          {"repeats", c.bench.repeats},
          {"warmup", c.bench.warmup},
          {"n_prompts", c.bench.n_prompts},
          {"prompt_len", c.bench.prompt_len},
          {"use_bench_model", c.bench.use_bench_model}}},
        {"diag", {{"n_prompts", c.diag.n_prompts}, {"plot", c.diag.plot}}},
        {"eval", {{"recall_floor", c.eval.recall_floor}, {"min_relative_reduction", c.eval.min_relative_reduction}}},
        {"output", {{"dir", c.output_dir}}},
    };
}

std::string config_hash(const RunConfig& c) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(to_json(c).dump())));
    return buf;
}

void validate(const RunConfig& c) {
    as_config_error("task", [&] { scene_params(c.task).validate(); });
    if (c.task.n_scenes < 1) throw ConfigError("field 'task.n_scenes' must be >= 1");
    if (c.task.max_new_tokens < 1) throw ConfigError("field 'task.max_new_tokens' must be >= 1");
    if (c.task.prompt_len < 1) throw ConfigError("field 'task.prompt_len' must be >= 1");
    if (!(c.task.prior_strength >= 0)) throw ConfigError("field 'task.prior_strength' must be >= 0");
    as_config_error("strategy", [&] { c.strategy.validate(); });
    as_config_error("steer.gate", [&] { c.steer.gate.validate(); });
    if (c.model.kind == ModelKind::Random) as_config_error("model.random", [&] { c.model.random.validate(); });
    if (c.model.kind == ModelKind::Checkpoint && c.model.checkpoint.empty()) {
        throw ConfigError("field 'model.checkpoint' is required for kind checkpoint");
    }
    if (c.model.kind == ModelKind::ToyCopy) {
        model::ModelConfig toy;
        toy.n_layers = 2;
        toy.d_model = c.model.copy.d_model;
        toy.n_heads = c.model.copy.n_heads;
        toy.vocab_size = scene_params(c.task).vocab.vocab_size();
        toy.max_seq_len = c.model.copy.max_seq_len;
        check_layer(c, toy);
    }
    if (c.model.kind == ModelKind::Random) check_layer(c, c.model.random);
    if (c.bench.n_prompts < 1 || c.bench.prompt_len < 1) throw ConfigError("bench needs n_prompts, prompt_len >= 1");
    as_config_error("bench", [&] {
        bench::BenchConfig bc;
        bc.tokens_per_run = c.bench.tokens_per_run;
        bc.repeats = c.bench.repeats;
        bc.warmup = c.bench.warmup;
        bc.validate();
    });
    if (c.diag.n_prompts < 1) throw ConfigError("field 'diag.n_prompts' must be >= 1");
    if (!(c.eval.recall_floor >= 0)) throw ConfigError("field 'eval.recall_floor' must be >= 0");
}

std::vector<std::string> preset_names() {
    return {"toy-biased", "llava-like", "idefics2-like", "instructblip-like"};
}

RunConfig preset(const std::string& name) {
    RunConfig c;
    c.steer.mode = steer::SteerMode::RudderBeta;
    c.steer.gate.k = 5.0;
    c.steer.gate.c = 1.0;
    c.steer.gate.alpha_max = 20.0;
    if (name == "toy-biased") {
        c.steer.layer = 1;
        return c;
    }
    // Random 16-layer stand-ins; published injection layers are scaled from
    // 32-layer backbones.
    c.model.kind = ModelKind::Random;
    c.model.random.n_layers = 16;
    c.model.random.d_model = 64;
    c.model.random.n_heads = 4;
    c.model.random.d_ff = 256;
    c.model.random.vocab_size = 256;
    c.model.random.max_seq_len = 320;
    c.task.n_scenes = 50;
    c.task.max_new_tokens = 16;
    c.task.prior_strength = 0.0;
    c.diag.n_prompts = 20;
    if (name == "llava-like") {
        c.steer.layer = 15;
    } else if (name == "idefics2-like") {
        c.steer.layer = 14;
        c.steer.gate.alpha_max = 8.0;
    } else if (name == "instructblip-like") {
        c.steer.layer = 1;
        c.steer.gate.alpha_max = 6.5;
        c.steer.gate.k = 8.0;
    } else {
        throw ConfigError("unknown preset '" + name + "'");
    }
    return c;
}

int worker_count() {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    if (const char* env = std::getenv("RUDDER_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v >= 1) return static_cast<int>(std::min<long>(v, hw));
    }
    return hw;
}

CommandOutcome cmd_generate(const RunConfig& c, const CommandOptions& o) {
    const auto hash = config_hash(c);
    const auto dir = out_dir(c, o);
    auto built = build_model(c);
    check_layer(c, built.model.config());
    const auto prompts = make_prompt_set(c, built, c.task.n_scenes);
    steer::GenerateOptions options;
    options.record_logits = true;
    options.noise_token = built.toy ? taskgen::TaskVocab::kNoise : 0;
    const auto strategy = strategy_for(c);
    ensure_dir(dir);
    SidecarLog log(dir / "generate.log", "generate", hash);
    const auto results = run_prompts(built.model, prompts, c.steer, strategy, c.task.max_new_tokens, options,
                                     worker_count());

    std::ostringstream tokens, traces;
    tokens << artifact_header("tokens", hash, c.seed).dump() << '\n';
    traces << artifact_header("trace", hash, c.seed).dump() << '\n';
    const steer::TraceHeader th{hash, c.seed, c.steer.mode, strategy_label(strategy)};
    for (std::size_t i = 0; i < results.size(); ++i) {
        tokens << json{{"index", i},
                       {"prompt", prompts.ids[i]},
                       {"tokens", results[i].tokens},
                       {"logits", results[i].trace.logits}}
                      .dump()
               << '\n';
        traces << steer::trace_to_jsonl(results[i], th);
    }
    CommandOutcome out;
    write_file(dir / "tokens.jsonl", tokens.str());
    write_file(dir / "trace.jsonl", traces.str());
    log.line("mean_ms_per_token=" + std::to_string(mean_ms_per_token(results)));
    out.artifacts = {dir / "tokens.jsonl", dir / "trace.jsonl", log.finish()};
    out.summary = "generated " + std::to_string(results.size()) + " sequences (" + steer::to_string(c.steer.mode) +
                  ", " + strategy_label(strategy) + ")";
    return out;
}

CommandOutcome cmd_eval(const RunConfig& c, const CommandOptions& o) {
    const auto hash = config_hash(c);
    const auto dir = out_dir(c, o);
    auto built = build_model(c);
    check_layer(c, built.model.config());
    const auto prompts = scene_prompts(c, c.task.n_scenes, built.model.config());
    const auto sp = scene_params(c.task);
    const auto strategy = strategy_for(c);
    ensure_dir(dir);
    SidecarLog log(dir / "eval.log", "eval", hash);
    const int threads = worker_count();

    auto vanilla_cfg = c.steer;
    vanilla_cfg.mode = steer::SteerMode::Off;
    auto run = [&](const steer::SteerConfig& sc) {
        auto res = taskgen::caption_scenes(built.model, prompts.scenes, sc, strategy, c.task.max_new_tokens, threads);
        log.line(std::string("mean_ms_per_token.") + steer::to_string(sc.mode) + "=" +
                 std::to_string(mean_ms_per_token(res)));
        return taskgen::evaluate_captions(res, prompts.scenes, sp.vocab);
    };
    auto vanilla = run(vanilla_cfg);
    auto steered = c.steer.mode == steer::SteerMode::Off ? vanilla : run(c.steer);
    const double ratio = taskgen::recall_ratio(steered, vanilla);
    steered.recall_ratio = ratio;
    vanilla.recall_ratio = 1.0;
    const double rel_s = vanilla.chair_s > 0 ? (vanilla.chair_s - steered.chair_s) / vanilla.chair_s : 0.0;
    const double rel_i = vanilla.chair_i > 0 ? (vanilla.chair_i - steered.chair_i) / vanilla.chair_i : 0.0;
    const bool recall_ok = ratio >= c.eval.recall_floor;
    const bool reduction_ok = rel_s >= c.eval.min_relative_reduction;

    json report = artifact_header("eval", hash, c.seed);
    report["mode"] = steer::to_string(c.steer.mode);
    report["strategy"] = strategy_label(strategy);
    report["n_scenes"] = c.task.n_scenes;
    report["vanilla"] = taskgen::to_json(vanilla);
    report["steered"] = taskgen::to_json(steered);
    report["chair_s"] = steered.chair_s;
    report["chair_i"] = steered.chair_i;
    report["recall"] = steered.recall;
    report["recall_ratio"] = ratio;
    report["relative_chair_s_reduction"] = rel_s;
    report["relative_chair_i_reduction"] = rel_i;
    report["thresholds"] = {{"recall_floor", c.eval.recall_floor},
                            {"min_relative_reduction", c.eval.min_relative_reduction},
                            {"recall_ok", recall_ok},
                            {"reduction_ok", reduction_ok}};
    CommandOutcome out;
    write_file(dir / "eval.json", report.dump(2) + "\n");
    out.artifacts = {dir / "eval.json", log.finish()};
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "vanilla chair_s=%.4f chair_i=%.4f recall=%.4f | %s chair_s=%.4f chair_i=%.4f recall=%.4f "
                  "recall_ratio=%.4f",
                  vanilla.chair_s, vanilla.chair_i, vanilla.recall, steer::to_string(c.steer.mode), steered.chair_s,
                  steered.chair_i, steered.recall, ratio);
    out.summary = buf;
    if (o.assert_thresholds && !(recall_ok && reduction_ok)) out.exit_code = kThresholdFailure;
    return out;
}

CommandOutcome cmd_bench(const RunConfig& c, const CommandOptions& o) {
    const auto hash = config_hash(c);
    const auto dir = out_dir(c, o);
    BuiltModel built = c.bench.use_bench_model
                           ? BuiltModel{model::Model::init(bench::default_bench_model_config(c.seed)), false}
                           : build_model(c);
    check_layer(c, built.model.config());
    const auto prompts = bench::make_prompts(built.model.config(), c.bench.n_prompts, c.bench.prompt_len, c.seed);
    std::vector<steer::SteerConfig> modes;
    for (auto m : {steer::SteerMode::Off, steer::SteerMode::RudderBeta, steer::SteerMode::RudderAdd,
                   steer::SteerMode::ContrastiveTwoPass}) {
        auto sc = c.steer;
        sc.mode = m;
        modes.push_back(sc);
    }
    bench::BenchConfig bc;
    bc.tokens_per_run = c.bench.tokens_per_run;
    bc.repeats = c.bench.repeats;
    bc.warmup = c.bench.warmup;
    bc.seed = c.seed;
    ensure_dir(dir);
    SidecarLog log(dir / "bench.log", "bench", hash);
    const auto results = bench::run_bench(built.model, prompts, modes, strategy_for(c), bc);

    json summary = artifact_header("bench", hash, c.seed);
    summary["model"] = model_config_json(built.model.config());
    summary["strategy"] = strategy_label(strategy_for(c));
    summary["tokens_per_run"] = bc.tokens_per_run;
    summary["n_prompts"] = c.bench.n_prompts;
    summary["modes"] = bench::deterministic_summary(results);
    CommandOutcome out;
    write_file(dir / "bench.json", summary.dump(2) + "\n");
    write_file(dir / "bench_timing.csv", csv_header_line(hash, c.seed) + bench::to_csv(results, c.seed, hash));
    std::ostringstream sum;
    double beta = 0, contrastive = 0;
    bool consistent = true;
    for (const auto& r : results) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%s: %.3f ms/token, %.1f token/s, %.1f%% of vanilla", steer::to_string(r.mode),
                      r.ms_per_token, r.tokens_per_second, 100.0 * r.relative_throughput_vs_vanilla);
        sum << buf << '\n';
        log.line(buf);
        if (r.mode == steer::SteerMode::RudderBeta) beta = r.relative_throughput_vs_vanilla;
        if (r.mode == steer::SteerMode::ContrastiveTwoPass) contrastive = r.relative_throughput_vs_vanilla;
        consistent = consistent && r.outputs_consistent;
    }
    out.artifacts = {dir / "bench.json", dir / "bench_timing.csv", log.finish()};
    out.summary = sum.str();
    if (o.assert_thresholds && !(beta >= 0.90 && contrastive <= 0.60 && consistent)) {
        out.exit_code = kThresholdFailure;
    }
    return out;
}

CommandOutcome cmd_diag(const RunConfig& c, const CommandOptions& o) {
    const auto hash = config_hash(c);
    const auto dir = out_dir(c, o);
    auto built = build_model(c);
    check_layer(c, built.model.config());
    const auto prompts = make_prompt_set(c, built, c.diag.n_prompts);
    ensure_dir(dir);
    SidecarLog log(dir / "diag.log", "diag", hash);
    const int threads = worker_count();

    const auto rows = diag::layer_dynamics(built.model, prompts.ids, threads);
    steer::GenerateOptions options;
    options.noise_token = built.toy ? taskgen::TaskVocab::kNoise : 0;
    const auto results =
        run_prompts(built.model, prompts, c.steer, strategy_for(c), c.task.max_new_tokens, options, threads);

    std::vector<diag::DirectionalEvidence> evidence;
    json samples = json::array();
    for (std::size_t i = 0; i < prompts.ids.size(); ++i) {
        const auto& ids = prompts.ids[i];
        std::vector<model::TokenId> text;
        if (built.toy) {
            text = taskgen::text_only_prompt(prompts.scenes[i]);
        } else {
            // Random prompts: the first half stands in for the scene prefix.
            text.assign(ids.begin() + static_cast<long>(ids.size() / 2), ids.end());
        }
        const auto v_text = diag::card_text_only(built.model, text, c.steer.layer, c.steer.pool_mode);
        const auto v_full =
            card::extract_card_from_prefill(built.model, ids, c.steer.layer, c.steer.pool_mode).card;
        const auto e = diag::directional_evidence(v_text, v_full, diag::mean_steering_vector(results[i].trace, v_full),
                                                  diag::mean_gate(results[i].trace));
        evidence.push_back(e);
        auto js = diag::to_json(e);
        js["index"] = i;
        samples.push_back(js);
    }
    json ev = artifact_header("directional_evidence", hash, c.seed);
    ev["layer"] = c.steer.layer;
    ev["mode"] = steer::to_string(c.steer.mode);
    ev["summary"] = diag::to_json(diag::summarize(evidence));
    ev["samples"] = samples;

    CommandOutcome out;
    write_file(dir / "layer_dynamics.csv", csv_header_line(hash, c.seed) + diag::to_csv(rows));
    write_file(dir / "directional_evidence.json", ev.dump(2) + "\n");
    out.artifacts = {dir / "layer_dynamics.csv", dir / "directional_evidence.json"};
    if (c.diag.plot) {
        write_file(dir / "layer_dynamics.svg", "<!-- config_hash=" + hash + " seed=" + std::to_string(c.seed) +
                                                   " engine_version=" + kEngineVersion + " -->\n" +
                                                   diag::layer_dynamics_svg(rows));
        out.artifacts.push_back(dir / "layer_dynamics.svg");
    }
    out.artifacts.push_back(log.finish());
    const auto s = diag::summarize(evidence);
    char buf[200];
    std::snprintf(buf, sizeof buf, "delta_theta mean %.1f deg, median %.1f deg; alignment gain mean %.3f, median %.3f",
                  s.mean_deg, s.median_deg, s.mean_gain, s.median_gain);
    out.summary = buf;
    return out;
}

}  // namespace rudder::cli
