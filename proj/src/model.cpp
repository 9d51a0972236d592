#include "rudder/model.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "rudder/error.hpp"
#include "rudder/rng.hpp"

namespace rudder::model {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::array<char, 4> kMagic = {'R', 'U', 'D', 'R'};

// y = W x + b with W [rows x cols] row-major. Four fixed accumulation lanes,
// combined in a fixed order, so results are reproducible bit-for-bit.
void matvec(std::span<const double> w, std::span<const double> b, std::span<const double> x,
            std::span<double> y) {
    const std::size_t cols = x.size();
    const std::size_t rows = y.size();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = w.data() + r * cols;
        double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
        std::size_t c = 0;
        for (; c + 4 <= cols; c += 4) {
            a0 += row[c] * x[c];
            a1 += row[c + 1] * x[c + 1];
            a2 += row[c + 2] * x[c + 2];
            a3 += row[c + 3] * x[c + 3];
        }
        for (; c < cols; ++c) a0 += row[c] * x[c];
        y[r] = ((a0 + a1) + (a2 + a3)) + (b.empty() ? 0.0 : b[r]);
    }
}

void layer_norm(std::span<const double> x, std::span<const double> g, std::span<const double> b,
                std::span<double> out) {
    const auto n = static_cast<double>(x.size());
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) * inv * g[i] + b[i];
}

double gelu(double x) {
    constexpr double kSqrt2OverPi = 0.7978845608028654;
    return 0.5 * x * (1.0 + std::tanh(kSqrt2OverPi * (x + 0.044715 * x * x * x)));
}

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

void write_u32(std::ostream& os, std::uint32_t v) {
    const std::array<char, 4> bytes = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                                       static_cast<char>((v >> 16) & 0xff),
                                       static_cast<char>((v >> 24) & 0xff)};
    os.write(bytes.data(), 4);
}

void write_f64(std::ostream& os, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    std::array<char, 8> bytes{};
    for (int i = 0; i < 8; ++i) bytes[sz(i)] = static_cast<char>((bits >> (8 * i)) & 0xff);
    os.write(bytes.data(), 8);
}

std::uint32_t read_u32(std::istream& is) {
    std::array<unsigned char, 4> bytes{};
    if (!is.read(reinterpret_cast<char*>(bytes.data()), 4)) throw IoError("truncated checkpoint header");
    return std::uint32_t{bytes[0]} | (std::uint32_t{bytes[1]} << 8) | (std::uint32_t{bytes[2]} << 16) |
           (std::uint32_t{bytes[3]} << 24);
}

double read_f64(std::istream& is) {
    std::array<unsigned char, 8> bytes{};
    if (!is.read(reinterpret_cast<char*>(bytes.data()), 8)) throw IoError("truncated checkpoint body");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= std::uint64_t{bytes[sz(i)]} << (8 * i);
    return std::bit_cast<double>(bits);
}

bool is_projection(const std::string& name) {
    for (const char* suffix : {".wq", ".wk", ".wv", ".wo", ".w1", ".w2"}) {
        if (name.ends_with(suffix)) return true;
    }
    return name == "lm_head";
}

}  // namespace

void ModelConfig::validate() const {
    auto require = [](bool ok, const std::string& msg) {
        if (!ok) throw InvalidConfig(msg);
    };
    require(n_layers >= 1, "n_layers must be >= 1");
    require(d_model >= 1, "d_model must be >= 1");
    require(n_heads >= 1, "n_heads must be >= 1");
    require(d_ff >= 1, "d_ff must be >= 1");
    require(vocab_size >= 1, "vocab_size must be >= 1");
    require(max_seq_len >= 1, "max_seq_len must be >= 1");
    require(d_model % n_heads == 0, "d_model (" + std::to_string(d_model) +
                                        ") must be divisible by n_heads (" +
                                        std::to_string(n_heads) + ")");
}

const char* to_string(HookSite site) {
    switch (site) {
        case HookSite::PreAttnLayerNormOut: return "PreAttnLayerNormOut";
        case HookSite::AttnOut: return "AttnOut";
        case HookSite::PostAttnResidual: return "PostAttnResidual";
    }
    return "?";
}

KVCache::KVCache(const ModelConfig& config)
    : d_model_(config.d_model), capacity_(config.max_seq_len),
      keys_(sz(config.n_layers)), values_(sz(config.n_layers)) {}

void HookSet::add_read(HookPoint point, ReadHook hook) {
    if (point.site == HookSite::PostAttnResidual) {
        throw InvalidArgument("PostAttnResidual is a write site; use set_write");
    }
    reads_.push_back({point, std::move(hook)});
}

void HookSet::set_write(int layer, WriteHook hook) {
    for (auto& w : writes_) {
        if (w.layer == layer) {
            w.hook = std::move(hook);
            return;
        }
    }
    writes_.push_back({layer, std::move(hook)});
}

void HookSet::fire(const HookEvent& event) const {
    for (const auto& r : reads_) {
        if (r.point.layer_index == event.layer && r.point.site == event.site) r.hook(event);
    }
}

const WriteHook* HookSet::write_hook(int layer) const {
    for (const auto& w : writes_) {
        if (w.layer == layer) return &w.hook;
    }
    return nullptr;
}

bool HookSet::has_read(int layer, HookSite site) const {
    return std::any_of(reads_.begin(), reads_.end(), [&](const Read& r) {
        return r.point.layer_index == layer && r.point.site == site;
    });
}

Model::Model(ModelConfig config) : config_(config) {
    config_.validate();
    const auto d = sz(config_.d_model);
    const auto f = sz(config_.d_ff);
    const auto v = sz(config_.vocab_size);
    weights_.tok_emb.assign(v * d, 0.0);
    weights_.pos_emb.assign(sz(config_.max_seq_len) * d, 0.0);
    weights_.layers.resize(sz(config_.n_layers));
    for (auto& l : weights_.layers) {
        l.ln1_g.assign(d, 1.0);
        l.ln1_b.assign(d, 0.0);
        for (auto* m : {&l.wq, &l.wk, &l.wv, &l.wo}) m->assign(d * d, 0.0);
        for (auto* b : {&l.bq, &l.bk, &l.bv, &l.bo}) b->assign(d, 0.0);
        l.ln2_g.assign(d, 1.0);
        l.ln2_b.assign(d, 0.0);
        l.w1.assign(f * d, 0.0);
        l.b1.assign(f, 0.0);
        l.w2.assign(d * f, 0.0);
        l.b2.assign(d, 0.0);
    }
    weights_.lnf_g.assign(d, 1.0);
    weights_.lnf_b.assign(d, 0.0);
    if (!config_.tied_embeddings) weights_.lm_head.assign(v * d, 0.0);
    weights_.lm_bias.assign(v, 0.0);
}

Model Model::init(const ModelConfig& config) {
    Model m(config);
    const double proj_std = 0.02 / std::sqrt(static_cast<double>(config.n_layers));
    m.for_each_parameter([&](const std::string& name, std::vector<double>& t) {
        double stddev = 0.0;
        if (name == "tok_emb" || name == "pos_emb") {
            stddev = 0.02;
        } else if (is_projection(name)) {
            stddev = proj_std;
        } else {
            return;  // LayerNorm gains stay 1, biases stay 0.
        }
        const CounterRng rng(config.seed, name);
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = stddev * rng.normal(i);
    });
    return m;
}

void Model::embed(TokenId token, int position, std::span<double> out) const {
    if (token < 0 || token >= config_.vocab_size) {
        throw InvalidArgument("token id " + std::to_string(token) + " outside vocabulary");
    }
    const auto d = sz(config_.d_model);
    const double* te = weights_.tok_emb.data() + sz(token) * d;
    const double* pe = weights_.pos_emb.data() + sz(position) * d;
    for (std::size_t i = 0; i < d; ++i) out[i] = te[i] + pe[i];
}

void Model::final_logits(std::span<const double> h, std::vector<double>& logits) const {
    std::vector<double> x(h.size());
    layer_norm(h, weights_.lnf_g, weights_.lnf_b, x);
    const auto& head = config_.tied_embeddings ? weights_.tok_emb : weights_.lm_head;
    logits.resize(sz(config_.vocab_size));
    matvec(head, weights_.lm_bias, x, logits);
}

void Model::block_forward(std::span<double> hidden, int n_tokens, int layer, KVCache& cache,
                          const HookSet& hooks, int slot) const {
    const auto d = sz(config_.d_model);
    const auto hd = sz(config_.head_dim());
    const auto n_heads = sz(config_.n_heads);
    const auto& w = weights_.layers.at(sz(layer));
    auto& keys = cache.keys_[sz(layer)];
    auto& vals = cache.values_[sz(layer)];
    const int start = static_cast<int>(keys.size() / d);
    if (start + n_tokens > cache.capacity_) {
        throw CacheOverflow("layer " + std::to_string(layer) + ": " + std::to_string(start) + " + " +
                            std::to_string(n_tokens) + " positions exceed max_seq_len " +
                            std::to_string(cache.capacity_));
    }

    const auto n = sz(n_tokens);
    std::vector<double> norm_in(n * d);
    std::vector<double> q(n * d);
    std::vector<double> kv(d);

    // Normalize, project and append K/V for every new token first; attention
    // for token i then only reads cache rows [0, start + i].
    for (std::size_t i = 0; i < n; ++i) {
        const std::span<const double> h(hidden.data() + i * d, d);
        const std::span<double> u(norm_in.data() + i * d, d);
        layer_norm(h, w.ln1_g, w.ln1_b, u);
        hooks.fire({layer, HookSite::PreAttnLayerNormOut, start + static_cast<int>(i), slot, u, h});
        matvec(w.wq, w.bq, u, std::span<double>(q.data() + i * d, d));
        matvec(w.wk, w.bk, u, kv);
        keys.insert(keys.end(), kv.begin(), kv.end());
        matvec(w.wv, w.bv, u, kv);
        vals.insert(vals.end(), kv.begin(), kv.end());
    }

    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<double> scores;
    std::vector<double> mixed(d);
    std::vector<double> attn(d);
    std::vector<double> delta(d);
    std::vector<double> norm2(d);
    std::vector<double> ff(sz(config_.d_ff));
    std::vector<double> mlp_out(d);
    const WriteHook* write = hooks.write_hook(layer);

    for (std::size_t i = 0; i < n; ++i) {
        const int pos = start + static_cast<int>(i);
        const auto n_keys = sz(pos) + 1;
        scores.resize(n_keys);
        for (std::size_t head = 0; head < n_heads; ++head) {
            const double* qh = q.data() + i * d + head * hd;
            double max_score = -INFINITY;
            for (std::size_t j = 0; j < n_keys; ++j) {
                const double* kh = keys.data() + j * d + head * hd;
                double s = 0.0;
                for (std::size_t c = 0; c < hd; ++c) s += qh[c] * kh[c];
                scores[j] = s * scale;
                max_score = std::max(max_score, scores[j]);
            }
            double total = 0.0;
            for (std::size_t j = 0; j < n_keys; ++j) {
                scores[j] = std::exp(scores[j] - max_score);
                total += scores[j];
            }
            double* out = mixed.data() + head * hd;
            std::fill(out, out + hd, 0.0);
            for (std::size_t j = 0; j < n_keys; ++j) {
                const double p = scores[j] / total;
                const double* vh = vals.data() + j * d + head * hd;
                for (std::size_t c = 0; c < hd; ++c) out[c] += p * vh[c];
            }
        }
        matvec(w.wo, w.bo, mixed, attn);
        hooks.fire({layer, HookSite::AttnOut, pos, slot, attn, {}});

        const std::span<double> r(hidden.data() + i * d, d);
        for (std::size_t c = 0; c < d; ++c) r[c] += attn[c];

        if (write != nullptr) {
            std::fill(delta.begin(), delta.end(), 0.0);
            const std::span<const double> u(norm_in.data() + i * d, d);
            if ((*write)({layer, pos, slot, u, attn, r}, delta)) {
                for (std::size_t c = 0; c < d; ++c) r[c] += delta[c];
            }
        }

        layer_norm(r, w.ln2_g, w.ln2_b, norm2);
        matvec(w.w1, w.b1, norm2, ff);
        for (double& x : ff) x = gelu(x);
        matvec(w.w2, w.b2, ff, mlp_out);
        for (std::size_t c = 0; c < d; ++c) r[c] += mlp_out[c];
    }
}

std::vector<std::vector<double>> Model::forward(std::span<const TokenId> tokens, KVCache& cache,
                                                const HookSet& hooks, int slot,
                                                bool all_logits) const {
    const auto d = sz(config_.d_model);
    const int start = cache.filled_;
    const int n = static_cast<int>(tokens.size());
    if (start + n > cache.capacity_) {
        throw CacheOverflow(std::to_string(start) + " cached + " + std::to_string(n) +
                            " new positions exceed max_seq_len " + std::to_string(cache.capacity_));
    }
    std::vector<double> hidden(sz(n) * d);
    for (int i = 0; i < n; ++i) {
        embed(tokens[sz(i)], start + i, std::span<double>(hidden.data() + sz(i) * d, d));
    }
    for (int l = 0; l < config_.n_layers; ++l) block_forward(hidden, n, l, cache, hooks, slot);
    cache.filled_ = start + n;

    std::vector<std::vector<double>> logits(all_logits ? sz(n) : 1);
    for (std::size_t k = 0; k < logits.size(); ++k) {
        const std::size_t i = all_logits ? k : sz(n) - 1;
        final_logits(std::span<const double>(hidden.data() + i * d, d), logits[k]);
    }
    return logits;
}

namespace {

void check_prefill(std::span<const TokenId> tokens, const ModelConfig& config) {
    if (tokens.empty()) throw InvalidArgument("prefill needs at least one token");
    if (tokens.size() > sz(config.max_seq_len)) {
        throw SequenceTooLong(std::to_string(tokens.size()) + " tokens exceed max_seq_len " +
                              std::to_string(config.max_seq_len));
    }
}

}  // namespace

std::vector<double> Model::prefill(std::span<const TokenId> tokens, KVCache& cache,
                                   ForwardCounter& counter, const HookSet& hooks) const {
    check_prefill(tokens, config_);
    ++counter.prefill_calls;
    return std::move(forward(tokens, cache, hooks, 0, false).front());
}

std::vector<std::vector<double>> Model::prefill_all(std::span<const TokenId> tokens, KVCache& cache,
                                                    ForwardCounter& counter,
                                                    const HookSet& hooks) const {
    check_prefill(tokens, config_);
    ++counter.prefill_calls;
    return forward(tokens, cache, hooks, 0, true);
}

std::vector<double> Model::decode_step(TokenId token, KVCache& cache, ForwardCounter& counter,
                                       const HookSet& hooks) const {
    DecodeSlot slot{token, &cache, {}};
    decode_batch(std::span<DecodeSlot>(&slot, 1), counter, hooks);
    return std::move(slot.logits);
}

void Model::decode_batch(std::span<DecodeSlot> slots, ForwardCounter& counter,
                         const HookSet& hooks) const {
    for (const auto& s : slots) {
        if (s.cache->filled_ == 0) throw InvalidArgument("decode before prefill");
        if (s.cache->filled_ >= s.cache->capacity_) {
            throw CacheOverflow("decode at position " + std::to_string(s.cache->filled_) +
                                " exceeds max_seq_len " + std::to_string(s.cache->capacity_));
        }
    }
    ++counter.decode_calls;
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const TokenId token = slots[i].token;
        auto out = forward(std::span<const TokenId>(&token, 1), *slots[i].cache, hooks,
                           static_cast<int>(i), false);
        slots[i].logits = std::move(out.front());
    }
}

void Model::save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os.write(kMagic.data(), kMagic.size());
    write_u32(os, kCheckpointVersion);
    for (int v : {config_.n_layers, config_.d_model, config_.n_heads, config_.d_ff,
                  config_.vocab_size, config_.max_seq_len}) {
        write_u32(os, static_cast<std::uint32_t>(v));
    }
    write_u32(os, config_.tied_embeddings ? 1u : 0u);
    write_u32(os, static_cast<std::uint32_t>(config_.seed & 0xffffffffu));
    write_u32(os, static_cast<std::uint32_t>(config_.seed >> 32));
    for_each_parameter([&](const std::string&, const std::vector<double>& t) {
        for (double x : t) write_f64(os, x);
    });
    if (!os) throw IoError("write failed for " + path.string());
}

Model Model::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    std::array<char, 4> magic{};
    if (!is.read(magic.data(), 4) || magic != kMagic) throw IoError("bad checkpoint magic");
    const std::uint32_t version = read_u32(is);
    if (version != kCheckpointVersion) {
        throw IoError("unsupported checkpoint version " + std::to_string(version));
    }
    ModelConfig cfg;
    cfg.n_layers = static_cast<int>(read_u32(is));
    cfg.d_model = static_cast<int>(read_u32(is));
    cfg.n_heads = static_cast<int>(read_u32(is));
    cfg.d_ff = static_cast<int>(read_u32(is));
    cfg.vocab_size = static_cast<int>(read_u32(is));
    cfg.max_seq_len = static_cast<int>(read_u32(is));
    cfg.tied_embeddings = read_u32(is) != 0;
    const std::uint64_t lo = read_u32(is);
    const std::uint64_t hi = read_u32(is);
    cfg.seed = lo | (hi << 32);
    Model m(cfg);
    m.for_each_parameter([&](const std::string&, std::vector<double>& t) {
        for (double& x : t) x = read_f64(is);
    });
    if (is.peek() != std::char_traits<char>::eof()) throw IoError("trailing bytes after parameters");
    return m;
}

}  // namespace rudder::model
