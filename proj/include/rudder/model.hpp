#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace rudder::model {

using TokenId = std::int32_t;

struct ModelConfig {
    int n_layers = 2;
    int d_model = 16;
    int n_heads = 2;
    int d_ff = 64;
    int vocab_size = 32;
    int max_seq_len = 64;
    bool tied_embeddings = true;
    std::uint64_t seed = 0;

    int head_dim() const { return d_model / n_heads; }

    /// Throws InvalidConfig naming the first violated invariant.
    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class HookSite { PreAttnLayerNormOut, AttnOut, PostAttnResidual };

const char* to_string(HookSite site);

struct HookPoint {
    int layer_index = 0;
    HookSite site = HookSite::AttnOut;
};

struct ForwardCounter {
    std::uint64_t prefill_calls = 0;
    std::uint64_t decode_calls = 0;

    friend bool operator==(const ForwardCounter&, const ForwardCounter&) = default;
};

/// Per-layer keys and values, one d_model row per cached position
/// (heads are contiguous head_dim slices of each row).
class KVCache {
public:
    explicit KVCache(const ModelConfig& config);

    int filled_len() const noexcept { return filled_; }
    int capacity() const noexcept { return capacity_; }
    int n_layers() const noexcept { return static_cast<int>(keys_.size()); }

    std::span<const double> keys(int layer) const { return keys_.at(layer); }
    std::span<const double> values(int layer) const { return values_.at(layer); }

private:
    friend class Model;

    int d_model_;
    int capacity_;
    int filled_ = 0;
    std::vector<std::vector<double>> keys_;
    std::vector<std::vector<double>> values_;
};

/// Payload of a read-only hook. `slot` identifies the sequence within a
/// batched decode (always 0 for prefill). `residual_in` is the block input h
/// and is only populated for PreAttnLayerNormOut.
struct HookEvent {
    int layer;
    HookSite site;
    int position;
    int slot;
    std::span<const double> values;
    std::span<const double> residual_in;
};

/// What a PostAttnResidual hook may inspect before deciding on its delta.
struct WriteContext {
    int layer;
    int position;
    int slot;
    std::span<const double> pre_attn_norm_out;
    std::span<const double> attn_out;
    std::span<const double> residual;
};

using ReadHook = std::function<void(const HookEvent&)>;
/// Fills `delta` (pre-zeroed) and returns true to have it added to the
/// post-attention residual. This is the engine's only mutation point.
using WriteHook = std::function<bool(const WriteContext&, std::span<double> delta)>;

class HookSet {
public:
    void add_read(HookPoint point, ReadHook hook);
    void set_write(int layer, WriteHook hook);

    bool empty() const noexcept { return reads_.empty() && writes_.empty(); }

    void fire(const HookEvent& event) const;
    const WriteHook* write_hook(int layer) const;
    bool has_read(int layer, HookSite site) const;

private:
    struct Read {
        HookPoint point;
        ReadHook hook;
    };
    struct Write {
        int layer;
        WriteHook hook;
    };
    std::vector<Read> reads_;
    std::vector<Write> writes_;
};

struct LayerWeights {
    std::vector<double> ln1_g, ln1_b;
    std::vector<double> wq, bq, wk, bk, wv, bv, wo, bo;  // [d_model x d_model] row-major
    std::vector<double> ln2_g, ln2_b;
    std::vector<double> w1, b1;  // [d_ff x d_model]
    std::vector<double> w2, b2;  // [d_model x d_ff]

    friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct Weights {
    std::vector<double> tok_emb;  // [vocab x d_model]
    std::vector<double> pos_emb;  // [max_seq_len x d_model]
    std::vector<LayerWeights> layers;
    std::vector<double> lnf_g, lnf_b;
    std::vector<double> lm_head;  // [vocab x d_model]; empty when tied
    std::vector<double> lm_bias;  // [vocab]

    friend bool operator==(const Weights&, const Weights&) = default;
};

/// One sequence in a batched decode step.
struct DecodeSlot {
    TokenId token;
    KVCache* cache;
    std::vector<double> logits;
};

/// Pre-norm transformer decoder. Weights are immutable once a generation
/// starts; every per-sequence state lives in KVCache / ForwardCounter.
class Model {
public:
    /// Zero projections, unit LayerNorm gains. Builders fill weights in.
    explicit Model(ModelConfig config);

    /// Seeded initialization: normal(0, 0.02/sqrt(n_layers)) projections,
    /// normal(0, 0.02) embeddings.
    static Model init(const ModelConfig& config);

    const ModelConfig& config() const noexcept { return config_; }
    const Weights& weights() const noexcept { return weights_; }
    Weights& mutable_weights() noexcept { return weights_; }

    KVCache new_cache() const { return KVCache(config_); }

    /// One forward invocation over every prompt token. Returns logits at the
    /// last position.
    std::vector<double> prefill(std::span<const TokenId> tokens, KVCache& cache,
                                ForwardCounter& counter, const HookSet& hooks = {}) const;

    /// Like prefill, but returns logits at every processed position.
    std::vector<std::vector<double>> prefill_all(std::span<const TokenId> tokens, KVCache& cache,
                                                 ForwardCounter& counter,
                                                 const HookSet& hooks = {}) const;

    std::vector<double> decode_step(TokenId token, KVCache& cache, ForwardCounter& counter,
                                    const HookSet& hooks = {}) const;

    /// One forward invocation advancing several independent sequences by one
    /// token each. Hooks see each sequence's index as `slot`.
    void decode_batch(std::span<DecodeSlot> slots, ForwardCounter& counter,
                      const HookSet& hooks = {}) const;

    /// Runs layer `layer` over `n_tokens` rows of `hidden` ([n_tokens x d_model])
    /// at positions starting from the cache's current length for that layer.
    void block_forward(std::span<double> hidden, int n_tokens, int layer, KVCache& cache,
                       const HookSet& hooks, int slot = 0) const;

    void save(const std::filesystem::path& path) const;
    static Model load(const std::filesystem::path& path);

    /// Visits every parameter tensor in checkpoint declaration order.
    template <typename Fn>
    void for_each_parameter(Fn&& fn);
    template <typename Fn>
    void for_each_parameter(Fn&& fn) const;

private:
    std::vector<std::vector<double>> forward(std::span<const TokenId> tokens, KVCache& cache,
                                             const HookSet& hooks, int slot, bool all_logits) const;
    void embed(TokenId token, int position, std::span<double> out) const;
    void final_logits(std::span<const double> h, std::vector<double>& logits) const;

    ModelConfig config_;
    Weights weights_;
};

template <typename Fn>
void Model::for_each_parameter(Fn&& fn) {
    fn("tok_emb", weights_.tok_emb);
    fn("pos_emb", weights_.pos_emb);
    for (std::size_t l = 0; l < weights_.layers.size(); ++l) {
        auto& w = weights_.layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        fn(p + "ln1_g", w.ln1_g);
        fn(p + "ln1_b", w.ln1_b);
        fn(p + "wq", w.wq);
        fn(p + "bq", w.bq);
        fn(p + "wk", w.wk);
        fn(p + "bk", w.bk);
        fn(p + "wv", w.wv);
        fn(p + "bv", w.bv);
        fn(p + "wo", w.wo);
        fn(p + "bo", w.bo);
        fn(p + "ln2_g", w.ln2_g);
        fn(p + "ln2_b", w.ln2_b);
        fn(p + "w1", w.w1);
        fn(p + "b1", w.b1);
        fn(p + "w2", w.w2);
        fn(p + "b2", w.b2);
    }
    fn("lnf_g", weights_.lnf_g);
    fn("lnf_b", weights_.lnf_b);
    if (!config_.tied_embeddings) fn("lm_head", weights_.lm_head);
    fn("lm_bias", weights_.lm_bias);
}

template <typename Fn>
void Model::for_each_parameter(Fn&& fn) const {
    const_cast<Model*>(this)->for_each_parameter(
        [&](const std::string& name, std::vector<double>& t) { fn(name, std::as_const(t)); });
}

}  // namespace rudder::model
