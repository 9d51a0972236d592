#pragma once

#include <optional>
#include <span>
#include <vector>

#include "json.hpp"
#include "rudder/model.hpp"
#include "rudder/numerics.hpp"

namespace rudder::card {

using numerics::PoolMode;
using numerics::RealVector;

/// Unit-norm per-sample direction pooled from one layer's attention updates.
struct CardVector {
    RealVector direction;
    int layer_index = 0;
    PoolMode pool_mode = PoolMode::Mean;
    int prefill_len = 0;

    friend bool operator==(const CardVector&, const CardVector&) = default;
};

/// In a pre-norm block the residual update of the attention sublayer is the
/// attention output itself. Adapters for other block layouts override this.
std::vector<RealVector> residual_updates(std::vector<RealVector> attn_captures);

/// Pool, then L2-normalize. Throws EmptyPool, or DegenerateDirection when the
/// pooled vector has (near) zero norm.
CardVector extract_card(std::span<const RealVector> updates, PoolMode mode, int layer_index = 0,
                        double epsilon = numerics::kDefaultEpsilon);

/// Read-only AttnOut capture at one layer during prefill. Attach it to the
/// HookSet used for the prefill, then call `finish`.
class CardCollector {
public:
    /// `token_mask`, when given, restricts pooling to prompt positions whose
    /// entry is true (e.g. scene-role tokens only).
    explicit CardCollector(int layer, std::optional<std::vector<bool>> token_mask = std::nullopt);

    void attach(model::HookSet& hooks);

    const std::vector<RealVector>& captures() const noexcept { return captures_; }
    int captured_tokens() const noexcept { return seen_; }

    CardVector finish(PoolMode mode) const;

private:
    int layer_;
    std::optional<std::vector<bool>> mask_;
    std::vector<RealVector> captures_;
    int seen_ = 0;
};

struct CardExtraction {
    CardVector card;
    model::KVCache cache;
    model::ForwardCounter counter;
    std::vector<double> last_logits;
};

/// Runs exactly one prefill with a read-only hook at `layer` and pools the
/// captured updates over the prompt.
CardExtraction extract_card_from_prefill(const model::Model& model,
                                         std::span<const model::TokenId> token_ids, int layer,
                                         PoolMode mode = PoolMode::Mean,
                                         std::optional<std::vector<bool>> token_mask = std::nullopt);

nlohmann::json to_json(const CardVector& card);
CardVector card_from_json(const nlohmann::json& j);

}  // namespace rudder::card
