#include "rudder/card.hpp"

#include <string>

#include "rudder/error.hpp"

namespace rudder::card {

std::vector<RealVector> residual_updates(std::vector<RealVector> attn_captures) {
    return attn_captures;
}

CardVector extract_card(std::span<const RealVector> updates, PoolMode mode, int layer_index,
                        double epsilon) {
    if (updates.empty()) throw EmptyPool("no residual updates to pool");
    RealVector pooled = RealVector::zeros(updates.front().dim());
    try {
        pooled = numerics::pool(updates, mode, epsilon);
    } catch (const ZeroNormInput&) {
        throw DegenerateDirection("every residual update has zero norm");
    }
    const double n = pooled.norm();
    if (n < epsilon) {
        throw DegenerateDirection("pooled residual update has norm " + std::to_string(n));
    }
    return CardVector{numerics::l2_normalize(pooled, epsilon), layer_index, mode,
                      static_cast<int>(updates.size())};
}

CardCollector::CardCollector(int layer, std::optional<std::vector<bool>> token_mask)
    : layer_(layer), mask_(std::move(token_mask)) {}

void CardCollector::attach(model::HookSet& hooks) {
    hooks.add_read({layer_, model::HookSite::AttnOut}, [this](const model::HookEvent& e) {
        const auto pos = static_cast<std::size_t>(e.position);
        ++seen_;
        if (mask_ && (pos >= mask_->size() || !(*mask_)[pos])) return;
        captures_.emplace_back(std::vector<double>(e.values.begin(), e.values.end()));
    });
}

CardVector CardCollector::finish(PoolMode mode) const {
    return extract_card(residual_updates(captures_), mode, layer_);
}

CardExtraction extract_card_from_prefill(const model::Model& model,
                                         std::span<const model::TokenId> token_ids, int layer,
                                         PoolMode mode, std::optional<std::vector<bool>> token_mask) {
    if (layer < 0 || layer >= model.config().n_layers) {
        throw InvalidArgument("target layer " + std::to_string(layer) + " out of range");
    }
    CardCollector collector(layer, std::move(token_mask));
    model::HookSet hooks;
    collector.attach(hooks);
    model::KVCache cache = model.new_cache();
    model::ForwardCounter counter;
    auto logits = model.prefill(token_ids, cache, counter, hooks);
    return CardExtraction{collector.finish(mode), std::move(cache), counter, std::move(logits)};
}

nlohmann::json to_json(const CardVector& card) {
    return nlohmann::json{{"layer", card.layer_index},
                          {"pool_mode", numerics::to_string(card.pool_mode)},
                          {"prefill_len", card.prefill_len},
                          {"direction", card.direction.values()}};
}

CardVector card_from_json(const nlohmann::json& j) {
    return CardVector{RealVector(j.at("direction").get<std::vector<double>>()),
                      j.at("layer").get<int>(),
                      numerics::pool_mode_from_string(j.at("pool_mode").get<std::string>()),
                      j.at("prefill_len").get<int>()};
}

}  // namespace rudder::card
