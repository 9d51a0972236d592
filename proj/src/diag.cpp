#include "rudder/diag.hpp"

#include <algorithm>
#include <atomic>
#include <mutex>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>
#include <thread>

#include "rudder/error.hpp"

namespace rudder::diag {

namespace {

struct PromptCapture {
    // Per layer: update vectors and block inputs, in position order.
    std::vector<std::vector<RealVector>> updates;
    std::vector<std::vector<double>> update_norms;
    std::vector<std::vector<double>> input_norms;
};

PromptCapture capture(const model::Model& model, std::span<const model::TokenId> prompt) {
    const int n_layers = model.config().n_layers;
    PromptCapture pc;
    pc.updates.resize(static_cast<std::size_t>(n_layers));
    pc.update_norms.resize(static_cast<std::size_t>(n_layers));
    pc.input_norms.resize(static_cast<std::size_t>(n_layers));
    model::HookSet hooks;
    for (int l = 0; l < n_layers; ++l) {
        const auto li = static_cast<std::size_t>(l);
        hooks.add_read({l, model::HookSite::PreAttnLayerNormOut}, [&pc, li](const model::HookEvent& e) {
            pc.input_norms[li].push_back(numerics::l2_norm(e.residual_in));
        });
        hooks.add_read({l, model::HookSite::AttnOut}, [&pc, li](const model::HookEvent& e) {
            pc.update_norms[li].push_back(numerics::l2_norm(e.values));
            pc.updates[li].emplace_back(std::vector<double>(e.values.begin(), e.values.end()));
        });
    }
    auto cache = model.new_cache();
    model::ForwardCounter counter;
    model.prefill(prompt, cache, counter, hooks);
    return pc;
}

double clamped_angle(double cosine) { return std::acos(numerics::clamp_unit(cosine)); }

void require_unit(const RealVector& v, const char* what) {
    if (std::abs(v.norm() - 1.0) > 1e-6) {
        throw NonUnitDirection(std::string(what) + " has norm " + std::to_string(v.norm()));
    }
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string num(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

}  // namespace

std::optional<double> pairwise_coherence(std::span<const RealVector> vectors, double epsilon) {
    std::vector<const RealVector*> live;
    for (const auto& v : vectors) {
        if (v.norm() >= epsilon) live.push_back(&v);
    }
    if (live.size() < 2) return std::nullopt;
    std::vector<double> cosines;
    cosines.reserve(live.size() * (live.size() - 1) / 2);
    for (std::size_t i = 0; i < live.size(); ++i) {
        for (std::size_t j = i + 1; j < live.size(); ++j) {
            cosines.push_back(numerics::cosine_similarity(*live[i], *live[j], epsilon));
        }
    }
    return numerics::kahan_sum(cosines) / static_cast<double>(cosines.size());
}

std::vector<LayerDynamics> layer_dynamics(const model::Model& model,
                                          std::span<const std::vector<model::TokenId>> prompts,
                                          int threads) {
    if (prompts.empty()) throw InvalidArgument("layer_dynamics needs at least one prompt");
    std::vector<PromptCapture> caps(prompts.size());
    const int workers = std::max(1, std::min<int>(threads, static_cast<int>(prompts.size())));
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto work = [&] {
        for (std::size_t i = next++; i < prompts.size(); i = next++) {
            try {
                caps[i] = capture(model, prompts[i]);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    if (workers == 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);

    std::vector<LayerDynamics> rows;
    for (int l = 0; l < model.config().n_layers; ++l) {
        const auto li = static_cast<std::size_t>(l);
        std::vector<RealVector> updates;
        std::vector<double> norms, relative;
        for (const auto& pc : caps) {
            updates.insert(updates.end(), pc.updates[li].begin(), pc.updates[li].end());
            for (std::size_t t = 0; t < pc.update_norms[li].size(); ++t) {
                norms.push_back(pc.update_norms[li][t]);
                const double in = pc.input_norms[li][t];
                if (in >= numerics::kDefaultEpsilon) relative.push_back(pc.update_norms[li][t] / in);
            }
        }
        LayerDynamics row;
        row.layer = l;
        row.n_tokens = static_cast<int>(norms.size());
        row.mean_update_norm = numerics::kahan_sum(norms) / static_cast<double>(norms.size());
        if (!relative.empty()) {
            row.mean_relative_strength = numerics::kahan_sum(relative) / static_cast<double>(relative.size());
        }
        row.coherence = pairwise_coherence(updates);
        rows.push_back(row);
    }
    return rows;
}

card::CardVector card_text_only(const model::Model& model, std::span<const model::TokenId> text_prompt,
                                int layer, numerics::PoolMode mode) {
    return card::extract_card_from_prefill(model, text_prompt, layer, mode).card;
}

RealVector mean_steering_vector(const steer::GenerationTrace& trace, const card::CardVector& card) {
    std::vector<double> norms;
    for (const auto& r : trace.records) {
        if (r.in_answer_span) norms.push_back(r.steer_norm);
    }
    if (norms.empty()) return RealVector::zeros(card.direction.dim());
    const double scale = numerics::kahan_sum(norms) / static_cast<double>(norms.size());
    std::vector<double> v(card.direction.values().begin(), card.direction.values().end());
    for (double& x : v) x *= scale;
    return RealVector(std::move(v));
}

std::optional<double> mean_gate(const steer::GenerationTrace& trace) {
    std::vector<double> gs;
    for (const auto& r : trace.records) {
        if (r.in_answer_span && r.g) gs.push_back(*r.g);
    }
    if (gs.empty()) return std::nullopt;
    return numerics::kahan_sum(gs) / static_cast<double>(gs.size());
}

DirectionalEvidence directional_evidence(const card::CardVector& v_text, const card::CardVector& v_full,
                                         const RealVector& v_steer, std::optional<double> gate) {
    require_unit(v_text.direction, "text-only CARD direction");
    require_unit(v_full.direction, "scene CARD direction");
    if (v_text.direction.dim() != v_full.direction.dim() || v_steer.dim() != v_full.direction.dim()) {
        throw DimMismatch("directional evidence vectors differ in dimension");
    }
    DirectionalEvidence e;
    e.delta_theta = clamped_angle(numerics::dot(v_text.direction.span(), v_full.direction.span()));
    const double n = v_steer.norm();
    if (n >= numerics::kDefaultEpsilon) {
        std::vector<double> u(v_steer.values().begin(), v_steer.values().end());
        for (double& x : u) x /= n;
        e.alignment_gain = numerics::dot(v_full.direction.span(), u) - numerics::dot(v_text.direction.span(), u);
    }
    e.mean_gate = gate;
    return e;
}

AngleSummary summarize(std::span<const DirectionalEvidence> samples) {
    if (samples.empty()) throw InvalidArgument("no directional evidence to summarize");
    std::vector<double> deg, gain;
    for (const auto& s : samples) {
        deg.push_back(s.delta_theta * 180.0 / std::numbers::pi);
        gain.push_back(s.alignment_gain);
    }
    const double n = static_cast<double>(samples.size());
    auto sorted_mean = [n](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        return numerics::kahan_sum(v) / n;
    };
    return {sorted_mean(deg), median(deg), sorted_mean(gain), median(gain)};
}

std::string to_csv(std::span<const LayerDynamics> rows) {
    std::ostringstream os;
    os << "layer,n_tokens,mean_update_norm,mean_relative_strength,coherence\n";
    for (const auto& r : rows) {
        os << r.layer << ',' << r.n_tokens << ',' << num(r.mean_update_norm) << ','
           << (r.mean_relative_strength ? num(*r.mean_relative_strength) : "null") << ','
           << (r.coherence ? num(*r.coherence) : "null") << '\n';
    }
    return os.str();
}

nlohmann::json to_json(const DirectionalEvidence& e) {
    return {{"delta_theta", e.delta_theta},
            {"delta_theta_deg", e.delta_theta * 180.0 / std::numbers::pi},
            {"alignment_gain", e.alignment_gain},
            {"mean_gate", e.mean_gate ? nlohmann::json(*e.mean_gate) : nlohmann::json(nullptr)}};
}

nlohmann::json to_json(const AngleSummary& s) {
    return {{"delta_theta_mean_deg", s.mean_deg},
            {"delta_theta_median_deg", s.median_deg},
            {"alignment_gain_mean", s.mean_gain},
            {"alignment_gain_median", s.median_gain}};
}

std::string layer_dynamics_svg(std::span<const LayerDynamics> rows) {
    const double width = 80.0 * static_cast<double>(rows.size()) + 80.0;
    const double height = 260.0;
    double max_norm = 0.0, max_rel = 0.0;
    for (const auto& r : rows) {
        max_norm = std::max(max_norm, r.mean_update_norm);
        max_rel = std::max(max_rel, r.mean_relative_strength.value_or(0.0));
    }
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
    os << "<text x=\"10\" y=\"20\" font-size=\"13\">update norm (blue) / relative strength (orange) per layer</text>\n";
    const double base = height - 30.0;
    const double span = height - 70.0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const double x = 50.0 + 80.0 * static_cast<double>(i);
        const double h1 = max_norm > 0 ? span * rows[i].mean_update_norm / max_norm : 0.0;
        const double h2 = max_rel > 0 ? span * rows[i].mean_relative_strength.value_or(0.0) / max_rel : 0.0;
        os << "<rect x=\"" << x << "\" y=\"" << base - h1 << "\" width=\"28\" height=\"" << h1
           << "\" fill=\"#3b6ea5\"/>\n";
        os << "<rect x=\"" << x + 30 << "\" y=\"" << base - h2 << "\" width=\"28\" height=\"" << h2
           << "\" fill=\"#e08a2c\"/>\n";
        os << "<text x=\"" << x + 20 << "\" y=\"" << base + 18 << "\" font-size=\"12\">L" << rows[i].layer
           << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

}  // namespace rudder::diag
