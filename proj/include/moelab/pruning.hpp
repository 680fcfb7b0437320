// Copyright (c) 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Expert pruning: plans built from attribution reports, applied through the
// model's active mask.

#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "moelab/attribution.hpp"
#include "moelab/errors.hpp"
#include "moelab/io.hpp"
#include "moelab/moe.hpp"

namespace moelab {

enum class PruneStrategy { topk_layerwise, topk_global, threshold };

inline std::string to_string(PruneStrategy s) {
    switch (s) {
    case PruneStrategy::topk_layerwise: return "topk_layerwise";
    case PruneStrategy::topk_global: return "topk_global";
    case PruneStrategy::threshold: return "threshold";
    }
    return "?";
}

inline PruneStrategy prune_strategy_from_string(const std::string& s) {
    if (s == "topk_layerwise") return PruneStrategy::topk_layerwise;
    if (s == "topk_global") return PruneStrategy::topk_global;
    if (s == "threshold") return PruneStrategy::threshold;
    throw ArgumentError("unknown pruning strategy '" + s +
                        "' (expected topk_layerwise|topk_global|threshold)");
}

struct PruneParams {
    std::size_t k = 4;   ///< experts per layer (layerwise) or in total (global)
    double tau = 0.05;   ///< threshold strategy only
    friend bool operator==(const PruneParams&, const PruneParams&) = default;
};

struct PruningPlan {
    PruneStrategy strategy = PruneStrategy::topk_layerwise;
    PruneParams params;
    bool strict = false;
    std::vector<std::vector<std::size_t>> retained; ///< per layer, ascending
    std::vector<std::string> warnings;
    std::string source_report;

    friend bool operator==(const PruningPlan&, const PruningPlan&) = default;
};

struct CompressionStats {
    std::size_t experts_removed = 0;
    double expert_params_removed_fraction = 0.0;
    double total_params_removed_fraction = 0.0;
};

inline PruningPlan make_plan(const AttributionReport& rep, PruneStrategy strategy,
                             const PruneParams& params, bool strict = false) {
    const std::size_t L = rep.num_layers();
    const std::size_t M = rep.num_experts();
    if (L == 0) throw ArgumentError("make_plan: report has no layers");
    PruningPlan plan;
    plan.strategy = strategy;
    plan.params = params;
    plan.strict = strict;
    plan.source_report = rep.source;
    plan.retained.resize(L);
    const auto layer_rank = rank_layerwise(rep);

    switch (strategy) {
    case PruneStrategy::topk_layerwise:
        if (params.k < 1 || params.k > M)
            throw ArgumentError("make_plan: k=" + std::to_string(params.k) + " outside [1, " +
                                std::to_string(M) + "]");
        for (std::size_t l = 0; l < L; ++l) {
            const auto& r = layer_rank[l];
            plan.retained[l].assign(r.begin(), r.begin() + static_cast<std::ptrdiff_t>(
                                                              std::min(params.k, r.size())));
        }
        break;
    case PruneStrategy::topk_global: {
        if (params.k < 1 || params.k > L * M)
            throw ArgumentError("make_plan: global k=" + std::to_string(params.k) + " outside [1, " +
                                std::to_string(L * M) + "]");
        const auto order = rank_global(rep);
        for (std::size_t i = 0; i < std::min(params.k, order.size()); ++i)
            plan.retained[order[i].layer].push_back(order[i].expert);
        for (std::size_t l = 0; l < L; ++l) {
            if (!plan.retained[l].empty() || layer_rank[l].empty()) continue;
            if (strict)
                throw PlanError("make_plan: global top-" + std::to_string(params.k) +
                                " leaves layer " + std::to_string(l) + " without experts");
            plan.retained[l].push_back(layer_rank[l].front());
            plan.warnings.push_back("layer " + std::to_string(l) +
                                    ": no expert in global top-k, kept its top-1 expert " +
                                    std::to_string(layer_rank[l].front()));
        }
        break;
    }
    case PruneStrategy::threshold:
        if (!(params.tau >= 0.0 && params.tau <= 1.0))
            throw ArgumentError("make_plan: tau must be in [0, 1]");
        for (std::size_t l = 0; l < L; ++l) {
            for (std::size_t e : layer_rank[l])
                if (rep.scores[l][e] >= params.tau) plan.retained[l].push_back(e);
            if (!plan.retained[l].empty() || layer_rank[l].empty()) continue;
            if (strict)
                throw PlanError("make_plan: threshold tau=" + std::to_string(params.tau) +
                                " removes every expert in layer " + std::to_string(l));
            plan.retained[l].push_back(layer_rank[l].front());
            plan.warnings.push_back("layer " + std::to_string(l) + ": no expert reaches tau, kept argmax " +
                                    std::to_string(layer_rank[l].front()));
        }
        break;
    }
    for (auto& r : plan.retained) std::sort(r.begin(), r.end());
    return plan;
}

/// Seeded baseline: `k` experts per layer drawn uniformly from the active set.
inline PruningPlan random_plan(const std::vector<ExpertMask>& active, std::size_t k, Rng& rng) {
    PruningPlan plan;
    plan.params.k = k;
    plan.source_report = "random";
    for (const auto& layer : active) {
        std::vector<std::size_t> ids;
        for (std::size_t i = 0; i < layer.size(); ++i)
            if (layer[i]) ids.push_back(i);
        if (k < 1 || k > layer.size()) throw ArgumentError("random_plan: k out of range");
        rng.shuffle(ids);
        ids.resize(std::min(k, ids.size()));
        std::sort(ids.begin(), ids.end());
        plan.retained.push_back(std::move(ids));
    }
    return plan;
}

/// Returns a copy of `model` with only the retained experts active. Pruned
/// experts get zeroed weights and router rows.
inline MoeModel apply_plan(const MoeModel& model, const PruningPlan& plan) {
    const std::size_t L = model.config.num_layers;
    const std::size_t M = model.config.experts_per_layer;
    if (plan.retained.size() != L)
        throw ArgumentError("apply_plan: plan has " + std::to_string(plan.retained.size()) +
                            " layers, model has " + std::to_string(L));
    MoeModel out = model;
    for (std::size_t l = 0; l < L; ++l) {
        const auto& keep = plan.retained[l];
        if (keep.empty()) throw ArgumentError("apply_plan: layer " + std::to_string(l) + " retains nothing");
        ExpertMask mask(M, false);
        for (std::size_t e : keep) {
            if (e >= M || !model.active_mask[l][e])
                throw ArgumentError("apply_plan: layer " + std::to_string(l) + " expert " +
                                    std::to_string(e) + " is not active in the model");
            mask[e] = true;
        }
        auto& layer = out.params.layers[l];
        for (std::size_t e = 0; e < M; ++e) {
            if (mask[e]) continue;
            auto& ex = layer.experts[e];
            ex.w1.fill(0.0);
            ex.b1.fill(0.0);
            ex.w2.fill(0.0);
            ex.b2.fill(0.0);
            if (!layer.adapters.empty()) {
                layer.adapters[e].scale.fill(0.0);
                layer.adapters[e].bias.fill(0.0);
            }
            for (double& v : layer.router.row(e)) v = 0.0;
        }
        out.active_mask[l] = std::move(mask);
    }
    return out;
}

inline CompressionStats compression_stats(const PruningPlan& plan, const ModelConfig& c) {
    const std::size_t D = c.model_dim;
    const std::size_t H = c.expert_hidden_dim;
    const std::size_t L = c.num_layers;
    const std::size_t M = c.experts_per_layer;
    if (plan.retained.size() != L) throw ArgumentError("compression_stats: plan/config layer mismatch");
    const std::size_t per_expert = D * H + H + H * D + D;
    const std::size_t router_row = D;
    const std::size_t total = c.input_dim * D + L * (M * router_row + M * per_expert) +
                              D * c.num_classes + c.num_classes;
    CompressionStats s;
    for (const auto& r : plan.retained) s.experts_removed += M - r.size();
    s.expert_params_removed_fraction =
        static_cast<double>(s.experts_removed) / static_cast<double>(L * M);
    s.total_params_removed_fraction =
        static_cast<double>(s.experts_removed * (per_expert + router_row)) / static_cast<double>(total);
    return s;
}

inline json plan_to_json(const PruningPlan& p) {
    const json params{{"k", p.params.k}, {"tau", p.params.tau}, {"strict", p.strict}};
    return json{{"format_version", kFormatVersion},
                {"kind", "moelab.plan"},
                {"strategy", to_string(p.strategy)},
                {"params", params},
                {"retained", p.retained},
                {"warnings", p.warnings},
                {"source_report", p.source_report}};
}

inline PruningPlan plan_from_json(const json& j) {
    try {
        PruningPlan p;
        p.strategy = prune_strategy_from_string(j.at("strategy").get<std::string>());
        const auto& params = j.at("params");
        p.strict = params.value("strict", false);
        if (params.contains("k")) p.params.k = params.at("k").get<std::size_t>();
        if (params.contains("tau")) p.params.tau = params.at("tau").get<double>();
        p.retained = j.at("retained").get<std::vector<std::vector<std::size_t>>>();
        p.warnings = j.at("warnings").get<std::vector<std::string>>();
        p.source_report = j.at("source_report").get<std::string>();
        return p;
    } catch (const json::exception& e) {
        throw IoError(std::string("plan: malformed document: ") + e.what());
    }
}

} // namespace moelab
