// Copyright (c) 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Expert attribution over routing traces.
//
// A trace holds one row per (example, layer): the full routing distribution
// over experts and the selected top-k set. Hard attribution counts selections,
// soft attribution sums gate probability; both are normalized per layer.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moelab/checkpoint.hpp"
#include "moelab/errors.hpp"
#include "moelab/io.hpp"
#include "moelab/moe.hpp"

namespace moelab {

struct TraceMeta {
    std::string model_hash;
    std::string dataset_id;
    std::size_t token_count = 0; ///< m, number of examples traced
    std::size_t top_k = 0;
    std::size_t num_layers = 0;
    std::size_t num_experts = 0;
    std::vector<ExpertMask> active_mask;
};

struct RoutingTrace {
    TraceMeta meta;
    std::vector<TraceRow> rows;
};

enum class AttributionMode { hard, soft };
enum class RankScope { layerwise, global };

inline std::string to_string(AttributionMode m) { return m == AttributionMode::hard ? "hard" : "soft"; }

inline AttributionMode attribution_mode_from_string(const std::string& s) {
    if (s == "hard") return AttributionMode::hard;
    if (s == "soft") return AttributionMode::soft;
    throw ArgumentError("unknown attribution mode '" + s + "' (expected hard|soft)");
}

struct ExpertRef {
    std::size_t layer = 0;
    std::size_t expert = 0;
    friend bool operator==(const ExpertRef&, const ExpertRef&) = default;
};

struct AttributionReport {
    AttributionMode mode = AttributionMode::soft;
    std::vector<std::vector<double>> scores; ///< per layer, A_i summing to 1
    std::vector<ExpertMask> active_mask;     ///< experts eligible for ranking
    std::size_t token_count = 0;
    std::string source; ///< model hash of the traced model

    std::size_t num_layers() const { return scores.size(); }
    std::size_t num_experts() const { return scores.empty() ? 0 : scores.front().size(); }
};

// ---------------------------------------------------------------------------
// Trace logging
// ---------------------------------------------------------------------------

inline json trace_meta_to_json(const TraceMeta& m) {
    return json{{"format_version", kFormatVersion},
                {"model_hash", m.model_hash},
                {"dataset_id", m.dataset_id},
                {"m", m.token_count},
                {"k", m.top_k},
                {"num_layers", m.num_layers},
                {"num_experts", m.num_experts},
                {"active_mask", mask_to_json(m.active_mask)}};
}

inline json trace_row_to_json(const TraceRow& r) {
    return json{{"ex", r.example}, {"layer", r.layer}, {"probs", r.probs}, {"sel", r.selected}};
}

/// Runs the model over `ids` and records one row per (example, layer). When
/// `out_path` is given the trace is also streamed there as JSONL, header
/// line first; `extra_meta` entries are merged into the header.
inline RoutingTrace log_trace(const MoeModel& model, const Tensor2& inputs,
                              std::span<const std::size_t> ids, const std::string& dataset_id,
                              const std::optional<std::filesystem::path>& out_path = std::nullopt,
                              const json& extra_meta = json::object()) {
    RoutingTrace trace;
    trace.meta.model_hash = model_hash(model);
    trace.meta.dataset_id = dataset_id;
    trace.meta.token_count = ids.size();
    trace.meta.top_k = model.config.top_k;
    trace.meta.num_layers = model.config.num_layers;
    trace.meta.num_experts = model.config.experts_per_layer;
    trace.meta.active_mask = model.active_mask;
    trace.rows = forward(model, inputs, ids, true).trace;
    if (out_path) {
        atomic_write(*out_path, [&](std::ostream& os) {
            json meta = trace_meta_to_json(trace.meta);
            meta.update(extra_meta);
            os << json{{"meta", meta}}.dump() << '\n';
            for (const auto& r : trace.rows) os << trace_row_to_json(r).dump() << '\n';
        });
    }
    return trace;
}

inline RoutingTrace read_trace(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open trace " + path.string());
    RoutingTrace t;
    std::string line;
    std::size_t lineno = 0;
    try {
        if (!std::getline(in, line)) throw IoError("trace " + path.string() + " has no header line");
        ++lineno;
        const auto head = json::parse(line).at("meta");
        t.meta.model_hash = head.at("model_hash").get<std::string>();
        t.meta.dataset_id = head.at("dataset_id").get<std::string>();
        t.meta.token_count = head.at("m").get<std::size_t>();
        t.meta.top_k = head.at("k").get<std::size_t>();
        t.meta.num_layers = head.at("num_layers").get<std::size_t>();
        t.meta.num_experts = head.at("num_experts").get<std::size_t>();
        t.meta.active_mask = mask_from_json(head.at("active_mask"));
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            const auto j = json::parse(line);
            TraceRow r;
            r.example = j.at("ex").get<std::size_t>();
            r.layer = j.at("layer").get<std::size_t>();
            r.probs = j.at("probs").get<std::vector<double>>();
            r.selected = j.at("sel").get<std::vector<std::size_t>>();
            if (r.layer >= t.meta.num_layers || r.probs.size() != t.meta.num_experts)
                throw IoError("trace " + path.string() + " line " + std::to_string(lineno) +
                              ": row does not match header dimensions");
            t.rows.push_back(std::move(r));
        }
    } catch (const json::exception& e) {
        throw IoError("trace " + path.string() + " line " + std::to_string(lineno) + ": " + e.what());
    }
    return t;
}

// ---------------------------------------------------------------------------
// Attribution
// ---------------------------------------------------------------------------

namespace detail {

inline std::size_t trace_layers(const RoutingTrace& t) {
    std::size_t L = t.meta.num_layers;
    for (const auto& r : t.rows) L = std::max(L, r.layer + 1);
    return L;
}

inline std::size_t trace_experts(const RoutingTrace& t) {
    if (t.meta.num_experts) return t.meta.num_experts;
    return t.rows.empty() ? 0 : t.rows.front().probs.size();
}

template <class Accumulate>
AttributionReport attribute(const RoutingTrace& t, AttributionMode mode, Accumulate&& acc) {
    if (t.rows.empty()) throw ArgumentError("attribution: empty trace");
    const std::size_t L = trace_layers(t);
    const std::size_t M = trace_experts(t);
    AttributionReport rep;
    rep.mode = mode;
    rep.token_count = t.meta.token_count;
    rep.source = t.meta.model_hash;
    rep.scores.assign(L, std::vector<double>(M, 0.0));
    for (const auto& r : t.rows) {
        if (r.probs.size() != M) throw DimensionError("attribution: ragged trace rows");
        acc(r, rep.scores[r.layer]);
    }
    for (std::size_t l = 0; l < L; ++l) {
        double total = 0.0;
        for (double v : rep.scores[l]) total += v;
        if (!(total > 0.0))
            throw ArgumentError("attribution: layer " + std::to_string(l) + " has no routing mass");
        for (double& v : rep.scores[l]) v /= total;
    }
    rep.active_mask = t.meta.active_mask;
    if (rep.active_mask.size() != L) rep.active_mask.assign(L, ExpertMask(M, true));
    return rep;
}

} // namespace detail

/// Share of routing selections per expert. Normalizes by the number of
/// selections actually made, so masked layers with k' < k still sum to 1.
inline AttributionReport attribution_hard(const RoutingTrace& trace) {
    return detail::attribute(trace, AttributionMode::hard,
                             [](const TraceRow& r, std::vector<double>& a) {
                                 for (std::size_t e : r.selected) {
                                     if (e >= a.size())
                                         throw DimensionError("attribution: selected index out of range");
                                     a[e] += 1.0;
                                 }
                             });
}

/// Share of gate probability mass per expert.
inline AttributionReport attribution_soft(const RoutingTrace& trace) {
    return detail::attribute(trace, AttributionMode::soft,
                             [](const TraceRow& r, std::vector<double>& a) {
                                 for (std::size_t i = 0; i < a.size(); ++i) a[i] += r.probs[i];
                             });
}

inline AttributionReport attribute(const RoutingTrace& trace, AttributionMode mode) {
    return mode == AttributionMode::hard ? attribution_hard(trace) : attribution_soft(trace);
}

// ---------------------------------------------------------------------------
// Rankings
// ---------------------------------------------------------------------------

/// Per-layer expert order: higher score first, then lower index. Inactive
/// experts are left out.
inline std::vector<std::vector<std::size_t>> rank_layerwise(const AttributionReport& rep) {
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t l = 0; l < rep.num_layers(); ++l) {
        const auto& a = rep.scores[l];
        std::vector<std::size_t> order;
        for (std::size_t i = 0; i < a.size(); ++i)
            if (rep.active_mask.empty() || rep.active_mask[l][i]) order.push_back(i);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t x, std::size_t y) { return a[x] > a[y]; });
        out.push_back(std::move(order));
    }
    return out;
}

/// All (layer, expert) pairs by per-layer-normalized score, then lower layer,
/// then lower index. Scores are compared across layers as-is.
inline std::vector<ExpertRef> rank_global(const AttributionReport& rep) {
    std::vector<ExpertRef> all;
    for (std::size_t l = 0; l < rep.num_layers(); ++l)
        for (std::size_t i = 0; i < rep.scores[l].size(); ++i)
            if (rep.active_mask.empty() || rep.active_mask[l][i]) all.push_back({l, i});
    std::stable_sort(all.begin(), all.end(), [&](const ExpertRef& x, const ExpertRef& y) {
        return rep.scores[x.layer][x.expert] > rep.scores[y.layer][y.expert];
    });
    return all;
}

struct Ranking {
    RankScope scope = RankScope::layerwise;
    std::vector<std::vector<std::size_t>> layers; ///< filled for layerwise
    std::vector<ExpertRef> global;                ///< filled for global
};

inline Ranking rank_experts(const AttributionReport& rep, RankScope scope) {
    Ranking r;
    r.scope = scope;
    if (scope == RankScope::layerwise)
        r.layers = rank_layerwise(rep);
    else
        r.global = rank_global(rep);
    return r;
}

/// Mean over layers of the Shannon entropy (nats) of the attribution vector.
inline double attribution_entropy(const AttributionReport& rep) {
    if (rep.scores.empty()) return 0.0;
    double total = 0.0;
    for (const auto& a : rep.scores)
        for (double v : a)
            if (v > 0.0) total -= v * std::log(v);
    return total / static_cast<double>(rep.scores.size());
}

/// Sum of the top `n` scores per layer, averaged over layers.
inline double top_mass(const AttributionReport& rep, std::size_t n) {
    if (rep.scores.empty()) return 0.0;
    double total = 0.0;
    for (auto a : rep.scores) {
        std::sort(a.rbegin(), a.rend());
        for (std::size_t i = 0; i < std::min(n, a.size()); ++i) total += a[i];
    }
    return total / static_cast<double>(rep.scores.size());
}

inline json report_to_json(const AttributionReport& rep) {
    json global = json::array();
    for (const auto& r : rank_global(rep)) global.push_back({r.layer, r.expert});
    return json{{"format_version", kFormatVersion},
                {"kind", "moelab.attribution"},
                {"mode", to_string(rep.mode)},
                {"m", rep.token_count},
                {"source_model", rep.source},
                {"scores", rep.scores},
                {"active_mask", mask_to_json(rep.active_mask)},
                {"layer_rankings", rank_layerwise(rep)},
                {"global_ranking", global},
                {"note", "global ranking compares per-layer-normalized scores across layers "
                         "without cross-layer calibration"}};
}

inline AttributionReport report_from_json(const json& j) {
    try {
        AttributionReport rep;
        rep.mode = attribution_mode_from_string(j.at("mode").get<std::string>());
        rep.token_count = j.at("m").get<std::size_t>();
        rep.source = j.at("source_model").get<std::string>();
        rep.scores = j.at("scores").get<std::vector<std::vector<double>>>();
        rep.active_mask = mask_from_json(j.at("active_mask"));
        return rep;
    } catch (const json::exception& e) {
        throw IoError(std::string("attribution report: malformed document: ") + e.what());
    }
}

} // namespace moelab
