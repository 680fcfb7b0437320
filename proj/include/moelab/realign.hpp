// Copyright (c) 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Post-pruning recovery: scoped fine-tuning and the pool-based active
// learning loop.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "moelab/checkpoint.hpp"
#include "moelab/dataset.hpp"
#include "moelab/errors.hpp"
#include "moelab/io.hpp"
#include "moelab/moe.hpp"

namespace moelab {

enum class ALStrategy { entropy, margin, random };
enum class ScopeMode { retained_experts, retained_experts_plus_router, adapter_only };

inline std::string to_string(ALStrategy s) {
    switch (s) {
    case ALStrategy::entropy: return "entropy";
    case ALStrategy::margin: return "margin";
    case ALStrategy::random: return "random";
    }
    return "?";
}

inline ALStrategy al_strategy_from_string(const std::string& s) {
    if (s == "entropy") return ALStrategy::entropy;
    if (s == "margin") return ALStrategy::margin;
    if (s == "random") return ALStrategy::random;
    throw ArgumentError("unknown AL strategy '" + s + "' (expected entropy|margin|random)");
}

inline std::string to_string(ScopeMode s) {
    switch (s) {
    case ScopeMode::retained_experts: return "retained_experts";
    case ScopeMode::retained_experts_plus_router: return "retained_experts_plus_router";
    case ScopeMode::adapter_only: return "adapter_only";
    }
    return "?";
}

inline ScopeMode scope_from_string(const std::string& s) {
    if (s == "retained_experts") return ScopeMode::retained_experts;
    if (s == "retained_experts_plus_router") return ScopeMode::retained_experts_plus_router;
    if (s == "adapter_only") return ScopeMode::adapter_only;
    throw ArgumentError("unknown fine-tune scope '" + s +
                        "' (expected retained_experts|retained_experts_plus_router|adapter_only)");
}

/// Uncertainty of a class distribution. Entropy in nats, or 1 - (p1 - p2).
/// `random` has no score and is rejected.
inline double uncertainty(std::span<const double> probs, ALStrategy kind) {
    if (probs.empty()) throw ArgumentError("uncertainty: empty distribution");
    double sum = 0.0;
    for (double p : probs) {
        if (!(p >= 0.0)) throw ArgumentError("uncertainty: negative or NaN probability");
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-6)
        throw ArgumentError("uncertainty: probabilities sum to " + std::to_string(sum));
    switch (kind) {
    case ALStrategy::entropy: {
        double h = 0.0;
        for (double p : probs)
            if (p > 0.0) h -= p * std::log(p);
        return std::max(0.0, h);
    }
    case ALStrategy::margin: {
        double p1 = 0.0, p2 = 0.0;
        for (double p : probs) {
            if (p > p1) {
                p2 = p1;
                p1 = p;
            } else if (p > p2) {
                p2 = p;
            }
        }
        return 1.0 - (p1 - p2);
    }
    case ALStrategy::random: break;
    }
    throw ArgumentError("uncertainty: random strategy has no score");
}

struct ALRound {
    std::size_t round = 0;
    std::vector<std::size_t> selected;
    std::vector<double> scores; ///< u(x) of the selected ids; empty for random
    std::size_t labels_used = 0; ///< cumulative
    double eval_metric = 0.0;    ///< accuracy on the held-out ids
};

struct ALState {
    std::vector<std::size_t> pool;
    std::vector<std::pair<std::size_t, std::size_t>> labeled; ///< (id, label)
    std::size_t budget = 0;
    std::size_t batch_size = 1;
    ALStrategy strategy = ALStrategy::entropy;
    std::vector<ALRound> rounds;

    ALState() = default;
    ALState(std::vector<std::size_t> pool_ids, std::size_t B, std::size_t b, ALStrategy s)
        : pool(std::move(pool_ids)), budget(B), batch_size(b), strategy(s) {
        if (b == 0) throw ArgumentError("ALState: batch size must be >= 1");
    }

    std::size_t remaining() const { return budget - std::min(budget, labeled.size()); }
    bool done() const { return remaining() == 0 || pool.empty(); }
};

/// Picks the next batch from `state.pool` and removes it. `scores[i]` belongs
/// to `state.pool[i]`; ignored for the random strategy.
inline std::vector<std::size_t> select_batch(ALState& state, std::span<const double> scores, Rng& rng) {
    if (state.pool.empty()) throw StateError("select_batch: unlabeled pool is empty");
    const std::size_t n = std::min({state.batch_size, state.remaining(), state.pool.size()});
    std::vector<std::size_t> order(state.pool.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (state.strategy == ALStrategy::random) {
        rng.shuffle(order);
    } else {
        if (scores.size() != state.pool.size())
            throw DimensionError("select_batch: " + std::to_string(scores.size()) + " scores for pool of " +
                                 std::to_string(state.pool.size()));
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (scores[a] != scores[b]) return scores[a] > scores[b];
            return state.pool[a] < state.pool[b];
        });
    }
    order.resize(n);
    std::vector<std::size_t> picked;
    std::vector<bool> take(state.pool.size(), false);
    for (std::size_t i : order) {
        picked.push_back(state.pool[i]);
        take[i] = true;
    }
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < state.pool.size(); ++i)
        if (!take[i]) rest.push_back(state.pool[i]);
    state.pool = std::move(rest);
    return picked;
}

inline std::vector<std::size_t> oracle_label(const Dataset& ds, std::span<const std::size_t> ids) {
    std::vector<std::size_t> out;
    out.reserve(ids.size());
    for (std::size_t id : ids) {
        if (id >= ds.size()) throw ArgumentError("oracle_label: unknown example id " + std::to_string(id));
        out.push_back(ds.labels[id]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

/// Flattened 0/1 mask (same order as `flatten`) of the parameters `mode`
/// may change. Only active experts are ever in scope.
inline std::vector<double> trainable_mask(const MoeModel& m, ScopeMode mode) {
    std::vector<double> mask;
    mask.reserve(param_count(m.params));
    visit_params(m.params, [&](const std::string& name, const Tensor2& t) {
        double on = 0.0;
        std::size_t l = 0, e = 0;
        char kind[16] = {};
        const bool expert_like =
            std::sscanf(name.c_str(), "layers.%zu.%15[a-z].%zu.", &l, kind, &e) == 3;
        if (expert_like && m.active_mask[l][e]) {
            const std::string k(kind);
            if (k == "experts" && mode != ScopeMode::adapter_only) on = 1.0;
            if (k == "adapters" && mode == ScopeMode::adapter_only) on = 1.0;
        }
        const bool router = name.size() > 7 && name.ends_with(".router") &&
                            std::sscanf(name.c_str(), "layers.%zu.", &l) == 1;
        if (mode == ScopeMode::retained_experts_plus_router && router) {
            for (std::size_t r = 0; r < t.rows(); ++r)
                for (std::size_t c = 0; c < t.cols(); ++c) mask.push_back(m.active_mask[l][r] ? 1.0 : 0.0);
            return;
        }
        mask.insert(mask.end(), t.size(), on);
    });
    return mask;
}

struct FinetuneSettings {
    std::size_t steps = 200;
    std::size_t batch_size = 32;
    AdamSettings adam{};
};

/// `steps` masked Adam steps on CE over the labeled set. Minibatches walk a
/// reshuffled copy of the set. `state` carries optimizer moments between
/// calls; it is resized if the parameter count changed.
inline void fine_tune(MoeModel& m, const Tensor2& inputs, const std::vector<std::size_t>& labels,
                      std::span<const std::size_t> labeled_ids, ScopeMode scope,
                      const FinetuneSettings& s, OptimState& state, Rng& rng) {
    if (labeled_ids.empty()) throw ArgumentError("fine_tune: empty labeled set");
    if (s.batch_size == 0) throw ArgumentError("fine_tune: batch_size must be >= 1");
    if (scope == ScopeMode::adapter_only) attach_adapters(m);
    if (s.steps == 0) return;
    const auto mask = trainable_mask(m, scope);
    if (state.first_moment.size() != mask.size()) state = OptimState(state.settings, mask.size());
    std::vector<std::size_t> order(labeled_ids.begin(), labeled_ids.end());
    const std::size_t bs = std::min(s.batch_size, order.size());
    std::size_t cursor = order.size();
    for (std::size_t step = 0; step < s.steps; ++step) {
        if (cursor + bs > order.size()) {
            rng.shuffle(order);
            cursor = 0;
        }
        std::span<const std::size_t> batch(order.data() + cursor, bs);
        cursor += bs;
        gradient_step(m, inputs, labels, batch, LossWeights{}, state, mask);
    }
}

/// Class probabilities for each id.
inline std::vector<std::vector<double>> predict_proba(const MoeModel& m, const Tensor2& inputs,
                                                      std::span<const std::size_t> ids) {
    const auto r = forward(m, inputs, ids);
    std::vector<std::vector<double>> out;
    out.reserve(ids.size());
    for (std::size_t b = 0; b < ids.size(); ++b) out.push_back(softmax(r.logits.row(b)));
    return out;
}

struct ALSettings {
    ScopeMode scope = ScopeMode::retained_experts_plus_router;
    FinetuneSettings finetune{};
    std::vector<std::size_t> eval_ids; ///< held-out ids for the per-round metric
};

/// Score -> select -> label -> fine-tune on everything labeled so far, until
/// the budget or the pool runs out. Optimizer state persists across rounds.
inline void al_loop(MoeModel& m, const Dataset& ds, ALState& state, const ALSettings& s, Rng& rng) {
    if (s.finetune.steps > 0 && s.scope == ScopeMode::adapter_only) attach_adapters(m);
    OptimState opt(s.finetune.adam, param_count(m.params));
    std::vector<std::size_t> labeled_ids;
    for (const auto& [id, _] : state.labeled) labeled_ids.push_back(id);
    while (!state.done()) {
        std::vector<double> scores;
        if (state.strategy != ALStrategy::random) {
            const auto probs = predict_proba(m, ds.inputs, state.pool);
            scores.reserve(probs.size());
            for (const auto& p : probs) scores.push_back(uncertainty(p, state.strategy));
        }
        std::vector<double> pool_scores = scores;
        const std::vector<std::size_t> pool_before = state.pool;
        const auto picked = select_batch(state, pool_scores, rng);
        const auto got = oracle_label(ds, picked);
        ALRound rec;
        rec.round = state.rounds.size() + 1;
        rec.selected = picked;
        if (!scores.empty()) {
            for (std::size_t id : picked) {
                const auto it = std::find(pool_before.begin(), pool_before.end(), id);
                rec.scores.push_back(scores[static_cast<std::size_t>(it - pool_before.begin())]);
            }
        }
        for (std::size_t i = 0; i < picked.size(); ++i) {
            state.labeled.emplace_back(picked[i], got[i]);
            labeled_ids.push_back(picked[i]);
        }
        fine_tune(m, ds.inputs, ds.labels, labeled_ids, s.scope, s.finetune, opt, rng);
        rec.labels_used = state.labeled.size();
        rec.eval_metric = accuracy(m, ds.inputs, ds.labels, s.eval_ids);
        state.rounds.push_back(std::move(rec));
    }
}

/// Cumulative labels at the first round whose metric reaches `target`.
/// Returns nullopt when no round does.
inline std::optional<std::size_t> labels_to_target(const ALState& state, double target) {
    for (const auto& r : state.rounds)
        if (r.eval_metric >= target) return r.labels_used;
    return std::nullopt;
}

inline json al_history_to_json(const ALState& st, ScopeMode scope, const FinetuneSettings& ft) {
    json rounds = json::array();
    for (const auto& r : st.rounds)
        rounds.push_back(json{{"round", r.round},
                              {"strategy", to_string(st.strategy)},
                              {"selected_ids", r.selected},
                              {"scores", r.scores},
                              {"labels_used_cumulative", r.labels_used},
                              {"eval_metric", r.eval_metric}});
    return json{{"format_version", kFormatVersion},
                {"kind", "moelab.al_history"},
                {"strategy", to_string(st.strategy)},
                {"budget", st.budget},
                {"batch_size", st.batch_size},
                {"scope", to_string(scope)},
                {"steps_per_round", ft.steps},
                {"finetune_batch_size", ft.batch_size},
                {"learning_rate", ft.adam.learning_rate},
                {"optimizer_reset", "never (state carried across rounds)"},
                {"labels_counted", "cumulative"},
                {"eval_metric", "accuracy"},
                {"rounds", rounds}};
}

} // namespace moelab
