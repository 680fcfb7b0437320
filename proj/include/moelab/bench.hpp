// Copyright (c) 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Evaluation metrics, prunability curves and the attack / defense pipelines.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <ctime>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "moelab/attribution.hpp"
#include "moelab/checkpoint.hpp"
#include "moelab/dataset.hpp"
#include "moelab/errors.hpp"
#include "moelab/io.hpp"
#include "moelab/moe.hpp"
#include "moelab/pruning.hpp"
#include "moelab/realign.hpp"

namespace moelab {

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct EvalMetrics {
    double accuracy = 0.0;
    double mean_ce = 0.0;
    std::optional<double> normalized_score; ///< 100 * ref_ce / mean_ce
};

/// Accuracy and mean cross-entropy over `ids`. Pass `reference_ce` to get a
/// normalized score; asking for one without a reference is a state error.
inline EvalMetrics evaluate(const MoeModel& m, const Tensor2& inputs,
                            const std::vector<std::size_t>& labels, std::span<const std::size_t> ids,
                            std::optional<double> reference_ce = std::nullopt, bool normalize = false) {
    if (ids.empty()) throw ArgumentError("evaluate: empty split");
    if (normalize && !reference_ce) throw StateError("evaluate: no reference CE stored for normalization");
    const auto r = forward(m, inputs, ids);
    EvalMetrics out;
    std::size_t hit = 0;
    for (std::size_t b = 0; b < ids.size(); ++b) {
        const auto row = r.logits.row(b);
        const std::size_t y = labels.at(ids[b]);
        out.mean_ce += cross_entropy(row, y).loss;
        if (detail::argmax_lowest(row) == y) ++hit;
    }
    out.accuracy = static_cast<double>(hit) / static_cast<double>(ids.size());
    out.mean_ce /= static_cast<double>(ids.size());
    if (!std::isfinite(out.mean_ce)) throw NumericError("evaluate: non-finite cross-entropy");
    if (normalize) out.normalized_score = 100.0 * (*reference_ce / out.mean_ce);
    return out;
}

inline double retention(const EvalMetrics& pruned, const EvalMetrics& full) {
    if (!(full.accuracy > 0.0)) throw ArgumentError("retention: full-model accuracy is zero");
    return pruned.accuracy / full.accuracy;
}

inline json metrics_to_json(const EvalMetrics& m) {
    json j{{"accuracy", m.accuracy}, {"mean_ce", m.mean_ce}};
    j["normalized_score"] = m.normalized_score ? json(*m.normalized_score) : json(nullptr);
    return j;
}

// ---------------------------------------------------------------------------
// Prunability curves
// ---------------------------------------------------------------------------

struct CurvePoint {
    std::size_t k = 0; ///< experts retained per layer
    EvalMetrics metrics;
};

struct PrunabilityCurve {
    std::string strategy = "topk_layerwise";
    std::string source_report;
    std::vector<CurvePoint> points; ///< k = M down to 1
};

/// Mean relative accuracy loss against the first (largest k) point:
/// D = 1/(n-1) * sum_{j>0} max(0, P0 - Pj) / P0.
inline double resistance_score(std::span<const double> perf) {
    if (perf.empty()) throw ArgumentError("resistance_score: empty curve");
    const double top = perf.front();
    if (!(top > 0.0)) throw ArgumentError("resistance_score: P(M) must be > 0");
    if (perf.size() == 1) return 0.0;
    double d = 0.0;
    for (std::size_t i = 1; i < perf.size(); ++i) d += std::max(0.0, top - perf[i]) / top;
    return d / static_cast<double>(perf.size() - 1);
}

inline double resistance_score(const PrunabilityCurve& c) {
    std::vector<double> p;
    for (const auto& pt : c.points) p.push_back(pt.metrics.accuracy);
    return resistance_score(p);
}

/// Layerwise top-k sweep for k = M..1 on `ids`, each point pruned from a
/// fresh copy of `model`. Normalized scores use the unpruned model's CE.
inline PrunabilityCurve prunability_curve(const MoeModel& model, const Tensor2& inputs,
                                          const std::vector<std::size_t>& labels,
                                          std::span<const std::size_t> ids, const AttributionReport& rep) {
    const double ref = evaluate(model, inputs, labels, ids).mean_ce;
    PrunabilityCurve c;
    c.source_report = rep.source;
    std::size_t M = 0;
    for (std::size_t l = 0; l < model.config.num_layers; ++l) M = std::max(M, model.active_count(l));
    for (std::size_t k = M; k >= 1; --k) {
        const auto plan = make_plan(rep, PruneStrategy::topk_layerwise, PruneParams{k, 0.0});
        const auto pruned = apply_plan(model, plan);
        c.points.push_back({k, evaluate(pruned, inputs, labels, ids, ref, true)});
    }
    return c;
}

inline std::string curve_to_csv(const PrunabilityCurve& c, const std::string& comment = "") {
    std::ostringstream os;
    os.precision(17);
    if (!comment.empty()) os << "# " << comment << '\n';
    os << "k,accuracy,mean_ce,normalized_score\n";
    for (const auto& p : c.points) {
        os << p.k << ',' << p.metrics.accuracy << ',' << p.metrics.mean_ce << ',';
        if (p.metrics.normalized_score) os << *p.metrics.normalized_score;
        os << '\n';
    }
    return os.str();
}

inline json curve_to_json(const PrunabilityCurve& c) {
    json pts = json::array();
    for (const auto& p : c.points) {
        json j = metrics_to_json(p.metrics);
        j["k"] = p.k;
        pts.push_back(j);
    }
    return json{{"strategy", c.strategy},
                {"source_report", c.source_report},
                {"resistance", resistance_score(c)},
                {"points", pts}};
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
    DatasetSpec dataset{};
    ModelConfig model{};
    TrainSettings train{};

    AttributionMode attribution = AttributionMode::soft;
    std::vector<std::size_t> target_subtasks{0, 1}; ///< the adversary's task D

    PruneStrategy prune_strategy = PruneStrategy::topk_layerwise;
    PruneParams prune{2, 0.05};
    bool strict = false;

    std::size_t budget = 100;
    std::size_t al_batch = 5;
    ALStrategy active_strategy = ALStrategy::entropy;
    ScopeMode scope = ScopeMode::retained_experts_plus_router;
    FinetuneSettings finetune{};
    double recovery_target = 0.95;

    std::vector<std::string> arms{"none", "random", "active"};
    double defense_lambda_ent = 1.0;
    std::size_t defense_prune_k = 4;

    std::uint64_t seed = 1;
};

inline json experiment_config_to_json(const ExperimentConfig& c) {
    const auto& d = c.dataset;
    return json{
        {"dataset",
         {{"num_subtasks", d.num_subtasks},
          {"input_dim", d.input_dim},
          {"num_classes", d.num_classes},
          {"examples_per_subtask", d.examples_per_subtask},
          {"cluster_separation", d.cluster_separation},
          {"label_noise", d.label_noise},
          {"class_margin", d.class_margin}}},
        {"model", config_to_json(c.model)},
        {"train",
         {{"epochs", c.train.epochs},
          {"batch_size", c.train.batch_size},
          {"learning_rate", c.train.adam.learning_rate}}},
        {"attribution", {{"mode", to_string(c.attribution)}, {"target_subtasks", c.target_subtasks}}},
        {"pruning",
         {{"strategy", to_string(c.prune_strategy)},
          {"k", c.prune.k},
          {"tau", c.prune.tau},
          {"strict", c.strict}}},
        {"realign",
         {{"budget", c.budget},
          {"batch_size", c.al_batch},
          {"strategy", to_string(c.active_strategy)},
          {"scope", to_string(c.scope)},
          {"steps_per_round", c.finetune.steps},
          {"finetune_batch_size", c.finetune.batch_size},
          {"learning_rate", c.finetune.adam.learning_rate},
          {"recovery_target", c.recovery_target}}},
        {"pipeline",
         {{"arms", c.arms},
          {"defense_lambda_ent", c.defense_lambda_ent},
          {"defense_prune_k", c.defense_prune_k}}},
        {"seed", c.seed}};
}

inline std::string config_hash(const ExperimentConfig& c) {
    return hex64(fnv1a64(experiment_config_to_json(c).dump()));
}

// Stream ids under the master seed.
namespace streams {
inline constexpr std::uint64_t dataset = 0;
inline constexpr std::uint64_t init = 1;
inline constexpr std::uint64_t train = 2;
inline constexpr std::uint64_t random_plan = 3;
inline constexpr std::uint64_t arm_base = 100;
} // namespace streams

/// Rethrows any library error with "[stage] " prepended, keeping its type.
template <class F>
auto run_stage(const char* stage, F&& f) -> decltype(f()) {
    const auto tag = [&](const Error& e) { return std::string("[") + stage + "] " + e.what(); };
    try {
        return f();
    } catch (const DimensionError& e) {
        throw DimensionError(tag(e));
    } catch (const ArgumentError& e) {
        throw ArgumentError(tag(e));
    } catch (const StateError& e) {
        throw StateError(tag(e));
    } catch (const NumericError& e) {
        throw NumericError(tag(e));
    } catch (const IoError& e) {
        throw IoError(tag(e));
    } catch (const PlanError& e) {
        throw PlanError(tag(e));
    }
}

inline Dataset make_dataset(const ExperimentConfig& c) {
    DatasetSpec spec = c.dataset;
    spec.seed = derive_seed(c.seed, streams::dataset);
    return gen_dataset(spec);
}

/// Builds and trains a model on the full training split. Same seed and
/// config give the same model regardless of `lambda_ent`'s history.
inline MoeModel train_model(const ExperimentConfig& c, const Dataset& ds, double lambda_ent) {
    ModelConfig mc = c.model;
    mc.lambda_ent = lambda_ent;
    mc.seed = c.seed;
    if (mc.input_dim != ds.spec.input_dim || mc.num_classes != ds.spec.num_classes)
        throw DimensionError("model input_dim/num_classes do not match the dataset");
    Rng init(derive_seed(c.seed, streams::init));
    auto m = build_model(mc, init);
    Rng shuffle(derive_seed(c.seed, streams::train));
    train(m, ds.inputs, ds.labels, ds.train, c.train, shuffle);
    return m;
}

/// Members of `ids` whose subtask is one of `targets`, order preserved.
inline std::vector<std::size_t> target_ids(const Dataset& ds, std::span<const std::size_t> ids,
                                           std::span<const std::size_t> targets) {
    std::vector<std::size_t> out;
    for (std::size_t id : ids)
        if (std::find(targets.begin(), targets.end(), ds.subtask[id]) != targets.end()) out.push_back(id);
    return out;
}

// ---------------------------------------------------------------------------
// Pipelines
// ---------------------------------------------------------------------------

struct ArmResult {
    std::string arm; ///< none | random | active
    EvalMetrics metrics;
    double retention = 0.0;
    std::size_t labels_used = 0;
    std::optional<std::size_t> labels_to_target; ///< nullopt = not reached
    std::size_t labels_to_target_censored = 0;   ///< budget + batch when not reached
    ALState state;
};

/// Runs one re-alignment arm from `pruned`. `none` returns the pruned model's
/// metrics unchanged.
inline ArmResult run_arm(const std::string& arm, const MoeModel& pruned, const Dataset& ds,
                         std::span<const std::size_t> pool, std::span<const std::size_t> eval,
                         const EvalMetrics& full, double target_acc, const ExperimentConfig& c,
                         std::uint64_t stream, ALStrategy strategy) {
    ArmResult r;
    r.arm = arm;
    const double ref = full.mean_ce;
    if (arm == "none") {
        r.metrics = evaluate(pruned, ds.inputs, ds.labels, eval, ref, true);
        r.retention = retention(r.metrics, full);
        if (r.metrics.accuracy >= target_acc) r.labels_to_target = 0;
        r.labels_to_target_censored = r.labels_to_target.value_or(0);
        return r;
    }
    MoeModel m = pruned;
    r.state = ALState(std::vector<std::size_t>(pool.begin(), pool.end()), c.budget, c.al_batch, strategy);
    ALSettings s;
    s.scope = c.scope;
    s.finetune = c.finetune;
    s.eval_ids.assign(eval.begin(), eval.end());
    Rng rng(derive_seed(c.seed, stream));
    al_loop(m, ds, r.state, s, rng);
    r.metrics = evaluate(m, ds.inputs, ds.labels, eval, ref, true);
    r.retention = retention(r.metrics, full);
    r.labels_used = r.state.labeled.size();
    if (evaluate(pruned, ds.inputs, ds.labels, eval).accuracy >= target_acc)
        r.labels_to_target = 0;
    else
        r.labels_to_target = labels_to_target(r.state, target_acc);
    r.labels_to_target_censored = r.labels_to_target.value_or(c.budget + c.al_batch);
    return r;
}

inline json arm_to_json(const ArmResult& a, const ExperimentConfig& c) {
    json j{{"arm", a.arm},
           {"metrics", metrics_to_json(a.metrics)},
           {"retention", a.retention},
           {"labels_used", a.labels_used},
           {"labels_to_target", a.labels_to_target ? json(*a.labels_to_target) : json(nullptr)},
           {"labels_to_target_censored", a.labels_to_target_censored}};
    if (a.arm != "none") j["history"] = al_history_to_json(a.state, c.scope, c.finetune);
    return j;
}

struct AttackResult {
    EvalMetrics full;
    EvalMetrics pruned;
    AttributionReport report;
    PruningPlan plan;
    CompressionStats compression;
    PrunabilityCurve curve; ///< of the full model on the target test ids
    double target_accuracy = 0.0;
    std::vector<ArmResult> arms;

    const ArmResult* arm(const std::string& name) const {
        for (const auto& a : arms)
            if (a.arm == name) return &a;
        return nullptr;
    }
};

/// Train -> trace -> attribute -> prune -> evaluate -> re-align arms.
/// `model` may supply an already-trained full model.
inline AttackResult attack_pipeline(const ExperimentConfig& c, const std::optional<MoeModel>& model = std::nullopt) {
    AttackResult out;
    const auto ds = run_stage("dataset", [&] { return make_dataset(c); });
    const MoeModel full = model ? *model : run_stage("train", [&] {
        return train_model(c, ds, c.model.lambda_ent);
    });
    const auto attrib_ids = target_ids(ds, ds.pool, c.target_subtasks);
    const auto eval_ids = target_ids(ds, ds.test, c.target_subtasks);
    out.report = run_stage("attribute", [&] {
        const auto t = log_trace(full, ds.inputs, attrib_ids, "synthetic");
        return attribute(t, c.attribution);
    });
    out.plan = run_stage("prune", [&] { return make_plan(out.report, c.prune_strategy, c.prune, c.strict); });
    out.compression = compression_stats(out.plan, full.config);
    const auto pruned = run_stage("prune", [&] { return apply_plan(full, out.plan); });
    run_stage("evaluate", [&] {
        out.full = evaluate(full, ds.inputs, ds.labels, eval_ids);
        out.full.normalized_score = 100.0;
        out.pruned = evaluate(pruned, ds.inputs, ds.labels, eval_ids, out.full.mean_ce, true);
    });
    out.curve = run_stage("curve", [&] {
        return prunability_curve(full, ds.inputs, ds.labels, eval_ids, out.report);
    });
    out.target_accuracy = c.recovery_target * out.full.accuracy;
    for (std::size_t i = 0; i < c.arms.size(); ++i) {
        const auto& name = c.arms[i];
        if (name != "none" && name != "random" && name != "active")
            throw ArgumentError("attack_pipeline: unknown arm '" + name + "'");
        const auto strategy = name == "active" ? c.active_strategy : ALStrategy::random;
        out.arms.push_back(run_stage("realign", [&] {
            return run_arm(name, pruned, ds, attrib_ids, eval_ids, out.full, out.target_accuracy, c,
                           streams::arm_base + i, strategy);
        }));
    }
    return out;
}

struct DefenseArm {
    std::string name;
    double lambda_ent = 0.0;
    EvalMetrics full;
    AttributionReport report;
    double attribution_entropy = 0.0;
    double gate_entropy = 0.0;
    PrunabilityCurve curve;
    double resistance = 0.0;
    EvalMetrics pruned;     ///< at defense_prune_k per layer
    double drop = 0.0;      ///< full - pruned accuracy
    ArmResult recovery;     ///< equal-budget AL from the pruned model
};

struct DefenseResult {
    DefenseArm standard;
    DefenseArm entangled;
};

inline DefenseArm defense_arm(const std::string& name, double lambda_ent, const ExperimentConfig& c,
                              const Dataset& ds, std::uint64_t stream) {
    DefenseArm a;
    a.name = name;
    a.lambda_ent = lambda_ent;
    const auto full = run_stage("train", [&] { return train_model(c, ds, lambda_ent); });
    const auto attrib_ids = target_ids(ds, ds.pool, c.target_subtasks);
    const auto eval_ids = target_ids(ds, ds.test, c.target_subtasks);
    a.report = run_stage("attribute", [&] {
        return attribute(log_trace(full, ds.inputs, attrib_ids, "synthetic"), c.attribution);
    });
    a.attribution_entropy = attribution_entropy(a.report);
    a.gate_entropy = mean_gate_entropy(full, ds.inputs, attrib_ids);
    a.curve = run_stage("curve", [&] { return prunability_curve(full, ds.inputs, ds.labels, eval_ids, a.report); });
    a.resistance = resistance_score(a.curve);
    a.full = a.curve.points.front().metrics;
    const auto plan = make_plan(a.report, PruneStrategy::topk_layerwise, PruneParams{c.defense_prune_k, 0.0});
    const auto pruned = apply_plan(full, plan);
    a.pruned = evaluate(pruned, ds.inputs, ds.labels, eval_ids, a.full.mean_ce, true);
    a.drop = a.full.accuracy - a.pruned.accuracy;
    a.recovery = run_stage("realign", [&] {
        return run_arm("active", pruned, ds, attrib_ids, eval_ids, a.full,
                       c.recovery_target * a.full.accuracy, c, stream, c.active_strategy);
    });
    return a;
}

/// Paired standard (lambda_ent = 0) vs entangled models from the same seed.
inline DefenseResult defense_pipeline(const ExperimentConfig& c) {
    const auto ds = run_stage("dataset", [&] { return make_dataset(c); });
    DefenseResult r;
    r.standard = defense_arm("standard", 0.0, c, ds, streams::arm_base);
    r.entangled = defense_arm("entangled", c.defense_lambda_ent, c, ds, streams::arm_base);
    return r;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// Key holding the only non-deterministic value in a report.
inline constexpr const char* kTimestampKey = "generated_at";

inline json report_header(const ExperimentConfig& c, const std::string& mode) {
    return json{{"format_version", kFormatVersion},
                {"kind", "moelab.experiment"},
                {"mode", mode},
                {kTimestampKey, utc_timestamp()},
                {"config_hash", config_hash(c)},
                {"seed", c.seed},
                {"config", experiment_config_to_json(c)},
                {"conventions",
                 {{"normalized_score", "100 * reference_ce / ce; above 100 is better than the full model"},
                  {"labels", "cumulative labels at the first round reaching the target; "
                             "censored at budget + batch_size when never reached"},
                  {"resistance", "mean relative accuracy loss over k = M-1..1 vs k = M"}}}};
}

inline json attack_to_json(const AttackResult& a, const ExperimentConfig& c) {
    json j = report_header(c, "attack");
    j["full"] = metrics_to_json(a.full);
    j["pruned"] = metrics_to_json(a.pruned);
    j["pruned_retention"] = retention(a.pruned, a.full);
    j["attribution"] = report_to_json(a.report);
    j["plan"] = plan_to_json(a.plan);
    j["compression"] = {{"experts_removed", a.compression.experts_removed},
                        {"expert_params_removed_fraction", a.compression.expert_params_removed_fraction},
                        {"total_params_removed_fraction", a.compression.total_params_removed_fraction}};
    j["curve"] = curve_to_json(a.curve);
    j["target_accuracy"] = a.target_accuracy;
    json arms = json::array();
    for (const auto& arm : a.arms) arms.push_back(arm_to_json(arm, c));
    j["arms"] = arms;
    const auto* rnd = a.arm("random");
    const auto* act = a.arm("active");
    if (rnd && act && rnd->labels_to_target_censored > 0)
        j["label_ratio_active_over_random"] =
            static_cast<double>(act->labels_to_target_censored) /
            static_cast<double>(rnd->labels_to_target_censored);
    return j;
}

inline json defense_arm_to_json(const DefenseArm& a, const ExperimentConfig& c) {
    return json{{"name", a.name},
                {"lambda_ent", a.lambda_ent},
                {"full", metrics_to_json(a.full)},
                {"attribution_entropy", a.attribution_entropy},
                {"gate_entropy", a.gate_entropy},
                {"attribution", report_to_json(a.report)},
                {"curve", curve_to_json(a.curve)},
                {"resistance", a.resistance},
                {"pruned_k", c.defense_prune_k},
                {"pruned", metrics_to_json(a.pruned)},
                {"drop", a.drop},
                {"recovery", arm_to_json(a.recovery, c)}};
}

inline json defense_to_json(const DefenseResult& r, const ExperimentConfig& c) {
    json j = report_header(c, "defense");
    j["series"] = {{"standard", defense_arm_to_json(r.standard, c)},
                   {"entangled", defense_arm_to_json(r.entangled, c)}};
    return j;
}

} // namespace moelab
