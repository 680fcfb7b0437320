// Copyright (c) 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0
//
// moelab command-line driver. One subcommand per attack stage plus the
// composite pipelines. Exit codes: 0 ok, 1 usage/config, 2 I/O, 3 numeric.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "moelab/attribution.hpp"
#include "moelab/bench.hpp"
#include "moelab/checkpoint.hpp"
#include "moelab/config.hpp"
#include "moelab/dataset.hpp"
#include "moelab/io.hpp"
#include "moelab/pruning.hpp"
#include "moelab/realign.hpp"

namespace fs = std::filesystem;
using namespace moelab;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool summary = false;
    bool strict = false;
};

struct Context {
    RunConfig rc;
    fs::path out;
    bool summary = false;
    json provenance;

    const ExperimentConfig& exp() const { return rc.experiment; }
    fs::path at(const std::string& name) const { return out / name; }
};

Context make_context(const Common& c) {
    Context ctx;
    ctx.rc = c.config.empty() ? RunConfig{} : load_config(c.config);
    if (c.seed) {
        ctx.rc.experiment.seed = *c.seed;
        ctx.rc.experiment.model.seed = *c.seed;
    }
    if (c.strict) ctx.rc.experiment.strict = true;
    validate_config(ctx.rc);
    ctx.out = c.out.empty() ? ctx.rc.out_dir : fs::path(c.out);
    ctx.summary = c.summary;
    ctx.provenance = json{{"config_hash", config_hash(ctx.rc.experiment)}, {"seed", ctx.rc.experiment.seed}};
    return ctx;
}

fs::path input_or(const std::string& given, const Context& ctx, const std::string& fallback) {
    return given.empty() ? ctx.at(fallback) : fs::path(given);
}

json with_provenance(json doc, const Context& ctx) {
    doc["provenance"] = ctx.provenance;
    return doc;
}

struct Split {
    Dataset ds;
    std::vector<std::size_t> attrib;
    std::vector<std::size_t> eval;
};

Split target_split(const Context& ctx) {
    Split s{make_dataset(ctx.exp()), {}, {}};
    s.attrib = target_ids(s.ds, s.ds.pool, ctx.exp().target_subtasks);
    s.eval = target_ids(s.ds, s.ds.test, ctx.exp().target_subtasks);
    return s;
}

void check_dims(const MoeModel& m, const Dataset& ds) {
    if (m.config.input_dim != ds.spec.input_dim || m.config.num_classes != ds.spec.num_classes)
        throw DimensionError("model dimensions do not match the configured dataset");
}

// --- stages ------------------------------------------------------------------

void cmd_train(const Context& ctx) {
    const auto ds = make_dataset(ctx.exp());
    const auto m = train_model(ctx.exp(), ds, ctx.exp().model.lambda_ent);
    const auto eval = target_ids(ds, ds.test, ctx.exp().target_subtasks);
    const auto metrics = evaluate(m, ds.inputs, ds.labels, ds.test);
    save_checkpoint(ctx.at("model.json"), m, ctx.provenance);
    std::printf("train: wrote %s (test accuracy %.4f, target-task accuracy %.4f)\n",
                ctx.at("model.json").c_str(), metrics.accuracy,
                evaluate(m, ds.inputs, ds.labels, eval).accuracy);
}

void cmd_trace(const Context& ctx, const std::string& model_path) {
    const auto m = load_checkpoint(input_or(model_path, ctx, "model.json"));
    const auto s = target_split(ctx);
    check_dims(m, s.ds);
    const auto t = log_trace(m, s.ds.inputs, s.attrib, "synthetic:" + ctx.provenance["config_hash"].get<std::string>(),
                             ctx.at("trace.jsonl"), ctx.provenance);
    std::printf("trace: wrote %s (%zu rows over %zu examples)\n", ctx.at("trace.jsonl").c_str(), t.rows.size(),
                t.meta.token_count);
}

void cmd_attribute(const Context& ctx, const std::string& trace_path) {
    const auto t = read_trace(input_or(trace_path, ctx, "trace.jsonl"));
    const auto rep = attribute(t, ctx.exp().attribution);
    write_json(ctx.at("attribution.json"), with_provenance(report_to_json(rep), ctx));
    std::printf("attribute: wrote %s (%s, m=%zu, mean entropy %.4f)\n", ctx.at("attribution.json").c_str(),
                to_string(rep.mode).c_str(), rep.token_count, attribution_entropy(rep));
}

void cmd_prune(const Context& ctx, const std::string& report_path, const std::string& model_path) {
    const auto rep = report_from_json(read_json(input_or(report_path, ctx, "attribution.json")));
    const auto plan = make_plan(rep, ctx.exp().prune_strategy, ctx.exp().prune, ctx.exp().strict);
    for (const auto& w : plan.warnings) std::cerr << "warning: " << w << '\n';
    write_json(ctx.at("plan.json"), with_provenance(plan_to_json(plan), ctx));
    const auto m = load_checkpoint(input_or(model_path, ctx, "model.json"));
    const auto pruned = apply_plan(m, plan);
    save_checkpoint(ctx.at("pruned_model.json"), pruned, ctx.provenance);
    const auto st = compression_stats(plan, m.config);
    std::printf("prune: wrote %s and %s (%zu experts removed, %.1f%% of parameters)\n",
                ctx.at("plan.json").c_str(), ctx.at("pruned_model.json").c_str(), st.experts_removed,
                100.0 * st.total_params_removed_fraction);
}

void cmd_realign(const Context& ctx, const std::string& model_path) {
    auto m = load_checkpoint(input_or(model_path, ctx, "pruned_model.json"));
    const auto s = target_split(ctx);
    check_dims(m, s.ds);
    const auto& e = ctx.exp();
    ALState state(s.attrib, e.budget, e.al_batch, e.active_strategy);
    ALSettings al;
    al.scope = e.scope;
    al.finetune = e.finetune;
    al.eval_ids = s.eval;
    Rng rng(derive_seed(e.seed, streams::arm_base));
    al_loop(m, s.ds, state, al, rng);
    write_json(ctx.at("al_history.json"), with_provenance(al_history_to_json(state, e.scope, e.finetune), ctx));
    save_checkpoint(ctx.at("realigned_model.json"), m, ctx.provenance);
    std::printf("realign: wrote %s (%zu rounds, %zu labels, final accuracy %.4f)\n",
                ctx.at("realigned_model.json").c_str(), state.rounds.size(), state.labeled.size(),
                state.rounds.empty() ? accuracy(m, s.ds.inputs, s.ds.labels, s.eval)
                                     : state.rounds.back().eval_metric);
}

void cmd_eval(const Context& ctx, const std::string& model_path, const std::string& reference_path) {
    const auto m = load_checkpoint(input_or(model_path, ctx, "model.json"));
    const auto s = target_split(ctx);
    check_dims(m, s.ds);
    std::optional<double> ref;
    if (!reference_path.empty())
        ref = evaluate(load_checkpoint(reference_path), s.ds.inputs, s.ds.labels, s.eval).mean_ce;
    const auto metrics = evaluate(m, s.ds.inputs, s.ds.labels, s.eval, ref, ref.has_value());
    json doc = metrics_to_json(metrics);
    doc["format_version"] = kFormatVersion;
    doc["kind"] = "moelab.metrics";
    doc["split"] = "test (target subtasks)";
    doc["examples"] = s.eval.size();
    write_json(ctx.at("metrics.json"), with_provenance(doc, ctx));
    std::printf("eval: accuracy %.4f mean_ce %.4f", metrics.accuracy, metrics.mean_ce);
    if (metrics.normalized_score) std::printf(" normalized %.2f", *metrics.normalized_score);
    std::printf("\n");
}

std::string csv_comment(const Context& ctx, const std::string& what) {
    return "moelab " + what + " config_hash=" + ctx.provenance["config_hash"].get<std::string>() +
           " seed=" + std::to_string(ctx.exp().seed);
}

void cmd_curve(const Context& ctx, const std::string& model_path, const std::string& report_path) {
    const auto m = load_checkpoint(input_or(model_path, ctx, "model.json"));
    const auto s = target_split(ctx);
    check_dims(m, s.ds);
    AttributionReport rep;
    if (!report_path.empty() || fs::exists(ctx.at("attribution.json")))
        rep = report_from_json(read_json(input_or(report_path, ctx, "attribution.json")));
    else
        rep = attribute(log_trace(m, s.ds.inputs, s.attrib, "synthetic"), ctx.exp().attribution);
    const auto curve = prunability_curve(m, s.ds.inputs, s.ds.labels, s.eval, rep);
    atomic_write_text(ctx.at("curve.csv"), curve_to_csv(curve, csv_comment(ctx, "prunability curve")));
    std::printf("curve: wrote %s (%zu points, resistance %.4f)\n", ctx.at("curve.csv").c_str(),
                curve.points.size(), resistance_score(curve));
}

void cmd_pipeline(const Context& ctx, const std::string& mode) {
    const auto& e = ctx.exp();
    if (mode == "attack") {
        const auto r = attack_pipeline(e);
        write_json(ctx.at("attack_report.json"), attack_to_json(r, e));
        atomic_write_text(ctx.at("curve.csv"), curve_to_csv(r.curve, csv_comment(ctx, "attack curve")));
        std::printf("pipeline attack: wrote %s\n", ctx.at("attack_report.json").c_str());
        if (ctx.summary) {
            std::printf("  full accuracy      %.4f\n", r.full.accuracy);
            std::printf("  pruned accuracy    %.4f (retention %.4f)\n", r.pruned.accuracy,
                        retention(r.pruned, r.full));
            std::printf("  recovery target    %.4f\n", r.target_accuracy);
            for (const auto& a : r.arms)
                std::printf("  arm %-8s accuracy %.4f labels_used %zu labels_to_target %s\n", a.arm.c_str(),
                            a.metrics.accuracy, a.labels_used,
                            a.labels_to_target ? std::to_string(*a.labels_to_target).c_str() : "not reached");
            std::printf("  resistance         %.4f\n", resistance_score(r.curve));
        }
    } else {
        const auto r = defense_pipeline(e);
        write_json(ctx.at("defense_report.json"), defense_to_json(r, e));
        atomic_write_text(ctx.at("curve_standard.csv"),
                          curve_to_csv(r.standard.curve, csv_comment(ctx, "standard curve")));
        atomic_write_text(ctx.at("curve_entangled.csv"),
                          curve_to_csv(r.entangled.curve, csv_comment(ctx, "entangled curve")));
        std::printf("pipeline defense: wrote %s\n", ctx.at("defense_report.json").c_str());
        if (ctx.summary) {
            for (const auto* a : {&r.standard, &r.entangled})
                std::printf("  %-9s accuracy %.4f attribution_entropy %.4f resistance %.4f drop@k=%zu %.4f "
                            "recovered_retention %.4f\n",
                            a->name.c_str(), a->full.accuracy, a->attribution_entropy, a->resistance,
                            e.defense_prune_k, a->drop, a->recovery.retention);
        }
    }
}

int run(int argc, char** argv) {
    CLI::App app{"moelab: pruning attacks and defenses on a toy mixture-of-experts model"};
    app.require_subcommand(1);
    Common common;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", common.config, "INI run configuration");
        sub->add_option("--seed", common.seed, "master seed (overrides [run] seed)");
        sub->add_option("--out", common.out, "output directory (overrides [run] out)");
        sub->add_flag("--summary", common.summary, "print key numbers");
        sub->add_flag("--strict", common.strict, "fail instead of falling back when a pruning rule empties a layer");
    };
    std::string model, trace, report, reference, mode;

    auto* train = app.add_subcommand("train", "train a model on the synthetic benchmark");
    auto* trace_cmd = app.add_subcommand("trace", "log routing decisions over the attribution set");
    trace_cmd->add_option("--model", model, "checkpoint (default <out>/model.json)");
    auto* attr = app.add_subcommand("attribute", "compute expert attribution from a trace");
    attr->add_option("--trace", trace, "trace file (default <out>/trace.jsonl)");
    auto* prune = app.add_subcommand("prune", "build a pruning plan and apply it");
    prune->add_option("--report", report, "attribution report (default <out>/attribution.json)");
    prune->add_option("--model", model, "checkpoint (default <out>/model.json)");
    auto* realign = app.add_subcommand("realign", "active-learning re-alignment of a pruned model");
    realign->add_option("--model", model, "checkpoint (default <out>/pruned_model.json)");
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the target test split");
    eval->add_option("--model", model, "checkpoint (default <out>/model.json)");
    eval->add_option("--reference", reference, "full-model checkpoint for normalized scores");
    auto* curve = app.add_subcommand("curve", "prunability curve for k = M..1");
    curve->add_option("--model", model, "checkpoint (default <out>/model.json)");
    curve->add_option("--report", report, "attribution report (default <out>/attribution.json if present)");
    auto* pipe = app.add_subcommand("pipeline", "run the attack or defense experiment end to end");
    pipe->add_option("mode", mode, "attack | defense")->required()->check(CLI::IsMember({"attack", "defense"}));
    for (auto* sub : {train, trace_cmd, attr, prune, realign, eval, curve, pipe}) add_common(sub);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    const auto ctx = make_context(common);
    if (*train) cmd_train(ctx);
    else if (*trace_cmd) cmd_trace(ctx, model);
    else if (*attr) cmd_attribute(ctx, trace);
    else if (*prune) cmd_prune(ctx, report, model);
    else if (*realign) cmd_realign(ctx, model);
    else if (*eval) cmd_eval(ctx, model, reference);
    else if (*curve) cmd_curve(ctx, model, report);
    else if (*pipe) cmd_pipeline(ctx, mode);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
