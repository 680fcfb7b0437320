// Copyright (c) 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0
//
// INI run configuration. Every key has a default (see configs/default.ini);
// unknown sections or keys are rejected so typos cannot pass silently.

#pragma once

#include <charconv>
#include <cmath>
#include <functional>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "moelab/bench.hpp"
#include "moelab/errors.hpp"

namespace moelab {

struct RunConfig {
    ExperimentConfig experiment;
    std::filesystem::path out_dir = "runs/default";
};

namespace config_detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& raw) {
    const auto v = trim(raw);
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc() || p != v.data() + v.size())
        throw ArgumentError("config: " + key + " expects a non-negative integer, got '" + raw + "'");
    return out;
}

inline double parse_double(const std::string& key, const std::string& raw) {
    const auto v = trim(raw);
    char* end = nullptr;
    const double out = std::strtod(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(out))
        throw ArgumentError("config: " + key + " expects a finite number, got '" + raw + "'");
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& raw) {
    const auto v = trim(raw);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ArgumentError("config: " + key + " expects true|false, got '" + raw + "'");
}

inline std::vector<std::string> parse_list(const std::string& raw) {
    std::vector<std::string> out;
    std::stringstream ss(raw);
    std::string item;
    while (std::getline(ss, item, ','))
        if (auto t = trim(item); !t.empty()) out.push_back(t);
    return out;
}

} // namespace config_detail

inline void validate_config(const RunConfig& rc) {
    const auto& e = rc.experiment;
    auto fail = [](const std::string& m) { throw ArgumentError("config: " + m); };
    e.dataset.validate();
    e.model.validate();
    if (e.train.batch_size == 0) fail("train.batch_size must be >= 1");
    if (!(e.train.adam.learning_rate > 0.0)) fail("train.learning_rate must be > 0");
    if (e.target_subtasks.empty()) fail("attribution.target_subtasks must name at least one subtask");
    for (auto s : e.target_subtasks)
        if (s >= e.dataset.num_subtasks) fail("attribution.target_subtasks: subtask " + std::to_string(s) +
                                              " out of range");
    if (e.prune.k < 1 || e.prune.k > e.model.experts_per_layer * e.model.num_layers)
        fail("pruning.k out of range");
    if (!(e.prune.tau >= 0.0 && e.prune.tau <= 1.0)) fail("pruning.tau must be in [0, 1]");
    if (e.al_batch == 0) fail("realign.batch_size must be >= 1");
    if (e.finetune.batch_size == 0) fail("realign.finetune_batch_size must be >= 1");
    if (!(e.finetune.adam.learning_rate > 0.0)) fail("realign.learning_rate must be > 0");
    if (!(e.recovery_target > 0.0 && e.recovery_target <= 1.0)) fail("realign.recovery_target must be in (0, 1]");
    for (const auto& a : e.arms)
        if (a != "none" && a != "random" && a != "active") fail("pipeline.arms: unknown arm '" + a + "'");
    if (e.defense_prune_k < 1 || e.defense_prune_k > e.model.experts_per_layer)
        fail("pipeline.defense_prune_k out of range");
    if (!(e.defense_lambda_ent >= 0.0)) fail("pipeline.defense_lambda_ent must be >= 0");
}

/// Applies `[section] key = value` pairs from `tree` on top of `base`.
inline RunConfig config_from_ptree(const boost::property_tree::ptree& tree, RunConfig base = {}) {
    using namespace config_detail;
    auto& e = base.experiment;
    auto& d = e.dataset;
    auto& m = e.model;
    using Setter = std::function<void(const std::string&, const std::string&)>;
    auto sz = [](std::size_t& f) -> Setter {
        return [&f](const std::string& k, const std::string& v) { f = parse_u64(k, v); };
    };
    auto u64 = [](std::uint64_t& f) -> Setter {
        return [&f](const std::string& k, const std::string& v) { f = parse_u64(k, v); };
    };
    auto dbl = [](double& f) -> Setter {
        return [&f](const std::string& k, const std::string& v) { f = parse_double(k, v); };
    };
    auto bln = [](bool& f) -> Setter {
        return [&f](const std::string& k, const std::string& v) { f = parse_bool(k, v); };
    };
    const std::map<std::string, std::map<std::string, Setter>> schema{
        {"run",
         {{"seed", u64(e.seed)},
          {"out", [&](const std::string&, const std::string& v) { base.out_dir = trim(v); }}}},
        {"dataset",
         {{"num_subtasks", sz(d.num_subtasks)},
          {"input_dim", sz(d.input_dim)},
          {"num_classes", sz(d.num_classes)},
          {"examples_per_subtask", sz(d.examples_per_subtask)},
          {"cluster_separation", dbl(d.cluster_separation)},
          {"label_noise", dbl(d.label_noise)},
          {"class_margin", dbl(d.class_margin)}}},
        {"model",
         {{"model_dim", sz(m.model_dim)},
          {"num_layers", sz(m.num_layers)},
          {"experts_per_layer", sz(m.experts_per_layer)},
          {"top_k", sz(m.top_k)},
          {"expert_hidden_dim", sz(m.expert_hidden_dim)},
          {"lambda_lb", dbl(m.lambda_lb)},
          {"lambda_ent", dbl(m.lambda_ent)}}},
        {"train",
         {{"epochs", sz(e.train.epochs)},
          {"batch_size", sz(e.train.batch_size)},
          {"learning_rate", dbl(e.train.adam.learning_rate)}}},
        {"attribution",
         {{"mode",
           [&](const std::string&, const std::string& v) { e.attribution = attribution_mode_from_string(trim(v)); }},
          {"target_subtasks",
           [&](const std::string& k, const std::string& v) {
               e.target_subtasks.clear();
               for (const auto& item : parse_list(v)) e.target_subtasks.push_back(parse_u64(k, item));
           }}}},
        {"pruning",
         {{"strategy",
           [&](const std::string&, const std::string& v) { e.prune_strategy = prune_strategy_from_string(trim(v)); }},
          {"k", sz(e.prune.k)},
          {"tau", dbl(e.prune.tau)},
          {"strict", bln(e.strict)}}},
        {"realign",
         {{"budget", sz(e.budget)},
          {"batch_size", sz(e.al_batch)},
          {"strategy",
           [&](const std::string&, const std::string& v) { e.active_strategy = al_strategy_from_string(trim(v)); }},
          {"scope", [&](const std::string&, const std::string& v) { e.scope = scope_from_string(trim(v)); }},
          {"steps_per_round", sz(e.finetune.steps)},
          {"finetune_batch_size", sz(e.finetune.batch_size)},
          {"learning_rate", dbl(e.finetune.adam.learning_rate)},
          {"recovery_target", dbl(e.recovery_target)}}},
        {"pipeline",
         {{"arms", [&](const std::string&, const std::string& v) { e.arms = parse_list(v); }},
          {"defense_lambda_ent", dbl(e.defense_lambda_ent)},
          {"defense_prune_k", sz(e.defense_prune_k)}}},
    };
    for (const auto& [section, body] : tree) {
        const auto sec = schema.find(section);
        if (sec == schema.end()) {
            if (body.empty()) throw ArgumentError("config: key '" + section + "' outside any section");
            throw ArgumentError("config: unknown section [" + section + "]");
        }
        for (const auto& [key, value] : body) {
            const auto it = sec->second.find(key);
            if (it == sec->second.end())
                throw ArgumentError("config: unknown key '" + key + "' in [" + section + "]");
            it->second(section + "." + key, value.data());
        }
    }
    m.input_dim = d.input_dim;
    m.num_classes = d.num_classes;
    m.seed = e.seed;
    validate_config(base);
    return base;
}

inline RunConfig load_config(const std::filesystem::path& path) {
    boost::property_tree::ptree tree;
    if (!std::filesystem::exists(path)) throw IoError("config file not found: " + path.string());
    try {
        boost::property_tree::read_ini(path.string(), tree);
    } catch (const boost::property_tree::ini_parser_error& err) {
        throw ArgumentError("config: " + std::string(err.what()));
    }
    return config_from_ptree(tree);
}


} // namespace moelab
