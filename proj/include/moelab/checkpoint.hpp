// Copyright (c) 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0
//
// JSON checkpoints. Doubles are written with 17 significant digits, which
// round-trips float64 exactly. Pruned experts are omitted and come back as
// zeros.

#pragma once

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "moelab/io.hpp"
#include "moelab/moe.hpp"

namespace moelab {

inline json config_to_json(const ModelConfig& c) {
    return json{{"input_dim", c.input_dim},
                {"model_dim", c.model_dim},
                {"num_layers", c.num_layers},
                {"experts_per_layer", c.experts_per_layer},
                {"top_k", c.top_k},
                {"expert_hidden_dim", c.expert_hidden_dim},
                {"num_classes", c.num_classes},
                {"lambda_lb", c.lambda_lb},
                {"lambda_ent", c.lambda_ent},
                {"seed", c.seed}};
}

inline ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.input_dim = j.at("input_dim").get<std::size_t>();
    c.model_dim = j.at("model_dim").get<std::size_t>();
    c.num_layers = j.at("num_layers").get<std::size_t>();
    c.experts_per_layer = j.at("experts_per_layer").get<std::size_t>();
    c.top_k = j.at("top_k").get<std::size_t>();
    c.expert_hidden_dim = j.at("expert_hidden_dim").get<std::size_t>();
    c.num_classes = j.at("num_classes").get<std::size_t>();
    c.lambda_lb = j.at("lambda_lb").get<double>();
    c.lambda_ent = j.at("lambda_ent").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.validate();
    return c;
}

inline json mask_to_json(const std::vector<ExpertMask>& mask) {
    json out = json::array();
    for (const auto& layer : mask) {
        json row = json::array();
        for (bool b : layer) row.push_back(b);
        out.push_back(std::move(row));
    }
    return out;
}

inline std::vector<ExpertMask> mask_from_json(const json& j) {
    std::vector<ExpertMask> out;
    for (const auto& row : j) {
        ExpertMask m;
        for (const auto& b : row) m.push_back(b.get<bool>());
        out.push_back(std::move(m));
    }
    return out;
}

namespace detail {
// "layers.<l>.experts.<e>.*" / "layers.<l>.adapters.<e>.*" -> (l, e); else nullopt.
inline std::optional<std::pair<std::size_t, std::size_t>> expert_of(const std::string& name) {
    std::size_t l = 0, e = 0;
    char kind[16] = {};
    if (std::sscanf(name.c_str(), "layers.%zu.%15[a-z].%zu.", &l, kind, &e) == 3 &&
        (std::string(kind) == "experts" || std::string(kind) == "adapters"))
        return std::pair{l, e};
    return std::nullopt;
}
} // namespace detail

inline json checkpoint_to_json(const MoeModel& m) {
    json params = json::object();
    visit_params(m.params, [&](const std::string& name, const Tensor2& t) {
        if (auto le = detail::expert_of(name); le && !m.active_mask[le->first][le->second]) return;
        params[name] = json{{"rows", t.rows()}, {"cols", t.cols()}, {"data", t.data()}};
    });
    return json{{"format_version", kFormatVersion},
                {"kind", "moelab.checkpoint"},
                {"seed", m.config.seed},
                {"config", config_to_json(m.config)},
                {"adapters", m.has_adapters()},
                {"active_mask", mask_to_json(m.active_mask)},
                {"params", std::move(params)}};
}

inline MoeModel checkpoint_from_json(const json& j) {
    try {
        if (j.at("format_version").get<int>() != kFormatVersion)
            throw IoError("checkpoint: unsupported format_version");
        MoeModel m;
        m.config = config_from_json(j.at("config"));
        Rng dummy(0);
        m = build_model(m.config, dummy);
        m.active_mask = mask_from_json(j.at("active_mask"));
        if (m.active_mask.size() != m.config.num_layers)
            throw IoError("checkpoint: active_mask layer count mismatch");
        for (const auto& layer : m.active_mask)
            if (layer.size() != m.config.experts_per_layer)
                throw IoError("checkpoint: active_mask expert count mismatch");
        if (j.at("adapters").get<bool>()) attach_adapters(m);
        const auto& params = j.at("params");
        visit_params(m.params, [&](const std::string& name, Tensor2& t) {
            auto le = detail::expert_of(name);
            if (le && !m.active_mask[le->first][le->second]) {
                t.fill(0.0);
                return;
            }
            const auto it = params.find(name);
            if (it == params.end()) throw IoError("checkpoint: missing parameter " + name);
            const auto rows = it->at("rows").get<std::size_t>();
            const auto cols = it->at("cols").get<std::size_t>();
            if (rows != t.rows() || cols != t.cols())
                throw IoError("checkpoint: shape mismatch for " + name);
            auto data = it->at("data").get<std::vector<double>>();
            t = Tensor2(rows, cols, std::move(data));
        });
        return m;
    } catch (const json::exception& e) {
        throw IoError(std::string("checkpoint: malformed document: ") + e.what());
    } catch (const DimensionError& e) {
        throw IoError(std::string("checkpoint: ") + e.what());
    }
}

inline void save_checkpoint(const std::filesystem::path& path, const MoeModel& m,
                            const json& provenance = json::object()) {
    auto doc = checkpoint_to_json(m);
    if (!provenance.empty()) doc["provenance"] = provenance;
    write_json(path, doc);
}

inline MoeModel load_checkpoint(const std::filesystem::path& path) {
    return checkpoint_from_json(read_json(path));
}

/// Hash of every parameter byte plus the mask; identifies a model in traces.
inline std::string model_hash(const MoeModel& m) {
    std::uint64_t h = fnv1a64(config_to_json(m.config).dump());
    visit_params(m.params, [&](const std::string& name, const Tensor2& t) {
        h = fnv1a64(name, h);
        h = fnv1a64(std::string_view(reinterpret_cast<const char*>(t.data().data()),
                                     t.data().size() * sizeof(double)),
                    h);
    });
    h = fnv1a64(mask_to_json(m.active_mask).dump(), h);
    return hex64(h);
}

} // namespace moelab
