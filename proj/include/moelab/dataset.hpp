// Copyright (c) 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "moelab/errors.hpp"
#include "moelab/numcore.hpp"

namespace moelab {

/// Synthetic multi-subtask classification benchmark.
///
/// Each subtask s owns a Gaussian cluster centred at mu_s (|mu_s| =
/// cluster_separation, unit isotropic spread) and a private linear rule
/// label = argmax_c W_s[c] . (x - mu_s). Points whose top-two rule scores
/// differ by less than class_margin are rejected, leaving a gap between
/// classes. Labels are assigned to slots
/// round-robin (so classes are balanced within a subtask up to +-1) and an
/// input is rejection-sampled until the rule agrees with the slot label. With
/// probability label_noise a slot instead gets an input whose rule label is a
/// different, uniformly chosen class.
struct DatasetSpec {
    std::size_t num_subtasks = 4;
    std::size_t input_dim = 16;
    std::size_t num_classes = 4;
    std::size_t examples_per_subtask = 500;
    double cluster_separation = 4.0;
    double label_noise = 0.0;
    double class_margin = 3.0;   ///< minimum top-two rule score gap
    std::uint64_t seed = 0;

    void validate() const {
        auto fail = [](const std::string& m) { throw ArgumentError("DatasetSpec: " + m); };
        if (num_subtasks == 0) fail("num_subtasks must be >= 1");
        if (input_dim == 0) fail("input_dim must be >= 1");
        if (num_classes < 2) fail("num_classes must be >= 2");
        if (num_classes > examples_per_subtask)
            fail("num_classes (" + std::to_string(num_classes) + ") exceeds examples_per_subtask (" +
                 std::to_string(examples_per_subtask) + ")");
        if (!(cluster_separation > 0.0)) fail("cluster_separation must be > 0");
        if (!(label_noise >= 0.0 && label_noise < 0.5)) fail("label_noise must be in [0, 0.5)");
        if (!(class_margin >= 0.0) || !std::isfinite(class_margin)) fail("class_margin must be >= 0");
    }

    friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

struct Dataset {
    DatasetSpec spec;
    Tensor2 inputs;                    ///< n x input_dim
    std::vector<std::size_t> labels;   ///< observed (possibly noisy) labels
    std::vector<std::size_t> subtask;  ///< subtask tag per example
    std::vector<std::size_t> train, pool, test;
    std::vector<Tensor2> centers;      ///< per subtask, 1 x input_dim
    std::vector<Tensor2> rules;        ///< per subtask, classes x input_dim

    std::size_t size() const noexcept { return labels.size(); }
};

namespace detail {
// Rule label of x, or num_classes when the top-two score gap is below `margin`.
inline std::size_t rule_label(const Tensor2& rule, std::span<const double> x,
                              std::span<const double> center, double margin) {
    std::size_t best = 0;
    double best_score = -INFINITY, second = -INFINITY;
    for (std::size_t c = 0; c < rule.rows(); ++c) {
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) s += rule(c, i) * (x[i] - center[i]);
        if (s > best_score) {
            second = best_score;
            best_score = s;
            best = c;
        } else if (s > second) {
            second = s;
        }
    }
    return best_score - second >= margin ? best : rule.rows();
}
} // namespace detail

inline Dataset gen_dataset(const DatasetSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    Dataset ds;
    ds.spec = spec;
    const std::size_t S = spec.num_subtasks;
    const std::size_t D = spec.input_dim;
    const std::size_t C = spec.num_classes;
    const std::size_t n = S * spec.examples_per_subtask;

    for (std::size_t s = 0; s < S; ++s) {
        Tensor2 mu(1, D);
        double norm = 0.0;
        for (double& v : mu.data()) {
            v = rng.normal();
            norm += v * v;
        }
        norm = std::sqrt(norm);
        for (double& v : mu.data()) v *= spec.cluster_separation / norm;
        Tensor2 w(C, D);
        for (double& v : w.data()) v = rng.normal();
        ds.centers.push_back(std::move(mu));
        ds.rules.push_back(std::move(w));
    }

    ds.inputs = Tensor2(n, D);
    ds.labels.resize(n);
    ds.subtask.resize(n);
    constexpr std::size_t max_tries = 100000;
    for (std::size_t s = 0; s < S; ++s) {
        const auto center = ds.centers[s].row(0);
        for (std::size_t j = 0; j < spec.examples_per_subtask; ++j) {
            const std::size_t id = s * spec.examples_per_subtask + j;
            const std::size_t label = j % C;
            std::size_t wanted = label;
            if (spec.label_noise > 0.0 && rng.uniform() < spec.label_noise)
                wanted = (label + 1 + static_cast<std::size_t>(rng.below(C - 1))) % C;
            auto x = ds.inputs.row(id);
            std::size_t tries = 0;
            do {
                if (++tries > max_tries)
                    throw StateError("gen_dataset: rejection sampling failed for subtask " +
                                     std::to_string(s) + " class " + std::to_string(wanted));
                for (std::size_t i = 0; i < D; ++i) x[i] = center[i] + rng.normal();
            } while (detail::rule_label(ds.rules[s], x, center, spec.class_margin) != wanted);
            ds.labels[id] = label;
            ds.subtask[id] = s;
        }
    }

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    const std::size_t n_train = n * 60 / 100;
    const std::size_t n_pool = n * 20 / 100;
    ds.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    ds.pool.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                   order.begin() + static_cast<std::ptrdiff_t>(n_train + n_pool));
    ds.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_pool), order.end());
    return ds;
}

} // namespace moelab
