// Copyright (c) 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstring>
#include <numeric>
#include <vector>

#include "moelab/moe.hpp"

namespace moelab::testing {

/// Composite loss of `m` on `ids` as a function of the flattened parameters,
/// in the shape finite_diff_check expects.
inline auto composite_loss_fn(const MoeModel& m, const Tensor2& x, const std::vector<std::size_t>& y,
                              const std::vector<std::size_t>& ids, LossWeights w) {
    return [&m, &x, &y, ids, w](std::span<const double> flat, std::vector<double>* grad) {
        MoeModel probe = m;
        unflatten(probe.params, flat);
        Parameters g;
        const auto loss = loss_and_grad(probe, x, y, ids, w, grad ? &g : nullptr);
        if (grad) *grad = flatten(g);
        return loss.total;
    };
}

/// Small random regression-free batch: inputs ~ N(0, 1), labels uniform.
struct Batch {
    Tensor2 x;
    std::vector<std::size_t> y;
    std::vector<std::size_t> ids;
};

inline Batch random_batch(std::size_t n, std::size_t dim, std::size_t classes, Rng& rng) {
    Batch b{Tensor2(n, dim), std::vector<std::size_t>(n), std::vector<std::size_t>(n)};
    for (double& v : b.x.data()) v = rng.normal();
    for (std::size_t i = 0; i < n; ++i) b.y[i] = static_cast<std::size_t>(rng.below(classes));
    std::iota(b.ids.begin(), b.ids.end(), std::size_t{0});
    return b;
}

inline bool bytes_equal(const Tensor2& a, const Tensor2& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

} // namespace moelab::testing
