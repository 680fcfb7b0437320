// Copyright (c) 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Numeric foundation: small dense row-major tensors, the differentiable
// primitives used by the MoE classifier, an Adam optimizer, a seeded
// cross-platform RNG and a central-difference gradient checker.
//
// Everything here is float64 and single-threaded; summation order is fixed
// so results are bit-reproducible across runs and platforms.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "moelab/errors.hpp"

namespace moelab {

// ---------------------------------------------------------------------------
// Tensor2
// ---------------------------------------------------------------------------

/// Dense row-major matrix of doubles. Vectors are 1 x n tensors.
class Tensor2 {
public:
    Tensor2() = default;
    Tensor2(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Tensor2(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_)
            throw DimensionError("Tensor2: data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_string());
    }

    static Tensor2 identity(std::size_t n) {
        Tensor2 t(n, n);
        for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
        return t;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols_, cols_};
    }

    std::vector<double>& data() noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    std::string shape_string() const {
        return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
    }

    friend bool operator==(const Tensor2&, const Tensor2&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// Standard matrix product with a fixed row-major inner loop.
inline Tensor2 matmul(const Tensor2& a, const Tensor2& b) {
    if (a.cols() != b.rows())
        throw DimensionError("matmul: shape mismatch " + a.shape_string() + " x " +
                             b.shape_string());
    Tensor2 out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto out_row = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            auto b_row = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax and cross-entropy
// ---------------------------------------------------------------------------

/// Max-subtracted softmax.
inline std::vector<double> softmax(std::span<const double> v) {
    if (v.empty()) throw ArgumentError("softmax: empty input");
    const double mx = *std::max_element(v.begin(), v.end());
    std::vector<double> out(v.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - mx);
        sum += out[i];
    }
    for (double& x : out) x /= sum;
    return out;
}

struct CrossEntropy {
    double loss = 0.0;
    std::vector<double> grad; ///< d loss / d logits = softmax(logits) - onehot(label)
};

/// Computed through log-sum-exp so saturated logits do not underflow to log(0).
inline CrossEntropy cross_entropy(std::span<const double> logits, std::size_t label) {
    if (label >= logits.size())
        throw ArgumentError("cross_entropy: label " + std::to_string(label) +
                            " out of range for " + std::to_string(logits.size()) + " classes");
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double z : logits) sum += std::exp(z - mx);
    const double lse = mx + std::log(sum);
    CrossEntropy ce;
    ce.loss = lse - logits[label];
    ce.grad.resize(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) ce.grad[i] = std::exp(logits[i] - lse);
    ce.grad[label] -= 1.0;
    return ce;
}

// ---------------------------------------------------------------------------
// Rng: xoshiro256** seeded through splitmix64
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t& state) noexcept {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Mixes a master seed with a stream tag into an independent child seed.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) noexcept {
    std::uint64_t s = master ^ (stream * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL);
    return splitmix64(s);
}

/// Cross-platform deterministic generator. The standard library's
/// distributions are implementation-defined, so every sampler used for data
/// or initialization lives here.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) noexcept {
        std::uint64_t sm = seed;
        for (auto& s : s_) s = splitmix64(sm);
    }

    std::uint64_t next_u64() noexcept {
        const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw ArgumentError("Rng::below: n must be positive");
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    /// Standard normal via Box-Muller (one draw per call, no caching).
    double normal() noexcept {
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }
    std::uint64_t s_[4]{};
};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamSettings {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct OptimState {
    AdamSettings settings;
    std::size_t step_count = 0;
    std::vector<double> first_moment;
    std::vector<double> second_moment;

    OptimState() = default;
    OptimState(AdamSettings s, std::size_t num_params)
        : settings(s), first_moment(num_params, 0.0), second_moment(num_params, 0.0) {}
};

/// One bias-corrected Adam update. When `trainable` is non-empty, entries
/// with a zero mask are left bit-unchanged together with their moments.
inline void adam_step(std::span<double> params, std::span<const double> grads, OptimState& state,
                      std::span<const double> trainable = {}) {
    const std::size_t n = params.size();
    if (grads.size() != n || state.first_moment.size() != n || state.second_moment.size() != n ||
        (!trainable.empty() && trainable.size() != n))
        throw DimensionError("adam_step: params " + std::to_string(n) + ", grads " +
                             std::to_string(grads.size()) + ", moments " +
                             std::to_string(state.first_moment.size()) + "/" +
                             std::to_string(state.second_moment.size()));
    const auto& s = state.settings;
    state.step_count += 1;
    const double t = static_cast<double>(state.step_count);
    const double c1 = 1.0 - std::pow(s.beta1, t);
    const double c2 = 1.0 - std::pow(s.beta2, t);
    for (std::size_t i = 0; i < n; ++i) {
        if (!trainable.empty() && trainable[i] == 0.0) continue;
        double& m = state.first_moment[i];
        double& v = state.second_moment[i];
        m = s.beta1 * m + (1.0 - s.beta1) * grads[i];
        v = s.beta2 * v + (1.0 - s.beta2) * grads[i] * grads[i];
        params[i] -= s.learning_rate * (m / c1) / (std::sqrt(v / c2) + s.epsilon);
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Compares the analytic gradient of `loss_fn` with central differences
/// (step 1e-6) on `probes` randomly chosen coordinates.
///
/// `loss_fn(params, grad_out)` returns the loss at `params`; when `grad_out`
/// is non-null it must also be filled with the analytic gradient.
/// Returns max |analytic - numeric| / max(1, |analytic|, |numeric|).
template <class LossFn>
double finite_diff_check(LossFn&& loss_fn, std::span<const double> params, Rng& rng,
                         std::size_t probes) {
    if (probes == 0) throw ArgumentError("finite_diff_check: probes must be >= 1");
    if (params.empty()) throw ArgumentError("finite_diff_check: no parameters");
    constexpr double step = 1e-6;
    std::vector<double> point(params.begin(), params.end());
    std::vector<double> analytic(point.size(), 0.0);
    const double base = loss_fn(std::span<const double>(point), &analytic);
    if (!std::isfinite(base)) throw NumericError("finite_diff_check: non-finite loss at base point");

    double worst = 0.0;
    for (std::size_t p = 0; p < probes; ++p) {
        const std::size_t i = static_cast<std::size_t>(rng.below(point.size()));
        const double orig = point[i];
        point[i] = orig + step;
        const double up = loss_fn(std::span<const double>(point), nullptr);
        point[i] = orig - step;
        const double down = loss_fn(std::span<const double>(point), nullptr);
        point[i] = orig;
        if (!std::isfinite(up) || !std::isfinite(down))
            throw NumericError("finite_diff_check: non-finite loss at probe coordinate " +
                               std::to_string(i));
        const double numeric = (up - down) / (2.0 * step);
        const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    return worst;
}

} // namespace moelab
