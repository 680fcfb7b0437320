// Copyright (c) 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Toy mixture-of-experts classifier.
//
//   h0      = x * input_proj
//   h_{l+1} = h_l + sum_{s in topk} gate_s * expert_s(h_l)      (per MoE layer)
//   logits  = h_L * head_w + head_b
//
// expert(h) = relu(h * w1 + b1) * w2 + b2, optionally followed by a diagonal
// adapter (scale, bias). Router logits are router * h; inactive (pruned)
// experts are never ranked and carry exactly zero probability.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moelab/errors.hpp"
#include "moelab/numcore.hpp"

namespace moelab {

struct ModelConfig {
    std::size_t input_dim = 16;
    std::size_t model_dim = 16; ///< width of the residual stream
    std::size_t num_layers = 2;
    std::size_t experts_per_layer = 8;
    std::size_t top_k = 2;
    std::size_t expert_hidden_dim = 32;
    std::size_t num_classes = 4;
    double lambda_lb = 0.01;
    double lambda_ent = 0.0;
    std::uint64_t seed = 0;

    void validate() const {
        auto fail = [](const std::string& m) { throw ArgumentError("ModelConfig: " + m); };
        if (input_dim == 0) fail("input_dim must be >= 1");
        if (model_dim == 0) fail("model_dim must be >= 1");
        if (num_layers == 0) fail("num_layers must be >= 1");
        if (experts_per_layer == 0) fail("experts_per_layer must be >= 1");
        if (top_k == 0 || top_k > experts_per_layer)
            fail("top_k must satisfy 1 <= k <= experts_per_layer (got k=" + std::to_string(top_k) +
                 ")");
        if (expert_hidden_dim == 0) fail("expert_hidden_dim must be >= 1");
        if (num_classes < 2) fail("num_classes must be >= 2");
        if (!(lambda_lb >= 0.0) || !std::isfinite(lambda_lb)) fail("lambda_lb must be >= 0");
        if (!(lambda_ent >= 0.0) || !std::isfinite(lambda_ent)) fail("lambda_ent must be >= 0");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct ExpertWeights {
    Tensor2 w1; ///< model_dim x hidden
    Tensor2 b1; ///< 1 x hidden
    Tensor2 w2; ///< hidden x model_dim
    Tensor2 b2; ///< 1 x model_dim
    friend bool operator==(const ExpertWeights&, const ExpertWeights&) = default;
};

/// Diagonal adapter applied to an expert's output: out * scale + bias.
struct Adapter {
    Tensor2 scale; ///< 1 x model_dim, identity init = 1
    Tensor2 bias;  ///< 1 x model_dim, identity init = 0
    friend bool operator==(const Adapter&, const Adapter&) = default;
};

struct LayerWeights {
    Tensor2 router; ///< experts x model_dim
    std::vector<ExpertWeights> experts;
    std::vector<Adapter> adapters; ///< empty, or one per expert
    friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct Parameters {
    Tensor2 input_proj; ///< input_dim x model_dim
    std::vector<LayerWeights> layers;
    Tensor2 head_w; ///< model_dim x classes
    Tensor2 head_b; ///< 1 x classes

    friend bool operator==(const Parameters&, const Parameters&) = default;
};

/// Visits every parameter tensor in canonical order with its stable name.
/// Works on const and non-const Parameters.
template <class P, class F>
    requires std::is_same_v<std::remove_const_t<P>, Parameters>
void visit_params(P& p, F&& f) {
    f(std::string("input_proj"), p.input_proj);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        auto& layer = p.layers[l];
        const std::string lp = "layers." + std::to_string(l) + ".";
        f(lp + "router", layer.router);
        for (std::size_t e = 0; e < layer.experts.size(); ++e) {
            const std::string ep = lp + "experts." + std::to_string(e) + ".";
            f(ep + "w1", layer.experts[e].w1);
            f(ep + "b1", layer.experts[e].b1);
            f(ep + "w2", layer.experts[e].w2);
            f(ep + "b2", layer.experts[e].b2);
        }
        for (std::size_t e = 0; e < layer.adapters.size(); ++e) {
            const std::string ap = lp + "adapters." + std::to_string(e) + ".";
            f(ap + "scale", layer.adapters[e].scale);
            f(ap + "bias", layer.adapters[e].bias);
        }
    }
    f(std::string("head.w"), p.head_w);
    f(std::string("head.b"), p.head_b);
}

inline std::size_t param_count(const Parameters& p) {
    std::size_t n = 0;
    visit_params(p, [&](const std::string&, const Tensor2& t) { n += t.size(); });
    return n;
}

inline std::vector<double> flatten(const Parameters& p) {
    std::vector<double> flat;
    flat.reserve(param_count(p));
    visit_params(p, [&](const std::string&, const Tensor2& t) {
        flat.insert(flat.end(), t.data().begin(), t.data().end());
    });
    return flat;
}

inline void unflatten(Parameters& p, std::span<const double> flat) {
    if (flat.size() != param_count(p))
        throw DimensionError("unflatten: expected " + std::to_string(param_count(p)) +
                             " values, got " + std::to_string(flat.size()));
    std::size_t off = 0;
    visit_params(p, [&](const std::string&, Tensor2& t) {
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), t.size(), t.data().begin());
        off += t.size();
    });
}

/// Same shapes as `p`, every entry set to `value`.
inline Parameters params_like(const Parameters& p, double value = 0.0) {
    Parameters out = p;
    visit_params(out, [&](const std::string&, Tensor2& t) { t.fill(value); });
    return out;
}

using ExpertMask = std::vector<bool>;

struct MoeModel {
    ModelConfig config;
    Parameters params;
    std::vector<ExpertMask> active_mask; ///< per layer, one flag per expert

    std::size_t active_count(std::size_t layer) const {
        const auto& m = active_mask.at(layer);
        return static_cast<std::size_t>(std::count(m.begin(), m.end(), true));
    }
    bool has_adapters() const {
        return !params.layers.empty() && !params.layers.front().adapters.empty();
    }

    friend bool operator==(const MoeModel&, const MoeModel&) = default;
};

/// Scaled-uniform fan-in initialization, all experts active, no adapters.
inline MoeModel build_model(const ModelConfig& config, Rng& rng) {
    config.validate();
    auto init = [&](std::size_t rows, std::size_t cols) {
        Tensor2 t(rows, cols);
        const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
        for (double& v : t.data()) v = rng.uniform(-bound, bound);
        return t;
    };
    const std::size_t d = config.model_dim;
    const std::size_t h = config.expert_hidden_dim;
    MoeModel m;
    m.config = config;
    m.params.input_proj = init(config.input_dim, d);
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        LayerWeights layer;
        // Router rows map model_dim -> one logit, so fan-in is model_dim.
        layer.router = Tensor2(config.experts_per_layer, d);
        const double rb = 1.0 / std::sqrt(static_cast<double>(d));
        for (double& v : layer.router.data()) v = rng.uniform(-rb, rb);
        for (std::size_t e = 0; e < config.experts_per_layer; ++e) {
            ExpertWeights ex;
            ex.w1 = init(d, h);
            ex.b1 = Tensor2(1, h);
            ex.w2 = init(h, d);
            ex.b2 = Tensor2(1, d);
            layer.experts.push_back(std::move(ex));
        }
        m.params.layers.push_back(std::move(layer));
        m.active_mask.emplace_back(config.experts_per_layer, true);
    }
    m.params.head_w = init(d, config.num_classes);
    m.params.head_b = Tensor2(1, config.num_classes);
    return m;
}

/// Attaches identity adapters to every expert (no-op if already present).
inline void attach_adapters(MoeModel& m) {
    if (m.has_adapters()) return;
    for (auto& layer : m.params.layers) {
        layer.adapters.resize(layer.experts.size());
        for (auto& a : layer.adapters) {
            a.scale = Tensor2(1, m.config.model_dim, 1.0);
            a.bias = Tensor2(1, m.config.model_dim, 0.0);
        }
    }
}

// ---------------------------------------------------------------------------
// Routing
// ---------------------------------------------------------------------------

struct Routing {
    std::vector<std::size_t> selected; ///< in rank order, best first
    std::vector<double> gates;         ///< softmax over the selected logits
    std::vector<double> full_probs;    ///< softmax over active experts, 0 elsewhere
};

/// Top-k routing over the active experts. Ties go to the lowest index.
inline Routing route(std::span<const double> router_logits, std::size_t k, const ExpertMask& mask) {
    if (mask.size() != router_logits.size())
        throw DimensionError("route: mask length " + std::to_string(mask.size()) +
                             " != logits length " + std::to_string(router_logits.size()));
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) order.push_back(i);
    if (order.empty()) throw StateError("route: every expert in the layer is masked");
    if (k == 0) throw ArgumentError("route: k must be >= 1");

    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return router_logits[a] > router_logits[b];
    });
    const std::size_t kk = std::min(k, order.size());

    Routing r;
    r.selected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(kk));
    std::vector<double> sel_logits(kk);
    for (std::size_t j = 0; j < kk; ++j) sel_logits[j] = router_logits[r.selected[j]];
    r.gates = softmax(sel_logits);

    std::vector<double> active_logits;
    active_logits.reserve(order.size());
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) active_logits.push_back(router_logits[i]);
    const auto active_probs = softmax(active_logits);
    r.full_probs.assign(mask.size(), 0.0);
    for (std::size_t i = 0, j = 0; i < mask.size(); ++i)
        if (mask[i]) r.full_probs[i] = active_probs[j++];
    return r;
}

// ---------------------------------------------------------------------------
// Auxiliary losses
// ---------------------------------------------------------------------------

namespace detail {
inline std::size_t argmax_lowest(std::span<const double> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}
} // namespace detail

/// Switch-style balance loss: num_active * sum_i f_i * mean_p_i, where f_i is
/// the fraction of rows whose top-1 expert is i.
inline double load_balance_loss(std::span<const std::vector<double>> probs, std::size_t num_active) {
    if (probs.empty()) throw ArgumentError("load_balance_loss: empty batch");
    const std::size_t m = probs.front().size();
    std::vector<double> frac(m, 0.0), mean(m, 0.0);
    const double inv = 1.0 / static_cast<double>(probs.size());
    for (const auto& row : probs) {
        if (row.size() != m) throw DimensionError("load_balance_loss: ragged probability rows");
        frac[detail::argmax_lowest(row)] += inv;
        for (std::size_t i = 0; i < m; ++i) mean[i] += row[i] * inv;
    }
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += frac[i] * mean[i];
    return static_cast<double>(num_active) * s;
}

/// Mean over rows of KL(row || Uniform(num_active)). Zero entries are the
/// inactive experts and contribute nothing.
inline double entanglement_loss(std::span<const std::vector<double>> probs, std::size_t num_active) {
    if (probs.empty()) return 0.0;
    const double log_m = std::log(static_cast<double>(num_active));
    double total = 0.0;
    for (const auto& row : probs) {
        double kl = log_m;
        for (double p : row)
            if (p > 0.0) kl += p * std::log(p);
        total += std::max(0.0, kl);
    }
    return total / static_cast<double>(probs.size());
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

struct TraceRow {
    std::size_t example = 0;
    std::size_t layer = 0;
    std::vector<double> probs;
    std::vector<std::size_t> selected;
    friend bool operator==(const TraceRow&, const TraceRow&) = default;
};

struct AuxLosses {
    double load_balance = 0.0; ///< mean over layers
    double entanglement = 0.0; ///< mean over layers
};

struct ForwardResult {
    Tensor2 logits; ///< batch x classes
    std::vector<TraceRow> trace;
    AuxLosses aux;
};

namespace detail {

struct ExpertCache {
    std::vector<double> pre;  ///< w1 pre-activation
    std::vector<double> act;  ///< relu(pre)
    std::vector<double> out;  ///< expert output before adapter
};

struct LayerCache {
    std::vector<double> h_in;
    Routing routing;
    std::vector<ExpertCache> experts; ///< aligned with routing.selected
};

struct ExampleCache {
    std::vector<double> x;
    std::vector<LayerCache> layers;
    std::vector<double> h_out;
    std::vector<double> logits;
};

inline void check_model_shapes(const MoeModel& m) {
    if (m.params.layers.size() != m.config.num_layers || m.active_mask.size() != m.config.num_layers)
        throw DimensionError("model: layer count does not match config");
}

// out += v * W for row vector v and W (len(v) x cols)
inline void vec_mat_acc(std::span<const double> v, const Tensor2& w, std::span<double> out) {
    for (std::size_t i = 0; i < w.rows(); ++i) {
        const double vi = v[i];
        if (vi == 0.0) continue;
        auto wr = w.row(i);
        for (std::size_t j = 0; j < w.cols(); ++j) out[j] += vi * wr[j];
    }
}

// out[i] += sum_j W(i, j) * v[j]
inline void mat_vec_acc(const Tensor2& w, std::span<const double> v, std::span<double> out) {
    for (std::size_t i = 0; i < w.rows(); ++i) {
        auto wr = w.row(i);
        double s = 0.0;
        for (std::size_t j = 0; j < w.cols(); ++j) s += wr[j] * v[j];
        out[i] += s;
    }
}

// G += a (outer) b
inline void outer_acc(std::span<const double> a, std::span<const double> b, Tensor2& g) {
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double ai = a[i];
        if (ai == 0.0) continue;
        auto gr = g.row(i);
        for (std::size_t j = 0; j < b.size(); ++j) gr[j] += ai * b[j];
    }
}

inline void forward_example(const MoeModel& m, std::span<const double> x, ExampleCache& c) {
    const auto& p = m.params;
    const std::size_t d = m.config.model_dim;
    c.x.assign(x.begin(), x.end());
    std::vector<double> h(d, 0.0);
    vec_mat_acc(x, p.input_proj, h);
    c.layers.resize(m.config.num_layers);
    for (std::size_t l = 0; l < m.config.num_layers; ++l) {
        const auto& layer = p.layers[l];
        auto& lc = c.layers[l];
        lc.h_in = h;
        std::vector<double> z(layer.router.rows(), 0.0);
        mat_vec_acc(layer.router, h, z);
        lc.routing = route(z, m.config.top_k, m.active_mask[l]);
        lc.experts.resize(lc.routing.selected.size());
        std::vector<double> next = h;
        for (std::size_t s = 0; s < lc.routing.selected.size(); ++s) {
            const std::size_t e = lc.routing.selected[s];
            const auto& ew = layer.experts[e];
            auto& ec = lc.experts[s];
            ec.pre.assign(ew.b1.data().begin(), ew.b1.data().end());
            vec_mat_acc(h, ew.w1, ec.pre);
            ec.act.resize(ec.pre.size());
            for (std::size_t i = 0; i < ec.pre.size(); ++i) ec.act[i] = ec.pre[i] > 0.0 ? ec.pre[i] : 0.0;
            ec.out.assign(ew.b2.data().begin(), ew.b2.data().end());
            vec_mat_acc(ec.act, ew.w2, ec.out);
            const double g = lc.routing.gates[s];
            if (!layer.adapters.empty()) {
                const auto& ad = layer.adapters[e];
                for (std::size_t i = 0; i < d; ++i)
                    next[i] += g * (ec.out[i] * ad.scale.data()[i] + ad.bias.data()[i]);
            } else {
                for (std::size_t i = 0; i < d; ++i) next[i] += g * ec.out[i];
            }
        }
        h = std::move(next);
    }
    c.h_out = h;
    c.logits.assign(p.head_b.data().begin(), p.head_b.data().end());
    vec_mat_acc(h, p.head_w, c.logits);
}

} // namespace detail

inline void check_batch(const MoeModel& m, const Tensor2& inputs, std::span<const std::size_t> ids) {
    if (inputs.cols() != m.config.input_dim)
        throw DimensionError("forward: input width " + std::to_string(inputs.cols()) +
                             " != model input_dim " + std::to_string(m.config.input_dim));
    for (std::size_t id : ids)
        if (id >= inputs.rows())
            throw ArgumentError("forward: example id " + std::to_string(id) + " out of range");
}

/// Runs the rows `ids` of `inputs` through the model. Trace rows are emitted
/// in (example order, layer) order with `example` set to the row id.
inline ForwardResult forward(const MoeModel& m, const Tensor2& inputs,
                             std::span<const std::size_t> ids, bool record_trace = false) {
    detail::check_model_shapes(m);
    check_batch(m, inputs, ids);
    ForwardResult r;
    r.logits = Tensor2(ids.size(), m.config.num_classes);
    const std::size_t L = m.config.num_layers;
    std::vector<std::vector<std::vector<double>>> probs(L);
    detail::ExampleCache c;
    for (std::size_t b = 0; b < ids.size(); ++b) {
        detail::forward_example(m, inputs.row(ids[b]), c);
        std::copy(c.logits.begin(), c.logits.end(), r.logits.row(b).begin());
        for (std::size_t l = 0; l < L; ++l) {
            probs[l].push_back(c.layers[l].routing.full_probs);
            if (record_trace)
                r.trace.push_back(TraceRow{ids[b], l, c.layers[l].routing.full_probs,
                                           c.layers[l].routing.selected});
        }
    }
    if (!ids.empty()) {
        for (std::size_t l = 0; l < L; ++l) {
            r.aux.load_balance += load_balance_loss(probs[l], m.active_count(l));
            r.aux.entanglement += entanglement_loss(probs[l], m.active_count(l));
        }
        r.aux.load_balance /= static_cast<double>(L);
        r.aux.entanglement /= static_cast<double>(L);
    }
    return r;
}

/// Convenience overload over every row of `inputs`.
inline ForwardResult forward(const MoeModel& m, const Tensor2& inputs, bool record_trace = false) {
    std::vector<std::size_t> ids(inputs.rows());
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    return forward(m, inputs, ids, record_trace);
}

struct LossWeights {
    double lambda_lb = 0.0;
    double lambda_ent = 0.0;
};

struct LossBreakdown {
    double task = 0.0;
    double load_balance = 0.0;
    double entanglement = 0.0;
    double total = 0.0;
};

/// Composite loss  mean CE + lambda_lb * LB + lambda_ent * ENT  over the batch
/// (LB and ENT averaged over layers). When `grad` is non-null it receives the
/// gradient, shaped like `m.params`. Top-k selection and the top-1 counts in
/// LB are treated as constants.
inline LossBreakdown loss_and_grad(const MoeModel& m, const Tensor2& inputs,
                                   const std::vector<std::size_t>& labels,
                                   std::span<const std::size_t> ids, const LossWeights& w,
                                   Parameters* grad) {
    detail::check_model_shapes(m);
    check_batch(m, inputs, ids);
    if (ids.empty()) throw ArgumentError("loss_and_grad: empty batch");
    const std::size_t B = ids.size();
    const std::size_t L = m.config.num_layers;
    const std::size_t M = m.config.experts_per_layer;
    const std::size_t d = m.config.model_dim;
    const double invB = 1.0 / static_cast<double>(B);
    const double invL = 1.0 / static_cast<double>(L);

    std::vector<detail::ExampleCache> caches(B);
    for (std::size_t b = 0; b < B; ++b) detail::forward_example(m, inputs.row(ids[b]), caches[b]);

    LossBreakdown out;
    // Per-layer batch statistics for the balance loss.
    std::vector<std::vector<double>> frac(L, std::vector<double>(M, 0.0));
    std::vector<std::vector<double>> mean_p(L, std::vector<double>(M, 0.0));
    for (std::size_t l = 0; l < L; ++l) {
        std::vector<std::vector<double>> rows;
        rows.reserve(B);
        for (auto& c : caches) rows.push_back(c.layers[l].routing.full_probs);
        for (const auto& row : rows) {
            frac[l][detail::argmax_lowest(row)] += invB;
            for (std::size_t i = 0; i < M; ++i) mean_p[l][i] += row[i] * invB;
        }
        out.load_balance += load_balance_loss(rows, m.active_count(l)) * invL;
        out.entanglement += entanglement_loss(rows, m.active_count(l)) * invL;
    }

    for (std::size_t b = 0; b < B; ++b) {
        const std::size_t label = labels.at(ids[b]);
        out.task += cross_entropy(caches[b].logits, label).loss * invB;
    }
    out.total = out.task + w.lambda_lb * out.load_balance + w.lambda_ent * out.entanglement;
    if (!grad) return out;

    *grad = params_like(m.params, 0.0);
    auto& g = *grad;
    const auto& p = m.params;
    for (std::size_t b = 0; b < B; ++b) {
        auto& c = caches[b];
        auto ce = cross_entropy(c.logits, labels.at(ids[b]));
        for (double& v : ce.grad) v *= invB;
        detail::outer_acc(c.h_out, ce.grad, g.head_w);
        for (std::size_t j = 0; j < ce.grad.size(); ++j) g.head_b.data()[j] += ce.grad[j];
        std::vector<double> dh(d, 0.0);
        detail::mat_vec_acc(p.head_w, ce.grad, dh);

        for (std::size_t li = L; li-- > 0;) {
            const auto& layer = p.layers[li];
            auto& gl = g.layers[li];
            auto& lc = c.layers[li];
            const auto& rt = lc.routing;
            const std::size_t K = rt.selected.size();
            std::vector<double> dh_in = dh; // residual path
            std::vector<double> dgate(K, 0.0);
            for (std::size_t s = 0; s < K; ++s) {
                const std::size_t e = rt.selected[s];
                const auto& ew = layer.experts[e];
                auto& ge = gl.experts[e];
                auto& ec = lc.experts[s];
                const double gate = rt.gates[s];
                std::vector<double> dout(d);
                if (!layer.adapters.empty()) {
                    const auto& ad = layer.adapters[e];
                    auto& ga = gl.adapters[e];
                    for (std::size_t i = 0; i < d; ++i) {
                        const double adapted = ec.out[i] * ad.scale.data()[i] + ad.bias.data()[i];
                        dgate[s] += dh[i] * adapted;
                        const double dy = gate * dh[i];
                        ga.scale.data()[i] += dy * ec.out[i];
                        ga.bias.data()[i] += dy;
                        dout[i] = dy * ad.scale.data()[i];
                    }
                } else {
                    for (std::size_t i = 0; i < d; ++i) {
                        dgate[s] += dh[i] * ec.out[i];
                        dout[i] = gate * dh[i];
                    }
                }
                for (std::size_t i = 0; i < d; ++i) ge.b2.data()[i] += dout[i];
                detail::outer_acc(ec.act, dout, ge.w2);
                std::vector<double> dact(ec.act.size(), 0.0);
                detail::mat_vec_acc(ew.w2, dout, dact);
                for (std::size_t i = 0; i < dact.size(); ++i)
                    if (ec.pre[i] <= 0.0) dact[i] = 0.0;
                for (std::size_t i = 0; i < dact.size(); ++i) ge.b1.data()[i] += dact[i];
                detail::outer_acc(lc.h_in, dact, ge.w1);
                detail::mat_vec_acc(ew.w1, dact, dh_in);
            }

            // Router logits: gate softmax over selected + aux losses via full_probs.
            std::vector<double> dz(M, 0.0);
            double gdot = 0.0;
            for (std::size_t s = 0; s < K; ++s) gdot += rt.gates[s] * dgate[s];
            for (std::size_t s = 0; s < K; ++s)
                dz[rt.selected[s]] += rt.gates[s] * (dgate[s] - gdot);

            const auto& pr = rt.full_probs;
            const double m_active = static_cast<double>(m.active_count(li));
            if (w.lambda_lb != 0.0) {
                // d/dp_i of num_active * sum f_i * mean_p_i
                std::vector<double> dp(M);
                for (std::size_t i = 0; i < M; ++i)
                    dp[i] = w.lambda_lb * invL * m_active * frac[li][i] * invB;
                double pdot = 0.0;
                for (std::size_t i = 0; i < M; ++i) pdot += pr[i] * dp[i];
                for (std::size_t i = 0; i < M; ++i)
                    if (pr[i] > 0.0) dz[i] += pr[i] * (dp[i] - pdot);
            }
            if (w.lambda_ent != 0.0) {
                double plogp = 0.0;
                for (double v : pr)
                    if (v > 0.0) plogp += v * std::log(v);
                const double scale = w.lambda_ent * invL * invB;
                for (std::size_t i = 0; i < M; ++i)
                    if (pr[i] > 0.0) dz[i] += scale * pr[i] * (std::log(pr[i]) - plogp);
            }
            detail::outer_acc(dz, lc.h_in, gl.router);
            for (std::size_t i = 0; i < M; ++i) {
                if (dz[i] == 0.0) continue;
                auto rr = layer.router.row(i);
                for (std::size_t j = 0; j < d; ++j) dh_in[j] += dz[i] * rr[j];
            }
            dh = std::move(dh_in);
        }
        detail::outer_acc(c.x, dh, g.input_proj);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct EpochRecord {
    std::size_t epoch = 0;
    double task_loss = 0.0;
    double load_balance_loss = 0.0;
    double entanglement_loss = 0.0;
    double eval_accuracy = 0.0;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
};

struct TrainSettings {
    std::size_t epochs = 60;
    std::size_t batch_size = 32;
    AdamSettings adam{};
};

inline double accuracy(const MoeModel& m, const Tensor2& inputs,
                       const std::vector<std::size_t>& labels, std::span<const std::size_t> ids) {
    if (ids.empty()) return 0.0;
    const auto r = forward(m, inputs, ids);
    std::size_t hit = 0;
    for (std::size_t b = 0; b < ids.size(); ++b)
        if (detail::argmax_lowest(r.logits.row(b)) == labels.at(ids[b])) ++hit;
    return static_cast<double>(hit) / static_cast<double>(ids.size());
}

/// One optimizer step on `batch`. `trainable` (flattened 0/1 mask, may be
/// empty = everything) restricts which parameters move.
inline LossBreakdown gradient_step(MoeModel& m, const Tensor2& inputs,
                                   const std::vector<std::size_t>& labels,
                                   std::span<const std::size_t> batch, const LossWeights& w,
                                   OptimState& state, std::span<const double> trainable = {}) {
    Parameters grad;
    const auto loss = loss_and_grad(m, inputs, labels, batch, w, &grad);
    if (!std::isfinite(loss.total)) throw NumericError("gradient_step: non-finite loss");
    auto flat = flatten(m.params);
    const auto gflat = flatten(grad);
    if (state.first_moment.size() != flat.size()) state = OptimState(state.settings, flat.size());
    adam_step(flat, gflat, state, trainable);
    for (double v : flat)
        if (!std::isfinite(v)) throw NumericError("gradient_step: non-finite parameter after update");
    unflatten(m.params, flat);
    return loss;
}

/// Epoch-shuffled minibatch Adam on the composite objective. `eval_ids`
/// (defaults to `train_ids`) feed the per-epoch accuracy record.
inline TrainHistory train(MoeModel& m, const Tensor2& inputs, const std::vector<std::size_t>& labels,
                          std::span<const std::size_t> train_ids, const TrainSettings& settings,
                          Rng& rng, std::span<const std::size_t> eval_ids = {}) {
    if (train_ids.empty()) throw ArgumentError("train: empty dataset");
    if (settings.batch_size == 0) throw ArgumentError("train: batch_size must be >= 1");
    TrainHistory hist;
    if (settings.epochs == 0) return hist;
    const LossWeights w{m.config.lambda_lb, m.config.lambda_ent};
    OptimState state(settings.adam, param_count(m.params));
    std::vector<std::size_t> order(train_ids.begin(), train_ids.end());
    if (eval_ids.empty()) eval_ids = train_ids;
    for (std::size_t ep = 0; ep < settings.epochs; ++ep) {
        rng.shuffle(order);
        EpochRecord rec;
        rec.epoch = ep + 1;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += settings.batch_size) {
            const std::size_t end = std::min(order.size(), start + settings.batch_size);
            std::span<const std::size_t> batch(order.data() + start, end - start);
            const auto loss = gradient_step(m, inputs, labels, batch, w, state);
            rec.task_loss += loss.task;
            rec.load_balance_loss += loss.load_balance;
            rec.entanglement_loss += loss.entanglement;
            ++batches;
        }
        rec.task_loss /= static_cast<double>(batches);
        rec.load_balance_loss /= static_cast<double>(batches);
        rec.entanglement_loss /= static_cast<double>(batches);
        rec.eval_accuracy = accuracy(m, inputs, labels, eval_ids);
        hist.epochs.push_back(rec);
    }
    return hist;
}

/// Mean per-token entropy of the full routing distribution, averaged over layers.
inline double mean_gate_entropy(const MoeModel& m, const Tensor2& inputs,
                                std::span<const std::size_t> ids) {
    const auto r = forward(m, inputs, ids, true);
    if (r.trace.empty()) return 0.0;
    double total = 0.0;
    for (const auto& row : r.trace)
        for (double p : row.probs)
            if (p > 0.0) total -= p * std::log(p);
    return total / static_cast<double>(r.trace.size());
}

} // namespace moelab
