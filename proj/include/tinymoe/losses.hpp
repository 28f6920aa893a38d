// Copyright (c) 2026 tinymoe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "tinymoe/common.hpp"
#include "tinymoe/moe.hpp"
#include "tinymoe/tape.hpp"

namespace tinymoe {

/// The training objective, decomposed: total = ce + alpha*lb + beta*rz.
/// lb and rz are stored pre-weight so they stay comparable across runs with
/// different weights (and are still monitored when a weight is 0).
struct LossBreakdown {
    double ce = 0;
    double lb = 0;
    double rz = 0;
    double alpha = 0;
    double beta = 0;
    double total = 0;
};

inline LossBreakdown combined_loss(double ce, double lb, double rz,
                                   double alpha = 0.01, double beta = 0.001) {
    check(alpha >= 0 && beta >= 0, "loss weights must be >= 0");
    LossBreakdown b;
    b.ce = ce;
    b.lb = lb;
    b.rz = rz;
    b.alpha = alpha;
    b.beta = beta;
    b.total = ce + alpha * lb + beta * rz;
    return b;
}

namespace detail {

/// f_i = (assignments of expert i) / (total assignments), so sum f = 1 and
/// the gradient-free side of the product. For token choice the denominator
/// is T*k.
inline std::vector<double> assignment_fractions(const RoutingDecision& d) {
    check(d.n_tokens >= 1, "load balancing loss over an empty batch");
    std::vector<double> f(size_t(d.n_experts), 0.0);
    const double total = double(d.total_assignments());
    check(total > 0, "load balancing loss with zero assignments");
    for (int64_t e = 0; e < d.n_experts; ++e)
        f[size_t(e)] = double(d.counts_per_expert[size_t(e)]) / total;
    return f;
}

} // namespace detail

/// L_LB = N_E * sum_i f_i * P_i for one layer's routing (value only).
/// Accumulated in 64-bit.
inline double load_balancing_loss(const RoutingDecision& d) {
    auto f = detail::assignment_fractions(d);
    double s = 0;
    for (int64_t e = 0; e < d.n_experts; ++e)
        s += f[size_t(e)] * d.mean_prob_per_expert[size_t(e)];
    return double(d.n_experts) * s;
}

/// Average of the per-layer losses, the cross-layer reduction used in
/// training so the loss weight keeps its meaning when layer count changes.
inline double load_balancing_loss(std::span<const RoutingDecision> layers) {
    check(!layers.empty(), "load balancing loss needs at least one layer");
    double s = 0;
    for (const auto& d : layers) s += load_balancing_loss(d);
    return s / double(layers.size());
}

/// Differentiable per-layer L_LB: gradient flows through the mean router
/// probabilities P_i only; the token-count fractions f_i are constants.
template <typename T>
TensorId load_balancing_loss_on_tape(Tape<T>& tape, const RoutingResult& routing) {
    const auto& d = routing.decision;
    auto f = detail::assignment_fractions(d);
    Tensor<T> fc({d.n_experts});
    for (int64_t e = 0; e < d.n_experts; ++e) fc.data[size_t(e)] = T(f[size_t(e)]);
    TensorId p = tape.col_mean(routing.probs); // P_i
    TensorId dot = tape.sum(tape.mul(tape.constant(std::move(fc)), p));
    return tape.scale(dot, double(d.n_experts));
}

/// Model-level variant (layer-shared models): all (token, layer) routing
/// events pool into a single balance term.
template <typename T>
TensorId load_balancing_loss_on_tape_model_level(Tape<T>& tape,
                                                 std::span<const RoutingResult> layers) {
    check(!layers.empty(), "load balancing loss needs at least one layer");
    const int64_t ne = layers.front().decision.n_experts;
    std::vector<double> counts(size_t(ne), 0.0);
    double total = 0;
    for (const auto& r : layers) {
        check(r.decision.n_experts == ne, "model-level LBL: expert count mismatch");
        for (int64_t e = 0; e < ne; ++e)
            counts[size_t(e)] += double(r.decision.counts_per_expert[size_t(e)]);
        total += double(r.decision.total_assignments());
    }
    Tensor<T> fc({ne});
    for (int64_t e = 0; e < ne; ++e) fc.data[size_t(e)] = T(counts[size_t(e)] / total);
    TensorId fid = tape.constant(std::move(fc));

    // P_i pooled over layers = mean of the per-layer column means (all
    // layers see the same token count).
    TensorId p = tape.col_mean(layers.front().probs);
    for (size_t l = 1; l < layers.size(); ++l)
        p = tape.add(p, tape.col_mean(layers[l].probs));
    p = tape.scale(p, 1.0 / double(layers.size()));
    return tape.scale(tape.sum(tape.mul(fid, p)), double(ne));
}

/// Value-only model-level L_LB for monitoring.
inline double load_balancing_loss_model_level(std::span<const RoutingDecision> layers) {
    check(!layers.empty(), "load balancing loss needs at least one layer");
    const int64_t ne = layers.front().n_experts;
    std::vector<double> counts(size_t(ne), 0.0);
    std::vector<double> probs(size_t(ne), 0.0);
    double total = 0;
    for (const auto& d : layers) {
        check(d.n_experts == ne, "model-level LBL: expert count mismatch");
        for (int64_t e = 0; e < ne; ++e) {
            counts[size_t(e)] += double(d.counts_per_expert[size_t(e)]);
            probs[size_t(e)] += d.mean_prob_per_expert[size_t(e)];
        }
        total += double(d.total_assignments());
    }
    double s = 0;
    for (int64_t e = 0; e < ne; ++e)
        s += (counts[size_t(e)] / total) * (probs[size_t(e)] / double(layers.size()));
    return double(ne) * s;
}

/// L_RZ = mean over tokens of (log sum_j exp(logit_j))^2 for one layer
/// (value only; 64-bit accumulation).
template <typename T>
double router_z_loss(const Tensor<T>& logits) {
    check<ShapeError>(logits.rank() == 2, "router_z_loss expects [tokens, experts]");
    const int64_t n = logits.shape[0], d = logits.shape[1];
    check(n >= 1, "router_z_loss over an empty batch");
    double s = 0;
    for (int64_t r = 0; r < n; ++r) {
        double lse = kernels::logsumexp_row(logits.data.data() + r * d, d);
        s += lse * lse;
    }
    return s / double(n);
}

/// Differentiable per-layer L_RZ.
template <typename T>
TensorId router_z_loss_on_tape(Tape<T>& tape, TensorId logits) {
    TensorId lse = tape.logsumexp_rows(logits);
    return tape.mean(tape.mul(lse, lse));
}

} // namespace tinymoe
