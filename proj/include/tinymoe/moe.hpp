// Copyright (c) 2026 tinymoe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "tinymoe/common.hpp"
#include "tinymoe/tape.hpp"

namespace tinymoe {

enum class RoutingMode { token_choice, expert_choice };

enum class LblLevel { per_layer, model_level };

/// Static expert topology of one sparse layer.
struct MoeLayerConfig {
    int64_t n_experts = 0;       // total experts
    int64_t n_active = 0;        // routed experts per token (token choice)
    int64_t ffn_dim = 0;         // hidden width per expert
    int64_t model_dim = 0;
    RoutingMode routing_mode = RoutingMode::token_choice;
    double capacity_factor = 0;  // expert choice only
    int64_t shared_experts = 0;  // 0 or 1

    void validate() const {
        check<ConfigError>(n_experts >= 1, "moe: n_experts must be >= 1");
        check<ConfigError>(n_active >= 1 && n_active <= n_experts,
                           "moe: need 1 <= n_active <= n_experts");
        check<ConfigError>(ffn_dim >= 1, "moe: ffn_dim must be >= 1");
        check<ConfigError>(model_dim >= 1, "moe: model_dim must be >= 1");
        check<ConfigError>(shared_experts == 0 || shared_experts == 1,
                           "moe: shared_experts must be 0 or 1");
        if (routing_mode == RoutingMode::expert_choice) {
            check<ConfigError>(capacity_factor > 0,
                               "moe: expert_choice needs capacity_factor > 0");
            check<ConfigError>(shared_experts == 0,
                               "moe: expert_choice does not combine with a shared expert");
        }
    }
};

/// Per-batch record of which experts each token selected (or was selected
/// by), with the softmax probabilities used as combination weights.
struct RoutingDecision {
    RoutingMode mode = RoutingMode::token_choice;
    int64_t n_experts = 0;
    int64_t k = 0;          // token choice: experts per token; expert choice: capacity c
    int64_t n_tokens = 0;

    // Per token, selected experts. Token choice: exactly k, descending prob
    // (ties by lowest expert index). Expert choice: 0..n_experts entries.
    std::vector<std::vector<int32_t>> expert_ids;
    std::vector<std::vector<float>> probs;

    std::vector<int64_t> counts_per_expert;
    std::vector<double> mean_prob_per_expert;

    // Mean squared log-sum-exp of the router logits (monitoring aid).
    std::optional<double> mean_sq_lse;

    int64_t total_assignments() const {
        int64_t s = 0;
        for (int64_t c : counts_per_expert) s += c;
        return s;
    }
};

/// Routing output: the value-level decision plus tape handles for the
/// differentiable path (probabilities and raw logits).
struct RoutingResult {
    RoutingDecision decision;
    TensorId probs;   // [T, n_experts]
    TensorId logits;  // [T, n_experts]
};

/// One SwiGLU feed-forward: out = (silu(x*gate) .* (x*up)) * down.
template <typename T>
struct FfnParams {
    Tensor<T> gate; // [model_dim, ffn_dim]
    Tensor<T> up;   // [model_dim, ffn_dim]
    Tensor<T> down; // [ffn_dim, model_dim]
};

template <typename T>
struct FfnIds {
    TensorId gate, up, down;
};

template <typename T>
TensorId ffn_forward(Tape<T>& tape, TensorId x, const FfnIds<T>& w) {
    return tape.matmul(tape.swiglu(tape.matmul(x, w.gate), tape.matmul(x, w.up)), w.down);
}

/// Parameters of one sparse layer: router + per-expert FFNs (+ optional
/// always-active shared expert).
template <typename T>
struct MoeParams {
    Tensor<T> router; // [model_dim, n_experts]
    std::vector<FfnParams<T>> experts;
    std::optional<FfnParams<T>> shared;
};

template <typename T>
struct MoeIds {
    TensorId router;
    std::vector<FfnIds<T>> experts;
    std::optional<FfnIds<T>> shared;
};

namespace detail {

template <typename T>
void fill_decision_stats(RoutingDecision& d, const Tensor<T>& probs) {
    const int64_t ne = d.n_experts;
    const int64_t tt = d.n_tokens;
    d.counts_per_expert.assign(size_t(ne), 0);
    for (const auto& ids : d.expert_ids)
        for (int32_t e : ids) d.counts_per_expert[size_t(e)]++;
    d.mean_prob_per_expert.assign(size_t(ne), 0.0);
    for (int64_t t = 0; t < tt; ++t)
        for (int64_t e = 0; e < ne; ++e)
            d.mean_prob_per_expert[size_t(e)] += double(probs.data[t * ne + e]);
    for (auto& p : d.mean_prob_per_expert) p /= double(tt);
}

} // namespace detail

/// Dropless token-choice routing: softmax over all experts, then each token
/// keeps its top-k experts with the softmax values as weights (no
/// renormalization, no capacity limit, no dropped tokens).
template <typename T>
RoutingResult route_token_choice(Tape<T>& tape, TensorId x, TensorId router_weight, int64_t k) {
    const auto& tx = tape.value(x);
    const auto& tw = tape.value(router_weight);
    check<ShapeError>(tx.rank() == 2 && tw.rank() == 2 && tx.shape[1] == tw.shape[0],
                      "router shapes " + shape_str(tx.shape) + " vs " + shape_str(tw.shape));
    const int64_t n_experts = tw.shape[1];
    check(k >= 1 && k <= n_experts, "route_token_choice: k out of range");

    RoutingResult r;
    r.logits = tape.matmul(x, router_weight);
    const auto& lv = tape.value(r.logits);
    check<NumericError>(lv.finite(), "router logits are not finite");
    r.probs = tape.softmax(r.logits);
    const auto& pv = tape.value(r.probs);

    const int64_t tt = tx.shape[0];
    auto& d = r.decision;
    d.mode = RoutingMode::token_choice;
    d.n_experts = n_experts;
    d.k = k;
    d.n_tokens = tt;
    d.expert_ids.resize(size_t(tt));
    d.probs.resize(size_t(tt));
    for (int64_t t = 0; t < tt; ++t) {
        auto ids = topk_indices(pv.data.data() + t * n_experts, n_experts, k);
        auto& ps = d.probs[size_t(t)];
        ps.resize(ids.size());
        for (size_t i = 0; i < ids.size(); ++i)
            ps[i] = float(pv.data[t * n_experts + ids[i]]);
        d.expert_ids[size_t(t)] = std::move(ids);
    }
    detail::fill_decision_stats(d, pv);
    double msl = 0;
    for (int64_t t = 0; t < tt; ++t) {
        double lse = kernels::logsumexp_row(lv.data.data() + t * n_experts, n_experts);
        msl += lse * lse;
    }
    d.mean_sq_lse = msl / double(tt);
    return r;
}

/// Expert-choice routing: each expert takes its top-c tokens by its own
/// probability column (ties by lowest token index), c = floor(cf * T / N_E).
/// Tokens picked by no expert pass through on the residual stream only.
template <typename T>
RoutingResult route_expert_choice(Tape<T>& tape, TensorId x, TensorId router_weight,
                                  double capacity_factor) {
    const auto& tx = tape.value(x);
    const auto& tw = tape.value(router_weight);
    check<ShapeError>(tx.rank() == 2 && tw.rank() == 2 && tx.shape[1] == tw.shape[0],
                      "router shapes " + shape_str(tx.shape) + " vs " + shape_str(tw.shape));
    const int64_t n_experts = tw.shape[1];
    const int64_t tt = tx.shape[0];
    check(tt >= 1, "route_expert_choice: empty batch");
    const int64_t capacity = int64_t(capacity_factor * double(tt) / double(n_experts));
    check<ConfigError>(capacity >= 1, "expert_choice capacity floor(cf*T/N_E) is < 1");

    RoutingResult r;
    r.logits = tape.matmul(x, router_weight);
    const auto& lv = tape.value(r.logits);
    check<NumericError>(lv.finite(), "router logits are not finite");
    r.probs = tape.softmax(r.logits);
    const auto& pv = tape.value(r.probs);

    auto& d = r.decision;
    d.mode = RoutingMode::expert_choice;
    d.n_experts = n_experts;
    d.k = capacity;
    d.n_tokens = tt;
    d.expert_ids.resize(size_t(tt));
    d.probs.resize(size_t(tt));
    std::vector<T> col(size_t(tt));
    for (int64_t e = 0; e < n_experts; ++e) {
        for (int64_t t = 0; t < tt; ++t) col[size_t(t)] = pv.data[t * n_experts + e];
        auto chosen = topk_indices(col.data(), tt, capacity);
        for (int32_t t : chosen) {
            d.expert_ids[size_t(t)].push_back(int32_t(e));
            d.probs[size_t(t)].push_back(float(pv.data[int64_t(t) * n_experts + e]));
        }
    }
    detail::fill_decision_stats(d, pv);
    double msl = 0;
    for (int64_t t = 0; t < tt; ++t) {
        double lse = kernels::logsumexp_row(lv.data.data() + t * n_experts, n_experts);
        msl += lse * lse;
    }
    d.mean_sq_lse = msl / double(tt);
    return r;
}

/// Plain SwiGLU FFN applied to every token; the always-active expert.
template <typename T>
TensorId shared_expert_forward(Tape<T>& tape, TensorId x, const MoeLayerConfig& cfg,
                               const MoeIds<T>& params) {
    check<ConfigError>(cfg.shared_experts == 1,
                       "shared_expert_forward called with shared_experts=0");
    check<ConfigError>(params.shared.has_value(), "shared expert parameters missing");
    return ffn_forward(tape, x, *params.shared);
}

/// Sparse layer forward: output[t] = sum over chosen experts of
/// prob[t,e] * E_e(x[t]), plus the shared expert (weight 1) when configured.
/// Tokens are grouped per expert (gather -> batched SwiGLU -> weighted
/// scatter-add); accumulation order is fixed for determinism.
template <typename T>
TensorId moe_forward(Tape<T>& tape, TensorId x, const MoeLayerConfig& cfg,
                     const MoeIds<T>& params, const RoutingResult& routing) {
    const auto& tx = tape.value(x);
    const auto& d = routing.decision;
    check<ConfigError>(int64_t(params.experts.size()) == cfg.n_experts,
                       "moe_forward: expert count does not match config");
    check<ConfigError>(d.n_experts == cfg.n_experts && d.n_tokens == tx.shape[0],
                       "moe_forward: decision does not match input/config");
    const int64_t tt = tx.shape[0];
    const int64_t ne = cfg.n_experts;

    // Tokens per expert, in ascending token order.
    std::vector<std::vector<int32_t>> groups(size_t(ne));
    for (int64_t t = 0; t < tt; ++t)
        for (int32_t e : d.expert_ids[size_t(t)]) groups[size_t(e)].push_back(int32_t(t));

    TensorId out = tape.constant(Tensor<T>::zeros({tt, cfg.model_dim}));
    for (int64_t e = 0; e < ne; ++e) {
        const auto& rows = groups[size_t(e)];
        if (rows.empty()) continue;
        TensorId xe = tape.gather_rows(x, rows);
        TensorId he = ffn_forward(tape, xe, params.experts[size_t(e)]);
        std::vector<int64_t> flat(rows.size());
        for (size_t i = 0; i < rows.size(); ++i) flat[i] = int64_t(rows[i]) * ne + e;
        TensorId pe = tape.gather_at(routing.probs, std::move(flat));
        TensorId scaled = tape.row_scale(he, pe);
        out = tape.add(out, tape.scatter_add_rows(scaled, rows, tt));
    }
    if (cfg.shared_experts == 1)
        out = tape.add(out, shared_expert_forward(tape, x, cfg, params));
    return out;
}

/// Exact binomial coefficient C(n, k), arbitrary precision.
inline boost::multiprecision::cpp_int combinations(int64_t n_experts, int64_t n_active) {
    check(n_active >= 0 && n_active <= n_experts && n_experts >= 0,
          "combinations: need 0 <= n_active <= n_experts");
    boost::multiprecision::cpp_int c = 1;
    int64_t k = std::min(n_active, n_experts - n_active);
    for (int64_t i = 1; i <= k; ++i) {
        c *= (n_experts - k + i);
        c /= i;
    }
    return c;
}

} // namespace tinymoe
