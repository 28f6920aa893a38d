// Copyright (c) 2026 tinymoe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "tinymoe/common.hpp"
#include "tinymoe/tensor.hpp"

namespace tinymoe {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
};

struct TrainConfig {
    double lr_peak = 1e-3;
    double lr_min = 1e-4;
    int64_t warmup_steps = 100;
    int64_t total_steps = 500;
    int64_t anneal_steps = 50;
    int64_t batch_size_tokens = 512;
    AdamWConfig adamw;
    double grad_clip_norm = 1.0;
    double alpha = 0.01;  // load balancing loss weight
    double beta = 0.001;  // router z-loss weight
    int64_t log_every = 10;
    int64_t checkpoint_every = 250;
    uint64_t seed = 0;
    std::string init_checkpoint; // empty = train from scratch

    void validate() const {
        check<ConfigError>(total_steps >= 1, "train: total_steps must be >= 1");
        check<ConfigError>(warmup_steps >= 0 && anneal_steps >= 0 &&
                               warmup_steps + anneal_steps <= total_steps,
                           "train: warmup_steps + anneal_steps must be <= total_steps");
        check<ConfigError>(adamw.eps > 0, "train: adamw eps must be > 0");
        check<ConfigError>(grad_clip_norm > 0, "train: grad_clip_norm must be > 0");
        check<ConfigError>(alpha >= 0 && beta >= 0, "train: loss weights must be >= 0");
        check<ConfigError>(batch_size_tokens >= 1, "train: batch_size_tokens must be >= 1");
        check<ConfigError>(lr_peak > 0 && lr_min >= 0, "train: learning rates must be positive");
        check<ConfigError>(log_every >= 1 && checkpoint_every >= 1,
                           "train: log/checkpoint intervals must be >= 1");
    }
};

/// Learning-rate schedule: linear 0 -> lr_peak over warmup, cosine
/// lr_peak -> lr_min over [warmup, total - anneal], then terminal linear
/// decay lr_min -> 0 over the final anneal_steps. Continuous at both
/// segment boundaries.
inline double lr_at(int64_t step, const TrainConfig& cfg) {
    check(step >= 0 && step <= cfg.total_steps, "lr_at: step out of range");
    const int64_t anneal_start = cfg.total_steps - cfg.anneal_steps;
    if (step < cfg.warmup_steps)
        return cfg.lr_peak * double(step) / double(cfg.warmup_steps);
    if (step >= anneal_start && cfg.anneal_steps > 0)
        return cfg.lr_min * double(cfg.total_steps - step) / double(cfg.anneal_steps);
    if (anneal_start == cfg.warmup_steps) return cfg.lr_peak;
    const double frac = double(step - cfg.warmup_steps) / double(anneal_start - cfg.warmup_steps);
    return cfg.lr_min +
           0.5 * (cfg.lr_peak - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

/// Per-parameter AdamW accumulators plus the shared step counter.
template <typename T>
struct OptimizerState {
    struct Moments {
        Tensor<T> m, v;
    };
    std::vector<Moments> moments; // aligned with the model's visit order
    int64_t step = 0;
};

/// Scales all gradients so the global L2 norm is at most max_norm; returns
/// the applied factor. The norm is accumulated in 64-bit.
template <typename T>
double clip_global_norm(std::vector<std::vector<T>*>& grads, double max_norm,
                        double* total_norm_out = nullptr) {
    check(max_norm > 0, "clip: max_norm must be > 0");
    double sq = 0;
    for (const auto* g : grads)
        for (T v : *g) sq += double(v) * double(v);
    const double total = std::sqrt(sq);
    if (total_norm_out) *total_norm_out = total;
    if (total <= max_norm) return 1.0;
    const double scale = max_norm / total;
    for (auto* g : grads)
        for (T& v : *g) v = T(double(v) * scale);
    return scale;
}

/// One decoupled-weight-decay Adam update for a single tensor. Biased
/// moments are corrected with the post-increment step count; weight decay
/// applies to every parameter (norms and embeddings included).
template <typename T>
void adamw_update(Tensor<T>& param, const std::vector<T>& grad,
                  typename OptimizerState<T>::Moments& mom, int64_t step_after,
                  double lr, const AdamWConfig& cfg, const std::string& name) {
    check<NumericError>(int64_t(grad.size()) == param.size(),
                        "adamw: gradient size mismatch for " + name);
    if (mom.m.size() == 0) {
        mom.m = Tensor<T>::zeros(param.shape);
        mom.v = Tensor<T>::zeros(param.shape);
    }
    const double b1 = cfg.beta1, b2 = cfg.beta2;
    const double bc1 = 1.0 - std::pow(b1, double(step_after));
    const double bc2 = 1.0 - std::pow(b2, double(step_after));
    for (int64_t i = 0; i < param.size(); ++i) {
        const double g = double(grad[size_t(i)]);
        if (!std::isfinite(g))
            throw NumericError("non-finite gradient in parameter " + name);
        const double m = b1 * double(mom.m.data[size_t(i)]) + (1 - b1) * g;
        const double v = b2 * double(mom.v.data[size_t(i)]) + (1 - b2) * g * g;
        mom.m.data[size_t(i)] = T(m);
        mom.v.data[size_t(i)] = T(v);
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        double p = double(param.data[size_t(i)]);
        p -= lr * cfg.weight_decay * p; // decoupled decay
        p -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
        param.data[size_t(i)] = T(p);
    }
}

} // namespace tinymoe
