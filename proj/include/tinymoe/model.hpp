// Copyright (c) 2026 tinymoe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tinymoe/common.hpp"
#include "tinymoe/losses.hpp"
#include "tinymoe/moe.hpp"
#include "tinymoe/rng.hpp"
#include "tinymoe/tape.hpp"
#include "tinymoe/tensor.hpp"

namespace tinymoe {

enum class NormKind { rmsnorm, nonparametric };

enum class InitDist { normal, truncated_normal };

struct InitConfig {
    InitDist dist = InitDist::truncated_normal;
    double std_dev = 0.02;
    double cutoff = 0.06;
};

/// Decoder-only transformer configuration. The feed-forward sublayer is
/// either a sparse expert layer (moe_enabled) or a dense SwiGLU FFN.
struct ModelConfig {
    int64_t model_dim = 128;
    int64_t n_layers = 4;
    int64_t n_heads = 4;
    int64_t vocab_size = 259;
    int64_t max_seq_len = 256;

    bool moe_enabled = true;
    MoeLayerConfig moe;       // when moe_enabled
    int64_t dense_ffn_dim = 0; // when !moe_enabled

    NormKind norm = NormKind::rmsnorm;
    double norm_eps = 1e-5;
    bool qk_norm = true;
    double rope_theta = 10000.0;
    InitConfig init;

    bool layer_shared_moe = false;
    LblLevel lbl_level = LblLevel::per_layer;

    int64_t head_dim() const { return model_dim / n_heads; }

    void validate() const {
        check<ConfigError>(vocab_size >= 1, "model: vocab_size must be >= 1");
        check<ConfigError>(n_layers >= 1 && n_heads >= 1 && model_dim >= 1 && max_seq_len >= 1,
                           "model: dimensions must be >= 1");
        check<ConfigError>(model_dim % n_heads == 0, "model: model_dim must divide by n_heads");
        check<ConfigError>(head_dim() % 2 == 0, "model: head_dim must be even for rotary embedding");
        check<ConfigError>(norm_eps > 0, "model: norm eps must be > 0");
        if (moe_enabled) {
            auto m = moe;
            m.model_dim = model_dim;
            m.validate();
        } else {
            check<ConfigError>(dense_ffn_dim >= 1, "model: dense ffn_dim must be >= 1");
            check<ConfigError>(!layer_shared_moe, "model: layer_shared_moe needs a sparse layer");
        }
        if (layer_shared_moe)
            check<ConfigError>(lbl_level == LblLevel::model_level,
                               "model: layer_shared_moe requires model-level load balancing");
        if (init.dist == InitDist::truncated_normal)
            check<ConfigError>(init.cutoff > 0, "model: init cutoff must be > 0");
    }
};

/// Parameter counts split by the two reporting conventions: `active`
/// counts the router; subtract `router` for the router-free convention.
struct ParamCounts {
    int64_t total = 0;
    int64_t active = 0;
    int64_t router = 0;
};

template <typename T>
struct AttentionParams {
    Tensor<T> wq, wk, wv, wo; // [d, d]
    Tensor<T> q_norm_w, k_norm_w; // [head_dim], empty unless qk_norm with rmsnorm
};

template <typename T>
struct LayerParams {
    Tensor<T> attn_norm_w; // [d], empty for nonparametric norm
    Tensor<T> ffn_norm_w;
    AttentionParams<T> attn;
    std::optional<MoeParams<T>> moe;   // per-layer sparse FFN
    std::optional<FfnParams<T>> dense; // dense FFN baseline
};

template <typename T>
struct ModelParams {
    ModelConfig cfg;
    Tensor<T> embedding; // [V, d]
    std::vector<LayerParams<T>> layers;
    std::optional<MoeParams<T>> shared_moe; // layer_shared_moe: the single pool
    Tensor<T> final_norm_w;
    Tensor<T> head; // [d, V], untied

    /// Visits every parameter exactly once, in a fixed order. Layer-shared
    /// expert pools appear once regardless of layer count.
    template <class F>
    void visit(F&& f) {
        auto maybe = [&](const std::string& name, Tensor<T>& t) {
            if (t.size() > 0) f(name, t);
        };
        auto visit_ffn = [&](const std::string& prefix, FfnParams<T>& ffn) {
            f(prefix + ".gate", ffn.gate);
            f(prefix + ".up", ffn.up);
            f(prefix + ".down", ffn.down);
        };
        auto visit_moe = [&](const std::string& prefix, MoeParams<T>& m) {
            f(prefix + ".router", m.router);
            for (size_t e = 0; e < m.experts.size(); ++e)
                visit_ffn(prefix + ".experts." + std::to_string(e), m.experts[e]);
            if (m.shared) visit_ffn(prefix + ".shared", *m.shared);
        };
        f("embedding", embedding);
        for (size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layers." + std::to_string(l);
            auto& layer = layers[l];
            maybe(p + ".attn_norm.weight", layer.attn_norm_w);
            f(p + ".attn.wq", layer.attn.wq);
            f(p + ".attn.wk", layer.attn.wk);
            f(p + ".attn.wv", layer.attn.wv);
            f(p + ".attn.wo", layer.attn.wo);
            maybe(p + ".attn.q_norm.weight", layer.attn.q_norm_w);
            maybe(p + ".attn.k_norm.weight", layer.attn.k_norm_w);
            maybe(p + ".ffn_norm.weight", layer.ffn_norm_w);
            if (layer.moe) visit_moe(p + ".moe", *layer.moe);
            if (layer.dense) visit_ffn(p + ".ffn", *layer.dense);
        }
        if (shared_moe) visit_moe("shared_moe", *shared_moe);
        maybe("final_norm.weight", final_norm_w);
        f("head", head);
    }
};

namespace detail {

template <typename T>
Tensor<T> draw_init(Shape shape, const InitConfig& init, RngStream rng) {
    if (init.dist == InitDist::truncated_normal)
        return random_trunc_normal<T>(std::move(shape), init.std_dev, init.cutoff, rng);
    return random_normal<T>(std::move(shape), init.std_dev, rng);
}

template <typename T>
FfnParams<T> init_ffn(int64_t d, int64_t ffn, const InitConfig& init, const RngStream& rng) {
    FfnParams<T> p;
    p.gate = draw_init<T>({d, ffn}, init, rng.split("gate"));
    p.up = draw_init<T>({d, ffn}, init, rng.split("up"));
    p.down = draw_init<T>({ffn, d}, init, rng.split("down"));
    return p;
}

template <typename T>
MoeParams<T> init_moe(const ModelConfig& cfg, const RngStream& rng) {
    MoeParams<T> m;
    m.router = draw_init<T>({cfg.model_dim, cfg.moe.n_experts}, cfg.init, rng.split("router"));
    m.experts.reserve(size_t(cfg.moe.n_experts));
    for (int64_t e = 0; e < cfg.moe.n_experts; ++e)
        m.experts.push_back(init_ffn<T>(cfg.model_dim, cfg.moe.ffn_dim, cfg.init,
                                        rng.split("expert", uint64_t(e))));
    if (cfg.moe.shared_experts == 1)
        m.shared = init_ffn<T>(cfg.model_dim, cfg.moe.ffn_dim, cfg.init, rng.split("shared"));
    return m;
}

} // namespace detail

/// Deterministic parameter initialization: weight matrices from the
/// configured distribution (per-tensor named streams), norm weights at 1.
template <typename T>
ModelParams<T> init_model(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    ModelParams<T> p;
    p.cfg = cfg;
    RngStream root(seed, "model-init");

    const int64_t d = cfg.model_dim;
    p.embedding = detail::draw_init<T>({cfg.vocab_size, d}, cfg.init, root.split("embedding"));
    p.head = detail::draw_init<T>({d, cfg.vocab_size}, cfg.init, root.split("head"));
    if (cfg.norm == NormKind::rmsnorm) p.final_norm_w = Tensor<T>::full({d}, T(1));

    p.layers.resize(size_t(cfg.n_layers));
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        auto& layer = p.layers[size_t(l)];
        auto lrng = root.split("layer", uint64_t(l));
        if (cfg.norm == NormKind::rmsnorm) {
            layer.attn_norm_w = Tensor<T>::full({d}, T(1));
            layer.ffn_norm_w = Tensor<T>::full({d}, T(1));
        }
        layer.attn.wq = detail::draw_init<T>({d, d}, cfg.init, lrng.split("wq"));
        layer.attn.wk = detail::draw_init<T>({d, d}, cfg.init, lrng.split("wk"));
        layer.attn.wv = detail::draw_init<T>({d, d}, cfg.init, lrng.split("wv"));
        layer.attn.wo = detail::draw_init<T>({d, d}, cfg.init, lrng.split("wo"));
        if (cfg.qk_norm && cfg.norm == NormKind::rmsnorm) {
            layer.attn.q_norm_w = Tensor<T>::full({cfg.head_dim()}, T(1));
            layer.attn.k_norm_w = Tensor<T>::full({cfg.head_dim()}, T(1));
        }
        if (cfg.moe_enabled && !cfg.layer_shared_moe) {
            ModelConfig lc = cfg;
            lc.moe.model_dim = d;
            layer.moe = detail::init_moe<T>(lc, lrng.split("moe"));
        } else if (!cfg.moe_enabled) {
            layer.dense = detail::init_ffn<T>(d, cfg.dense_ffn_dim, cfg.init, lrng.split("ffn"));
        }
    }
    if (cfg.moe_enabled && cfg.layer_shared_moe) {
        ModelConfig sc = cfg;
        sc.moe.model_dim = d;
        p.shared_moe = detail::init_moe<T>(sc, root.split("shared_moe"));
    }
    return p;
}

/// Test/analysis hook: overrides the router so token t at layer l goes to
/// exactly one expert with combination weight 1.
struct ForcedRouting {
    std::vector<std::vector<int32_t>> expert; // [layer][token]
};

/// Everything the forward pass produces besides activations: the logits
/// node plus per-layer routing (empty for the dense baseline).
struct ForwardOutput {
    TensorId logits; // [B*S, vocab]
    std::vector<RoutingResult> routing;
};

/// Binds every parameter tensor to a tape leaf so a forward/backward pass
/// can read gradients back out in visit order.
template <typename T>
struct BoundModel {
    Tape<T>* tape = nullptr;
    ModelParams<T>* params = nullptr;
    std::vector<std::pair<std::string, TensorId>> leaves;
    std::vector<std::pair<std::string, Tensor<T>*>> tensors;

    TensorId id_of(const std::string& name) const {
        for (const auto& [n, id] : leaves)
            if (n == name) return id;
        throw ParamError("unknown parameter: " + name);
    }
};

template <typename T>
BoundModel<T> bind_model(Tape<T>& tape, ModelParams<T>& params, bool requires_grad = true) {
    BoundModel<T> b;
    b.tape = &tape;
    b.params = &params;
    params.visit([&](const std::string& name, Tensor<T>& t) {
        b.leaves.emplace_back(name, tape.leaf(t, requires_grad));
        b.tensors.emplace_back(name, &t);
    });
    return b;
}

namespace detail {

template <typename T>
MoeIds<T> moe_leaves(const BoundModel<T>& b, const std::string& prefix, const MoeLayerConfig& mc) {
    MoeIds<T> ids;
    ids.router = b.id_of(prefix + ".router");
    ids.experts.resize(size_t(mc.n_experts));
    for (int64_t e = 0; e < mc.n_experts; ++e) {
        const std::string ep = prefix + ".experts." + std::to_string(e);
        ids.experts[size_t(e)] = {b.id_of(ep + ".gate"), b.id_of(ep + ".up"), b.id_of(ep + ".down")};
    }
    if (mc.shared_experts == 1)
        ids.shared = FfnIds<T>{b.id_of(prefix + ".shared.gate"), b.id_of(prefix + ".shared.up"),
                               b.id_of(prefix + ".shared.down")};
    return ids;
}

/// Forced decision: one expert per token, weight 1 (probs matrix is a
/// constant indicator, so no gradient flows into routing).
template <typename T>
RoutingResult forced_routing(Tape<T>& tape, const std::vector<int32_t>& experts, int64_t n_experts) {
    const int64_t tt = int64_t(experts.size());
    Tensor<T> probs({tt, n_experts});
    RoutingResult r;
    auto& d = r.decision;
    d.mode = RoutingMode::token_choice;
    d.n_experts = n_experts;
    d.k = 1;
    d.n_tokens = tt;
    d.expert_ids.resize(size_t(tt));
    d.probs.resize(size_t(tt));
    for (int64_t t = 0; t < tt; ++t) {
        const int32_t e = experts[size_t(t)];
        check(e >= 0 && e < n_experts, "forced routing expert out of range");
        probs.data[t * n_experts + e] = T(1);
        d.expert_ids[size_t(t)] = {e};
        d.probs[size_t(t)] = {1.0f};
    }
    detail::fill_decision_stats(d, probs);
    r.probs = tape.constant(std::move(probs));
    r.logits = tape.constant(Tensor<T>::zeros({tt, n_experts}));
    return r;
}

} // namespace detail

/// Pre-norm decoder forward: x + attn(norm(x)), then x + ffn(norm(x)),
/// causal mask, QK-Norm and rotary embeddings on the per-head projections.
/// With layer_shared_moe the same expert pool serves every layer.
template <typename T>
ForwardOutput forward(const BoundModel<T>& bound, const std::vector<int32_t>& token_ids,
                      int64_t batch, int64_t seq, const ForcedRouting* forced = nullptr) {
    Tape<T>& tape = *bound.tape;
    const ModelConfig& cfg = bound.params->cfg;
    check<ShapeError>(int64_t(token_ids.size()) == batch * seq, "token id count != batch*seq");
    check(seq >= 1 && seq <= cfg.max_seq_len, "sequence length out of range");
    for (int32_t id : token_ids)
        check(id >= 0 && id < cfg.vocab_size, "token id out of range: " + std::to_string(id));

    const int64_t d = cfg.model_dim;
    const int64_t h = cfg.n_heads;
    const int64_t hd = cfg.head_dim();
    const int64_t tt = batch * seq;

    auto norm_full = [&](TensorId x, const std::string& wname) {
        if (cfg.norm == NormKind::rmsnorm)
            return tape.rmsnorm(x, bound.id_of(wname), cfg.norm_eps);
        return tape.layernorm_np(x, cfg.norm_eps);
    };

    std::vector<int32_t> head_pos(size_t(tt * h));
    for (int64_t r = 0; r < tt * h; ++r) head_pos[size_t(r)] = int32_t((r / h) % seq);

    ForwardOutput out;
    TensorId x = tape.embedding(bound.id_of("embedding"), token_ids);

    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        const std::string lp = "layers." + std::to_string(l);
        TensorId hnorm = norm_full(x, lp + ".attn_norm.weight");
        TensorId q = tape.matmul(hnorm, bound.id_of(lp + ".attn.wq"));
        TensorId k = tape.matmul(hnorm, bound.id_of(lp + ".attn.wk"));
        TensorId v = tape.matmul(hnorm, bound.id_of(lp + ".attn.wv"));

        q = tape.reshape(q, {tt * h, hd});
        k = tape.reshape(k, {tt * h, hd});
        if (cfg.qk_norm) {
            if (cfg.norm == NormKind::rmsnorm) {
                q = tape.rmsnorm(q, bound.id_of(lp + ".attn.q_norm.weight"), cfg.norm_eps);
                k = tape.rmsnorm(k, bound.id_of(lp + ".attn.k_norm.weight"), cfg.norm_eps);
            } else {
                q = tape.layernorm_np(q, cfg.norm_eps);
                k = tape.layernorm_np(k, cfg.norm_eps);
            }
        }
        q = tape.rope(q, head_pos, cfg.rope_theta);
        k = tape.rope(k, head_pos, cfg.rope_theta);
        q = tape.reshape(q, {tt, d});
        k = tape.reshape(k, {tt, d});

        TensorId attn = tape.causal_attention(q, k, v, batch, seq, h);
        x = tape.add(x, tape.matmul(attn, bound.id_of(lp + ".attn.wo")));

        TensorId ffn_in = norm_full(x, lp + ".ffn_norm.weight");
        TensorId y;
        if (cfg.moe_enabled) {
            const std::string mp = cfg.layer_shared_moe ? std::string("shared_moe") : lp + ".moe";
            MoeLayerConfig mc = cfg.moe;
            mc.model_dim = d;
            MoeIds<T> mids = detail::moe_leaves(bound, mp, mc);
            RoutingResult routing;
            if (forced) {
                check<ConfigError>(int64_t(forced->expert.size()) == cfg.n_layers,
                                   "forced routing layer count mismatch");
                routing = detail::forced_routing(tape, forced->expert[size_t(l)], mc.n_experts);
            } else if (mc.routing_mode == RoutingMode::token_choice) {
                routing = route_token_choice(tape, ffn_in, mids.router, mc.n_active);
            } else {
                routing = route_expert_choice(tape, ffn_in, mids.router, mc.capacity_factor);
            }
            y = moe_forward(tape, ffn_in, mc, mids, routing);
            out.routing.push_back(std::move(routing));
        } else {
            FfnIds<T> fids{bound.id_of(lp + ".ffn.gate"), bound.id_of(lp + ".ffn.up"),
                           bound.id_of(lp + ".ffn.down")};
            y = ffn_forward(tape, ffn_in, fids);
        }
        x = tape.add(x, y);
    }

    TensorId fin = norm_full(x, "final_norm.weight");
    out.logits = tape.matmul(fin, bound.id_of("head"));
    return out;
}

/// Clones a dense model into a sparse one: each expert starts as a copy of
/// the dense FFN, the router is freshly initialized, everything else is
/// copied verbatim. noise_fraction of each expert's FFN entries (chosen
/// independently per expert) is replaced by fresh normal draws.
template <typename T>
ModelParams<T> upcycle(const ModelParams<T>& dense, const MoeLayerConfig& target_moe,
                       double noise_fraction, uint64_t seed) {
    check<ConfigError>(!dense.cfg.moe_enabled, "upcycle source must be a dense model");
    check(noise_fraction >= 0 && noise_fraction <= 1, "noise_fraction must be in [0,1]");
    MoeLayerConfig mc = target_moe;
    mc.model_dim = dense.cfg.model_dim;
    mc.validate();
    check<ConfigError>(mc.ffn_dim == dense.cfg.dense_ffn_dim,
                       "upcycle: expert ffn_dim must equal the dense ffn_dim");

    ModelParams<T> up;
    up.cfg = dense.cfg;
    up.cfg.moe_enabled = true;
    up.cfg.moe = mc;
    up.cfg.dense_ffn_dim = 0;
    up.cfg.validate();

    up.embedding = dense.embedding;
    up.head = dense.head;
    up.final_norm_w = dense.final_norm_w;
    up.layers.resize(dense.layers.size());

    RngStream root(seed, "upcycle");
    const double noise_std = dense.cfg.init.std_dev;
    auto add_noise = [&](Tensor<T>& t, RngStream rng) {
        if (noise_fraction == 0) return;
        const int64_t n = t.size();
        const auto n_replace = int64_t(std::llround(noise_fraction * double(n)));
        // Partial Fisher-Yates: first n_replace entries of a virtual shuffle.
        std::vector<int64_t> pool(size_t(n));
        std::iota(pool.begin(), pool.end(), 0);
        for (int64_t i = 0; i < n_replace; ++i) {
            const int64_t j = i + int64_t(rng.next_u64() % uint64_t(n - i));
            std::swap(pool[size_t(i)], pool[size_t(j)]);
            t.data[size_t(pool[size_t(i)])] = T(rng.next_normal() * noise_std);
        }
    };

    for (size_t l = 0; l < dense.layers.size(); ++l) {
        const auto& src = dense.layers[l];
        auto& dst = up.layers[l];
        dst.attn_norm_w = src.attn_norm_w;
        dst.ffn_norm_w = src.ffn_norm_w;
        dst.attn = src.attn;
        check<ConfigError>(src.dense.has_value(), "upcycle: dense layer parameters missing");

        auto lrng = root.split("layer", uint64_t(l));
        MoeParams<T> m;
        m.router = detail::draw_init<T>({mc.model_dim, mc.n_experts}, dense.cfg.init,
                                        lrng.split("router"));
        m.experts.resize(size_t(mc.n_experts));
        for (int64_t e = 0; e < mc.n_experts; ++e) {
            auto erng = lrng.split("expert", uint64_t(e));
            auto& ex = m.experts[size_t(e)];
            ex = *src.dense;
            add_noise(ex.gate, erng.split("gate"));
            add_noise(ex.up, erng.split("up"));
            add_noise(ex.down, erng.split("down"));
        }
        if (mc.shared_experts == 1)
            m.shared = detail::init_ffn<T>(mc.model_dim, mc.ffn_dim, dense.cfg.init,
                                           lrng.split("shared"));
        dst.moe = std::move(m);
    }
    return up;
}

/// Parameter counting for both reporting conventions. `active` counts the
/// embeddings, attention, norms, router, and k (+shared) experts per layer;
/// layer-shared pools count once toward `total` but per layer toward
/// `active` (the per-token compute convention).
inline ParamCounts count_params(const ModelConfig& cfg) {
    cfg.validate();
    const int64_t d = cfg.model_dim;
    ParamCounts c;
    auto ffn_params = [&](int64_t ffn) { return 3 * d * ffn; };

    int64_t dense_side = cfg.vocab_size * d * 2; // embedding + untied head
    if (cfg.norm == NormKind::rmsnorm) dense_side += d; // final norm
    int64_t per_layer = 4 * d * d;
    if (cfg.norm == NormKind::rmsnorm) {
        per_layer += 2 * d;
        if (cfg.qk_norm) per_layer += 2 * cfg.head_dim();
    }
    c.total = dense_side + cfg.n_layers * per_layer;
    c.active = c.total;

    if (!cfg.moe_enabled) {
        c.total += cfg.n_layers * ffn_params(cfg.dense_ffn_dim);
        c.active += cfg.n_layers * ffn_params(cfg.dense_ffn_dim);
        return c;
    }

    const int64_t router = d * cfg.moe.n_experts;
    const int64_t pool = cfg.moe.n_experts * ffn_params(cfg.moe.ffn_dim) +
                         cfg.moe.shared_experts * ffn_params(cfg.moe.ffn_dim);
    const int64_t active_ffn = cfg.moe.n_active * ffn_params(cfg.moe.ffn_dim) +
                               cfg.moe.shared_experts * ffn_params(cfg.moe.ffn_dim);
    if (cfg.layer_shared_moe) {
        c.total += router + pool;
        c.router = router;
    } else {
        c.total += cfg.n_layers * (router + pool);
        c.router = cfg.n_layers * router;
    }
    c.active += c.router + cfg.n_layers * active_ffn;
    return c;
}

} // namespace tinymoe
