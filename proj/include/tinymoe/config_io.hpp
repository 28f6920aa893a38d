// Copyright (c) 2026 tinymoe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "tinymoe/common.hpp"
#include "tinymoe/model.hpp"
#include "tinymoe/optim.hpp"

namespace tinymoe {

using json = nlohmann::json;

struct DataConfig {
    std::string manifest; // corpus manifest path
    int64_t seq_len = 128;

    void validate() const {
        check<ConfigError>(seq_len >= 1, "data: seq_len must be >= 1");
    }
};

/// One runnable experiment: model + objective/optimizer + data + seed.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    DataConfig data;
    uint64_t seed = 0;
    std::string preset; // informational: which preset produced this config

    void validate() const {
        model.validate();
        train.validate();
        data.validate();
        check<ConfigError>(train.batch_size_tokens % data.seq_len == 0,
                           "batch_size_tokens must be a multiple of seq_len");
        check<ConfigError>(data.seq_len <= model.max_seq_len,
                           "data seq_len exceeds model max_seq_len");
    }
};

// --- enum <-> string -------------------------------------------------------

inline std::string to_string(RoutingMode m) {
    return m == RoutingMode::token_choice ? "token_choice" : "expert_choice";
}
inline std::string to_string(LblLevel l) {
    return l == LblLevel::per_layer ? "per_layer" : "model_level";
}
inline std::string to_string(NormKind n) {
    return n == NormKind::rmsnorm ? "rmsnorm" : "nonparametric";
}
inline std::string to_string(InitDist d) {
    return d == InitDist::truncated_normal ? "trunc_normal" : "normal";
}

namespace detail {

template <class E>
E parse_enum(const std::string& s, std::initializer_list<std::pair<const char*, E>> table,
             const std::string& what) {
    for (const auto& [name, val] : table)
        if (s == name) return val;
    throw ConfigError("unknown " + what + ": '" + s + "'");
}

} // namespace detail

inline RoutingMode routing_mode_from(const std::string& s) {
    return detail::parse_enum<RoutingMode>(
        s, {{"token_choice", RoutingMode::token_choice}, {"expert_choice", RoutingMode::expert_choice}},
        "routing mode");
}
inline LblLevel lbl_level_from(const std::string& s) {
    return detail::parse_enum<LblLevel>(
        s, {{"per_layer", LblLevel::per_layer}, {"model_level", LblLevel::model_level}}, "lbl level");
}
inline NormKind norm_kind_from(const std::string& s) {
    return detail::parse_enum<NormKind>(
        s, {{"rmsnorm", NormKind::rmsnorm}, {"nonparametric", NormKind::nonparametric}}, "norm kind");
}
inline InitDist init_dist_from(const std::string& s) {
    return detail::parse_enum<InitDist>(
        s, {{"trunc_normal", InitDist::truncated_normal}, {"normal", InitDist::normal}}, "init dist");
}

// --- json ------------------------------------------------------------------

inline json to_json(const ModelConfig& m) {
    json moe;
    if (m.moe_enabled) {
        moe = {{"type", "sparse"},
               {"n_experts", m.moe.n_experts},
               {"n_activated", m.moe.n_active},
               {"ffn_dimension", m.moe.ffn_dim},
               {"routing", to_string(m.moe.routing_mode)},
               {"capacity_factor", m.moe.capacity_factor},
               {"shared_experts", m.moe.shared_experts},
               {"layer_shared", m.layer_shared_moe},
               {"lbl_level", to_string(m.lbl_level)}};
    } else {
        moe = {{"type", "dense"}, {"ffn_dimension", m.dense_ffn_dim}};
    }
    return {{"dimension", m.model_dim},
            {"num_layers", m.n_layers},
            {"attn_heads", m.n_heads},
            {"vocab_size", m.vocab_size},
            {"max_seq_len", m.max_seq_len},
            {"moe", moe},
            {"layer_norm_type", to_string(m.norm)},
            {"layer_norm_eps", m.norm_eps},
            {"qk_norm", m.qk_norm},
            {"rope_theta", m.rope_theta},
            {"init",
             {{"dist", to_string(m.init.dist)}, {"std", m.init.std_dev}, {"cutoff", m.init.cutoff}}}};
}

inline ModelConfig model_config_from_json(const json& j) {
    try {
        ModelConfig m;
        m.model_dim = j.at("dimension").get<int64_t>();
        m.n_layers = j.at("num_layers").get<int64_t>();
        m.n_heads = j.at("attn_heads").get<int64_t>();
        m.vocab_size = j.at("vocab_size").get<int64_t>();
        m.max_seq_len = j.at("max_seq_len").get<int64_t>();
        const json& moe = j.at("moe");
        const std::string type = moe.at("type").get<std::string>();
        if (type == "sparse") {
            m.moe_enabled = true;
            m.moe.n_experts = moe.at("n_experts").get<int64_t>();
            m.moe.n_active = moe.at("n_activated").get<int64_t>();
            m.moe.ffn_dim = moe.at("ffn_dimension").get<int64_t>();
            m.moe.routing_mode = routing_mode_from(moe.at("routing").get<std::string>());
            m.moe.capacity_factor = moe.value("capacity_factor", 0.0);
            m.moe.shared_experts = moe.value("shared_experts", int64_t(0));
            m.layer_shared_moe = moe.value("layer_shared", false);
            m.lbl_level = lbl_level_from(moe.value("lbl_level", std::string("per_layer")));
            m.moe.model_dim = m.model_dim;
        } else if (type == "dense") {
            m.moe_enabled = false;
            m.dense_ffn_dim = moe.at("ffn_dimension").get<int64_t>();
        } else {
            throw ConfigError("unknown moe type: '" + type + "'");
        }
        m.norm = norm_kind_from(j.at("layer_norm_type").get<std::string>());
        m.norm_eps = j.at("layer_norm_eps").get<double>();
        m.qk_norm = j.at("qk_norm").get<bool>();
        m.rope_theta = j.at("rope_theta").get<double>();
        const json& init = j.at("init");
        m.init.dist = init_dist_from(init.at("dist").get<std::string>());
        m.init.std_dev = init.at("std").get<double>();
        m.init.cutoff = init.value("cutoff", 0.0);
        return m;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad model config: ") + e.what());
    }
}

inline json to_json(const TrainConfig& t) {
    return {{"peak_lr", t.lr_peak},
            {"min_lr", t.lr_min},
            {"warmup_steps", t.warmup_steps},
            {"total_steps", t.total_steps},
            {"anneal_steps", t.anneal_steps},
            {"batch_size_tokens", t.batch_size_tokens},
            {"adamw",
             {{"beta1", t.adamw.beta1},
              {"beta2", t.adamw.beta2},
              {"eps", t.adamw.eps},
              {"weight_decay", t.adamw.weight_decay}}},
            {"grad_clip_norm", t.grad_clip_norm},
            {"lbl_weight", t.alpha},
            {"zloss_weight", t.beta},
            {"log_every", t.log_every},
            {"checkpoint_every", t.checkpoint_every},
            {"init_checkpoint", t.init_checkpoint}};
}

inline TrainConfig train_config_from_json(const json& j) {
    try {
        TrainConfig t;
        t.lr_peak = j.at("peak_lr").get<double>();
        t.lr_min = j.at("min_lr").get<double>();
        t.warmup_steps = j.at("warmup_steps").get<int64_t>();
        t.total_steps = j.at("total_steps").get<int64_t>();
        t.anneal_steps = j.at("anneal_steps").get<int64_t>();
        t.batch_size_tokens = j.at("batch_size_tokens").get<int64_t>();
        const json& a = j.at("adamw");
        t.adamw.beta1 = a.at("beta1").get<double>();
        t.adamw.beta2 = a.at("beta2").get<double>();
        t.adamw.eps = a.at("eps").get<double>();
        t.adamw.weight_decay = a.at("weight_decay").get<double>();
        t.grad_clip_norm = j.at("grad_clip_norm").get<double>();
        t.alpha = j.at("lbl_weight").get<double>();
        t.beta = j.at("zloss_weight").get<double>();
        t.log_every = j.at("log_every").get<int64_t>();
        t.checkpoint_every = j.at("checkpoint_every").get<int64_t>();
        t.init_checkpoint = j.value("init_checkpoint", std::string());
        return t;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad train config: ") + e.what());
    }
}

inline json to_json(const RunConfig& r) {
    return {{"model", to_json(r.model)},
            {"train", to_json(r.train)},
            {"data", {{"manifest", r.data.manifest}, {"seq_len", r.data.seq_len}}},
            {"seed", r.seed},
            {"preset", r.preset}};
}

inline RunConfig run_config_from_json(const json& j) {
    try {
        RunConfig r;
        r.model = model_config_from_json(j.at("model"));
        r.train = train_config_from_json(j.at("train"));
        r.data.manifest = j.at("data").at("manifest").get<std::string>();
        r.data.seq_len = j.at("data").at("seq_len").get<int64_t>();
        r.seed = j.at("seed").get<uint64_t>();
        r.preset = j.value("preset", std::string());
        return r;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad run config: ") + e.what());
    }
}

// --- file + override helpers -------------------------------------------------

inline json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open file: " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("malformed json in " + path + ": " + e.what());
    }
}

inline void save_json_file(const std::string& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write file: " + path);
    out << j.dump(2) << "\n";
    if (!out) throw IoError("failed writing file: " + path);
}

/// Applies `key.path=value` onto a config json; the value is parsed as a
/// JSON literal when possible, otherwise taken as a string.
inline void apply_override(json& root, const std::string& spec) {
    const auto eq = spec.find('=');
    check<ConfigError>(eq != std::string::npos, "override must look like key.path=value: " + spec);
    const std::string path = spec.substr(0, eq);
    const std::string raw = spec.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;
    }
    json* node = &root;
    size_t start = 0;
    for (;;) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
        check<ConfigError>(!key.empty(), "empty key segment in override: " + spec);
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

/// Leaf paths whose values differ between two json documents (dotted keys,
/// sorted). Missing-on-one-side counts as different.
inline std::vector<std::string> diff_leaves(const json& a, const json& b, const std::string& prefix = "") {
    std::vector<std::string> out;
    if (a.is_object() || b.is_object()) {
        std::vector<std::string> keys;
        if (a.is_object())
            for (auto& [k, v] : a.items()) keys.push_back(k);
        if (b.is_object())
            for (auto& [k, v] : b.items())
                if (!a.is_object() || !a.contains(k)) keys.push_back(k);
        std::sort(keys.begin(), keys.end());
        for (const auto& k : keys) {
            const std::string p = prefix.empty() ? k : prefix + "." + k;
            const bool ina = a.is_object() && a.contains(k);
            const bool inb = b.is_object() && b.contains(k);
            if (ina && inb) {
                auto sub = diff_leaves(a.at(k), b.at(k), p);
                out.insert(out.end(), sub.begin(), sub.end());
            } else {
                out.push_back(p);
            }
        }
        return out;
    }
    if (a != b) out.push_back(prefix);
    return out;
}

} // namespace tinymoe
