// Copyright (c) 2026 tinymoe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "tinymoe/config_io.hpp"
#include "tinymoe/model.hpp"
#include "tinymoe/optim.hpp"

namespace tinymoe {

inline constexpr const char* kCheckpointFormat = "tinymoe.checkpoint/1";

/// On-disk snapshot: manifest.json (format version, model config, step,
/// RNG state, tensor index) plus tensors.bin holding each tensor in the
/// numeric-core wire format, in manifest order. Round-trips bit-exactly.
struct CheckpointMeta {
    int64_t step = 0;
    uint64_t seed = 0;
    bool has_optimizer = false;
    ModelConfig model;
};

namespace detail {

struct TensorIndexEntry {
    std::string name;
    Shape shape;
    int64_t offset = 0;
};

} // namespace detail

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, ModelParams<T>& params,
                     OptimizerState<T>* optim, int64_t step, uint64_t seed) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create checkpoint dir " + dir.string() + ": " + ec.message());

    std::vector<std::pair<std::string, Tensor<T>*>> entries;
    params.visit([&](const std::string& name, Tensor<T>& t) { entries.emplace_back(name, &t); });
    if (optim) {
        check<ConfigError>(optim->moments.size() == entries.size(),
                           "optimizer state does not match parameter list");
        const size_t n = entries.size();
        for (size_t i = 0; i < n; ++i) {
            entries.emplace_back("optim." + entries[i].first + ".m", &optim->moments[i].m);
            entries.emplace_back("optim." + entries[i].first + ".v", &optim->moments[i].v);
        }
    }

    json index = json::array();
    {
        std::ofstream bin(dir / "tensors.bin", std::ios::binary);
        if (!bin) throw IoError("cannot write " + (dir / "tensors.bin").string());
        int64_t offset = 0;
        for (auto& [name, t] : entries) {
            // Moments may be lazily unallocated before the first step.
            if (t->size() == 0 && t->shape.empty()) *t = Tensor<T>::zeros({0});
            write_tensor(bin, *t);
            index.push_back({{"name", name}, {"dims", t->shape}, {"offset", offset}});
            offset += tensor_wire_bytes(t->shape);
        }
    }

    json manifest = {{"format", kCheckpointFormat},
                     {"step", step},
                     {"model", to_json(params.cfg)},
                     {"rng", {{"seed", seed}, {"step", step}}},
                     {"has_optimizer", optim != nullptr},
                     {"optimizer_step", optim ? optim->step : 0},
                     {"tensors", index}};
    save_json_file((dir / "manifest.json").string(), manifest);
}

template <typename T>
std::pair<ModelParams<T>, CheckpointMeta> load_checkpoint(
    const std::filesystem::path& dir, OptimizerState<T>* optim_out = nullptr) {
    const auto manifest_path = dir / "manifest.json";
    if (!std::filesystem::exists(manifest_path))
        throw IoError("no checkpoint manifest at " + manifest_path.string());
    json manifest = load_json_file(manifest_path.string());

    const std::string format = manifest.value("format", "");
    if (format != kCheckpointFormat)
        throw SchemaError("checkpoint format '" + format + "' does not match '" +
                          kCheckpointFormat +
                          "'; re-create the checkpoint with this build or convert it");

    CheckpointMeta meta;
    meta.step = manifest.at("step").get<int64_t>();
    meta.seed = manifest.at("rng").at("seed").get<uint64_t>();
    meta.has_optimizer = manifest.value("has_optimizer", false);
    meta.model = model_config_from_json(manifest.at("model"));

    ModelParams<T> params = init_model<T>(meta.model, 0);

    std::ifstream bin(dir / "tensors.bin", std::ios::binary);
    if (!bin) throw IoError("cannot open " + (dir / "tensors.bin").string());

    std::vector<std::pair<std::string, Tensor<T>*>> slots;
    params.visit([&](const std::string& name, Tensor<T>& t) { slots.emplace_back(name, &t); });
    if (optim_out) {
        optim_out->moments.assign(slots.size(), {});
        optim_out->step = manifest.value("optimizer_step", int64_t(0));
    }

    size_t cursor = 0;
    for (const auto& entry : manifest.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        Tensor<T> t = read_tensor<T>(bin);
        if (name.rfind("optim.", 0) == 0) {
            if (!optim_out) continue;
            const bool is_m = name.size() > 2 && name[name.size() - 1] == 'm';
            const std::string pname = name.substr(6, name.size() - 8);
            bool found = false;
            for (size_t i = 0; i < slots.size(); ++i) {
                if (slots[i].first == pname) {
                    (is_m ? optim_out->moments[i].m : optim_out->moments[i].v) = std::move(t);
                    found = true;
                    break;
                }
            }
            check<SchemaError>(found, "checkpoint optimizer entry for unknown parameter " + pname);
            continue;
        }
        check<SchemaError>(cursor < slots.size() && slots[cursor].first == name,
                           "checkpoint tensor order mismatch at '" + name +
                               "'; the checkpoint does not fit this model config");
        check<SchemaError>(t.shape == slots[cursor].second->shape,
                           "checkpoint tensor shape mismatch for " + name);
        *slots[cursor].second = std::move(t);
        ++cursor;
    }
    check<SchemaError>(cursor == slots.size(), "checkpoint is missing parameter tensors");
    return {std::move(params), meta};
}

} // namespace tinymoe
