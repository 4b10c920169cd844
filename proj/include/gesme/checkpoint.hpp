#pragma once

// Checkpoint format: `<name>.manifest.json` describing every tensor (name,
// shape, byte offset) plus a config echo, and `<name>.params` holding the
// raw values as little-endian IEEE-754 binary32 in manifest order.

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "gesme/blob.hpp"
#include "gesme/common.hpp"
#include "gesme/model.hpp"

namespace gesme {

inline constexpr const char* kCheckpointFormat = "gesme-checkpoint-v1";

inline nlohmann::json config_to_json(const ModelConfig& cfg) {
    nlohmann::json j;
    j["tasks"] = cfg.tasks;
    j["n_zones"] = cfg.n_zones;
    j["lookback"] = cfg.lookback;
    j["experts_per_layer"] = cfg.experts_per_layer;
    j["layers_per_block"] = cfg.layers_per_block;
    j["conv_filters"] = cfg.conv_filters;
    j["conv_filter_len"] = cfg.conv_filter_len;
    j["convrnn_filters"] = cfg.convrnn_filters;
    j["convrnn_filter_len"] = cfg.convrnn_filter_len;
    j["gru_hidden"] = cfg.gru_hidden;
    j["gate_hidden"] = cfg.gate_hidden;
    j["gate_filters"] = cfg.gate_filters;
    j["gate_sharing"] = gate_sharing_name(cfg.gate_sharing);
    j["ablation_mask"] = std::vector<std::string>(cfg.ablation_mask.begin(), cfg.ablation_mask.end());
    j["alpha"] = cfg.alpha;
    j["beta"] = cfg.beta;
    j["gamma"] = cfg.gamma;
    j["weighting_activation"] = activation_name(cfg.weighting_activation);
    j["seed"] = cfg.seed;
    return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    try {
        cfg.tasks = j.at("tasks").get<std::vector<std::string>>();
        cfg.n_zones = j.at("n_zones").get<std::int64_t>();
        cfg.lookback = j.at("lookback").get<std::int64_t>();
        cfg.experts_per_layer = j.at("experts_per_layer").get<std::int64_t>();
        cfg.layers_per_block = j.at("layers_per_block").get<std::int64_t>();
        cfg.conv_filters = j.at("conv_filters").get<std::vector<std::int64_t>>();
        cfg.conv_filter_len = j.at("conv_filter_len").get<std::int64_t>();
        cfg.convrnn_filters = j.at("convrnn_filters").get<std::vector<std::int64_t>>();
        cfg.convrnn_filter_len = j.at("convrnn_filter_len").get<std::int64_t>();
        cfg.gru_hidden = j.at("gru_hidden").get<std::int64_t>();
        cfg.gate_hidden = j.at("gate_hidden").get<std::int64_t>();
        cfg.gate_filters = j.at("gate_filters").get<std::int64_t>();
        cfg.gate_sharing = gate_sharing_from_name(j.at("gate_sharing").get<std::string>());
        auto mask = j.at("ablation_mask").get<std::vector<std::string>>();
        cfg.ablation_mask = std::set<std::string>(mask.begin(), mask.end());
        cfg.alpha = j.at("alpha").get<double>();
        cfg.beta = j.at("beta").get<double>();
        cfg.gamma = j.at("gamma").get<double>();
        cfg.weighting_activation =
            activation_from_name(j.at("weighting_activation").get<std::string>());
        cfg.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed model config: ") + e.what());
    }
    return cfg;
}

inline nlohmann::json roster_to_json(const FeatureRoster& roster) {
    return nlohmann::json{{"st_fields", roster.st_fields},
                          {"weather_fields", roster.weather_fields}};
}

inline FeatureRoster roster_from_json(const nlohmann::json& j) {
    FeatureRoster roster;
    try {
        roster.st_fields = j.at("st_fields").get<std::vector<std::string>>();
        roster.weather_fields = j.at("weather_fields").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed feature roster: ") + e.what());
    }
    return roster;
}

template <typename T>
void save_checkpoint(const GesmeNet<T>& model, const std::string& prefix) {
    std::string blob;
    nlohmann::json tensors = detail::tensor_table(model.params(), blob);

    nlohmann::json manifest;
    manifest["format"] = kCheckpointFormat;
    manifest["config"] = config_to_json(model.config);
    manifest["roster"] = roster_to_json(model.roster);
    manifest["tensors"] = std::move(tensors);
    manifest["blob_bytes"] = blob.size();

    detail::write_file(prefix + ".manifest.json", manifest.dump(2) + "\n");
    detail::write_file(prefix + ".params", blob);
}

namespace detail {

template <typename T>
GesmeNet<T> load_checkpoint_impl(const std::string& prefix, const ModelConfig* expected) {
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(read_file(prefix + ".manifest.json"));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("corrupt checkpoint manifest '" + prefix + "': " + e.what());
    }
    if (manifest.value("format", "") != kCheckpointFormat)
        throw IoError("checkpoint '" + prefix + "' has unknown format");

    ModelConfig cfg = config_from_json(manifest.at("config"));
    if (expected != nullptr && config_to_json(*expected) != config_to_json(cfg))
        throw ConfigError("checkpoint '" + prefix + "' was saved with a different model config");
    FeatureRoster roster = roster_from_json(manifest.at("roster"));

    GesmeNet<T> model = build<T>(cfg, roster);
    std::string blob = read_file(prefix + ".params");
    const auto expected_bytes = manifest.value("blob_bytes", std::uint64_t{0});
    if (blob.size() != expected_bytes)
        throw IoError("corrupt checkpoint '" + prefix + "': blob is " +
                      std::to_string(blob.size()) + " bytes, manifest expects " +
                      std::to_string(expected_bytes));

    const auto& tensors = manifest.at("tensors");
    auto params = model.params();
    if (tensors.size() != params.size())
        throw IoError("corrupt checkpoint '" + prefix + "': manifest lists " +
                      std::to_string(tensors.size()) + " tensors, model has " +
                      std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& entry = tensors[i];
        auto& [name, tensor] = params[i];
        if (entry.at("name").get<std::string>() != name)
            throw IoError("corrupt checkpoint '" + prefix + "': tensor " + std::to_string(i) +
                          " is '" + entry.at("name").get<std::string>() + "', model expects '" +
                          name + "'");
        auto loaded = read_tensor_entry<T>(entry, blob, "checkpoint '" + prefix + "'");
        if (loaded.shape() != tensor.shape())
            throw IoError("corrupt checkpoint '" + prefix + "': tensor '" + name +
                          "' shape mismatch");
        auto src = loaded.values();
        auto dst = tensor.values();
        std::copy(src.begin(), src.end(), dst.begin());
    }
    return model;
}

}  // namespace detail

template <typename T>
GesmeNet<T> load_checkpoint(const std::string& prefix) {
    return detail::load_checkpoint_impl<T>(prefix, nullptr);
}

template <typename T>
GesmeNet<T> load_checkpoint(const std::string& prefix, const ModelConfig& expected) {
    return detail::load_checkpoint_impl<T>(prefix, &expected);
}

}  // namespace gesme
