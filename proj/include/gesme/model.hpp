#pragma once

// The full forecasting network: per-block feature weighting, four mixture
// stacks over the shared history block (ConvRNN, Conv, zone-distributed GRU,
// plain GRU over weather), context concatenation, and one dense tower per
// task.  Variants differ only in expert count and gate sharing.

#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "gesme/common.hpp"
#include "gesme/init.hpp"
#include "gesme/layers.hpp"
#include "gesme/moe.hpp"
#include "gesme/sample.hpp"
#include "gesme/tensor.hpp"

namespace gesme {

enum class GateSharingMode { Multi, Shared, None };

inline std::string gate_sharing_name(GateSharingMode m) {
    switch (m) {
        case GateSharingMode::Multi: return "multi";
        case GateSharingMode::Shared: return "shared";
        case GateSharingMode::None: return "none";
    }
    throw ConfigError("unknown gate sharing mode");
}

inline GateSharingMode gate_sharing_from_name(const std::string& name) {
    if (name == "multi") return GateSharingMode::Multi;
    if (name == "shared") return GateSharingMode::Shared;
    if (name == "none") return GateSharingMode::None;
    throw ConfigError("unknown gate sharing mode '" + name + "'");
}

// The four named model variants: single task (SM), shared-bottom multi-task
// (SBSM), single shared gate (SESME), one gate per task (GESME).
enum class VariantKind { SM, SBSM, SESME, GESME };

inline std::string variant_name(VariantKind v) {
    switch (v) {
        case VariantKind::SM: return "sm";
        case VariantKind::SBSM: return "sbsm";
        case VariantKind::SESME: return "sesme";
        case VariantKind::GESME: return "gesme";
    }
    throw ConfigError("unknown variant");
}

inline VariantKind variant_from_name(const std::string& name) {
    if (name == "sm") return VariantKind::SM;
    if (name == "sbsm") return VariantKind::SBSM;
    if (name == "sesme") return VariantKind::SESME;
    if (name == "gesme") return VariantKind::GESME;
    throw ConfigError("unknown variant '" + name + "'");
}

// Block names accepted by ModelConfig::ablation_mask.
inline const std::set<std::string>& ablatable_blocks() {
    static const std::set<std::string> blocks{
        "weighting", "convrnn_me", "conv_me", "zonedist_gru_me", "gru_me"};
    return blocks;
}

struct ModelConfig {
    std::vector<std::string> tasks;
    std::int64_t n_zones = 0;
    std::int64_t lookback = 6;
    std::int64_t experts_per_layer = 2;
    std::int64_t layers_per_block = 2;
    std::vector<std::int64_t> conv_filters{25, 50};
    std::int64_t conv_filter_len = 7;
    std::vector<std::int64_t> convrnn_filters{50, 100};
    std::int64_t convrnn_filter_len = 5;
    std::int64_t gru_hidden = 4;
    std::int64_t gate_hidden = 4;
    std::int64_t gate_filters = 4;
    GateSharingMode gate_sharing = GateSharingMode::Multi;
    std::set<std::string> ablation_mask;
    double alpha = 0.001;
    double beta = 0.001;
    double gamma = 0.5;
    Activation weighting_activation = Activation::Linear;
    std::uint64_t seed = 0;

    bool ablated(const std::string& block) const { return ablation_mask.count(block) > 0; }
};

inline void validate_config(const ModelConfig& cfg) {
    if (cfg.tasks.empty()) throw ConfigError("model config needs at least one task");
    {
        std::set<std::string> unique(cfg.tasks.begin(), cfg.tasks.end());
        if (unique.size() != cfg.tasks.size()) throw ConfigError("duplicate task name in config");
    }
    if (cfg.n_zones < 1) throw ConfigError("n_zones must be positive");
    if (cfg.lookback < 1) throw ConfigError("lookback must be positive");
    if (cfg.experts_per_layer < 1) throw ConfigError("experts_per_layer must be positive");
    if (cfg.layers_per_block < 1) throw ConfigError("layers_per_block must be positive");
    if (cfg.conv_filters.empty() || cfg.convrnn_filters.empty())
        throw ConfigError("filter count lists must be non-empty");
    for (auto k : cfg.conv_filters)
        if (k < 1) throw ConfigError("conv filter counts must be positive");
    for (auto k : cfg.convrnn_filters)
        if (k < 1) throw ConfigError("convrnn filter counts must be positive");
    if (cfg.gru_hidden < 1) throw ConfigError("gru_hidden must be positive");
    if (cfg.gate_hidden < 1) throw ConfigError("gate_hidden must be positive");
    if (cfg.gate_filters < 1) throw ConfigError("gate_filters must be positive");
    if (cfg.gamma <= 0) throw ConfigError("gamma must be positive");
    if (cfg.alpha < 0 || cfg.beta < 0) throw ConfigError("alpha and beta must be non-negative");
    if (cfg.gate_sharing == GateSharingMode::None && cfg.experts_per_layer != 1)
        throw ConfigError("gate_sharing 'none' requires exactly one expert per layer");
    for (const auto& block : cfg.ablation_mask)
        if (ablatable_blocks().count(block) == 0)
            throw ConfigError("unknown ablation block '" + block + "'");
    bool any_me = false;
    for (const auto& block : {"convrnn_me", "conv_me", "zonedist_gru_me", "gru_me"})
        if (!cfg.ablated(block)) any_me = true;
    if (!any_me)
        throw ConfigError("ablation mask removes every representation block; at least one must survive");
}

// Applies one of the named variants to a base config.  SM is single-task by
// definition, so a multi-task config is rejected rather than silently
// truncated.
inline ModelConfig apply_variant(VariantKind kind, ModelConfig cfg) {
    switch (kind) {
        case VariantKind::SM:
            if (cfg.tasks.size() != 1)
                throw ConfigError("variant 'sm' is single-task; got " +
                                  std::to_string(cfg.tasks.size()) + " tasks");
            cfg.experts_per_layer = 1;
            cfg.gate_sharing = GateSharingMode::None;
            break;
        case VariantKind::SBSM:
            cfg.experts_per_layer = 1;
            cfg.gate_sharing = GateSharingMode::None;
            break;
        case VariantKind::SESME:
            cfg.gate_sharing = GateSharingMode::Shared;
            break;
        case VariantKind::GESME:
            cfg.gate_sharing = GateSharingMode::Multi;
            break;
    }
    return cfg;
}

namespace detail {

inline Sharing to_sharing(GateSharingMode m) {
    switch (m) {
        case GateSharingMode::Multi: return Sharing::MultiGate;
        case GateSharingMode::Shared: return Sharing::SharedGate;
        case GateSharingMode::None: return Sharing::SharedBottomSingle;
    }
    throw ConfigError("unknown gate sharing mode");
}

inline std::int64_t filters_at(const std::vector<std::int64_t>& filters, std::int64_t layer) {
    auto idx = std::min<std::int64_t>(layer, static_cast<std::int64_t>(filters.size()) - 1);
    return filters[static_cast<std::size_t>(idx)];
}

}  // namespace detail

template <typename T>
struct GesmeNet {
    ModelConfig config;
    FeatureRoster roster;

    // Feature weighting, one layer per input block (absent when ablated).
    bool has_weighting = false;
    FeatureWeightingLayer<T> w_st;       // N x F_st x b
    FeatureWeightingLayer<T> w_weather;  // b x F_w
    FeatureWeightingLayer<T> w_cd;       // N x 3
    FeatureWeightingLayer<T> w_cw;       // N
    FeatureWeightingLayer<T> w_cp;       // N

    // Mixture stacks; an ablated block keeps an empty stack.
    std::vector<MixtureLayer<T>> convrnn_me;
    std::vector<MixtureLayer<T>> conv_me;
    std::vector<MixtureLayer<T>> zonedist_gru_me;
    std::vector<MixtureLayer<T>> gru_me;

    // One output tower per task, in config.tasks order.
    std::vector<std::pair<std::string, DenseLayer<T>>> towers;
    std::int64_t tower_width = 0;

    const DenseLayer<T>& tower(const std::string& task) const {
        for (const auto& [name, layer] : towers)
            if (name == task) return layer;
        throw UsageError("unknown task '" + task + "'");
    }

    // The W_FI partition: every feature-weighting tensor.
    ParamList<T> weighting_params() const {
        ParamList<T> out;
        if (has_weighting) {
            append_params(out, "weighting.st", w_st.params());
            append_params(out, "weighting.weather", w_weather.params());
            append_params(out, "weighting.cd", w_cd.params());
            append_params(out, "weighting.cw", w_cw.params());
            append_params(out, "weighting.cp", w_cp.params());
        }
        return out;
    }

    // The W_A partition: every other trainable tensor (experts, gates, towers).
    ParamList<T> network_params() const {
        ParamList<T> out;
        auto add_stack = [&out](const std::string& prefix, const std::vector<MixtureLayer<T>>& stack) {
            for (std::size_t i = 0; i < stack.size(); ++i)
                append_params(out, prefix + "." + std::to_string(i), stack[i].params());
        };
        add_stack("convrnn_me", convrnn_me);
        add_stack("conv_me", conv_me);
        add_stack("zonedist_gru_me", zonedist_gru_me);
        add_stack("gru_me", gru_me);
        for (const auto& [task, layer] : towers)
            append_params(out, "tower." + task, layer.params());
        return out;
    }

    // Exhaustive, disjoint union of the two partitions, in a fixed order.
    ParamList<T> params() const {
        ParamList<T> out = weighting_params();
        for (auto& entry : network_params()) out.push_back(std::move(entry));
        return out;
    }

    std::int64_t parameter_count() const {
        std::int64_t total = 0;
        for (const auto& [name, tensor] : params()) total += tensor.size();
        return total;
    }
};

// Verifies that weighting_params and network_params cover every parameter
// exactly once (no shared storage, no duplicate names).  Throws ConfigError
// on violation; returns the total parameter count.
template <typename T>
std::int64_t audit_partition(const GesmeNet<T>& model) {
    std::set<const void*> seen_storage;
    std::set<std::string> seen_names;
    std::int64_t total = 0;
    auto scan = [&](const ParamList<T>& list) {
        for (const auto& [name, tensor] : list) {
            if (!seen_storage.insert(tensor.storage_id()).second)
                throw ConfigError("parameter partition overlap at '" + name + "'");
            if (!seen_names.insert(name).second)
                throw ConfigError("duplicate parameter name '" + name + "'");
            total += tensor.size();
        }
    };
    scan(model.weighting_params());
    scan(model.network_params());
    if (total != model.parameter_count())
        throw ConfigError("parameter partition does not cover the full model");
    return total;
}

// Width of the concatenated per-zone feature vector the towers consume:
// the surviving block outputs plus the four context columns (3 one-hot
// time-of-day bins + 1 weekend flag).
inline std::int64_t tower_input_width(const ModelConfig& cfg) {
    std::int64_t width = 0;
    if (!cfg.ablated("convrnn_me"))
        width += detail::filters_at(cfg.convrnn_filters, cfg.layers_per_block - 1);
    if (!cfg.ablated("conv_me"))
        width += detail::filters_at(cfg.conv_filters, cfg.layers_per_block - 1);
    if (!cfg.ablated("zonedist_gru_me")) width += cfg.gru_hidden;
    if (!cfg.ablated("gru_me")) width += cfg.gru_hidden;
    return width + 3 + 1;
}

template <typename T>
GesmeNet<T> build(const ModelConfig& cfg, const FeatureRoster& roster) {
    validate_config(cfg);
    if (roster.st_width() < 1) throw ConfigError("feature roster needs at least one history field");
    if (roster.weather_width() < 1 && !cfg.ablated("gru_me"))
        throw ConfigError("feature roster needs weather fields unless gru_me is ablated");

    GesmeNet<T> model;
    model.config = cfg;
    model.roster = roster;

    const std::int64_t N = cfg.n_zones;
    const std::int64_t B = cfg.lookback;
    const std::int64_t F_st = roster.st_width();
    const std::int64_t F_w = roster.weather_width();
    const Sharing sharing = detail::to_sharing(cfg.gate_sharing);
    const std::int64_t m = cfg.experts_per_layer;
    const MixtureGateConfig gate_cfg{cfg.gate_hidden, cfg.gate_filters};

    model.has_weighting = !cfg.ablated("weighting");
    if (model.has_weighting) {
        auto make = [&cfg](const Shape& shape, const std::string& path) {
            auto rng = make_rng(cfg.seed, path);
            return FeatureWeightingLayer<T>::create(shape, cfg.gamma, rng, cfg.weighting_activation);
        };
        model.w_st = make({N, F_st, B}, "weighting.st");
        model.w_weather = make({B, F_w}, "weighting.weather");
        model.w_cd = make({N, 3}, "weighting.cd");
        model.w_cw = make({N}, "weighting.cw");
        model.w_cp = make({N}, "weighting.cp");
    }

    if (!cfg.ablated("convrnn_me")) {
        std::int64_t features = F_st;
        for (std::int64_t layer = 0; layer < cfg.layers_per_block; ++layer) {
            auto filters = detail::filters_at(cfg.convrnn_filters, layer);
            model.convrnn_me.push_back(make_convrnn_mixture<T>(
                cfg.tasks, sharing, m, features, filters, cfg.convrnn_filter_len,
                /*return_sequences=*/true, gate_cfg, cfg.seed,
                "convrnn_me." + std::to_string(layer)));
            features = filters;
        }
    }

    if (!cfg.ablated("conv_me")) {
        std::int64_t features = F_st * B + 1;  // flattened history plus the POI column
        for (std::int64_t layer = 0; layer < cfg.layers_per_block; ++layer) {
            auto filters = detail::filters_at(cfg.conv_filters, layer);
            model.conv_me.push_back(make_conv_mixture<T>(
                cfg.tasks, sharing, m, N, features, filters, cfg.conv_filter_len,
                Activation::Relu, cfg.seed, "conv_me." + std::to_string(layer)));
            features = filters;
        }
    }

    if (!cfg.ablated("zonedist_gru_me")) {
        std::int64_t features = F_st;
        for (std::int64_t layer = 0; layer < cfg.layers_per_block; ++layer) {
            bool last = layer + 1 == cfg.layers_per_block;
            model.zonedist_gru_me.push_back(make_zone_gru_mixture<T>(
                cfg.tasks, sharing, m, features, cfg.gru_hidden,
                /*return_sequences=*/!last, gate_cfg, cfg.seed,
                "zonedist_gru_me." + std::to_string(layer)));
            features = cfg.gru_hidden;
        }
    }

    if (!cfg.ablated("gru_me")) {
        std::int64_t features = F_w;
        for (std::int64_t layer = 0; layer < cfg.layers_per_block; ++layer) {
            bool last = layer + 1 == cfg.layers_per_block;
            model.gru_me.push_back(make_gru_mixture<T>(
                cfg.tasks, sharing, m, features, cfg.gru_hidden,
                /*return_sequences=*/!last, gate_cfg, cfg.seed,
                "gru_me." + std::to_string(layer)));
            features = cfg.gru_hidden;
        }
    }

    model.tower_width = tower_input_width(cfg);
    for (const auto& task : cfg.tasks) {
        auto rng = make_rng(cfg.seed, "tower." + task);
        model.towers.emplace_back(
            task, DenseLayer<T>::create(model.tower_width, 1, Activation::Relu, rng));
    }

    audit_partition(model);
    return model;
}

template <typename T>
GesmeNet<T> build_variant(VariantKind kind, const ModelConfig& cfg, const FeatureRoster& roster) {
    return build<T>(apply_variant(kind, cfg), roster);
}

namespace detail {

template <typename T>
void check_batch(const GesmeNet<T>& model, const SampleBatch<T>& batch) {
    const auto& cfg = model.config;
    const std::int64_t N = cfg.n_zones;
    const std::int64_t B = cfg.lookback;
    const std::int64_t F_st = model.roster.st_width();
    const std::int64_t F_w = model.roster.weather_width();
    auto expect = [](const Tensor<T>& t, const Shape& want, const std::string& field) {
        if (t.shape() != want)
            throw DimensionError("batch field " + field + " has shape " + shape_str(t.shape()) +
                                 ", expected " + shape_str(want));
    };
    if (batch.X_st.ndim() != 4)
        throw DimensionError("batch X_st must be rank 4, got " + shape_str(batch.X_st.shape()));
    const std::int64_t S = batch.X_st.dim(0);
    expect(batch.X_st, {S, N, F_st, B}, "X_st");
    expect(batch.X_w, {S, B, F_w}, "X_w");
    expect(batch.CD, {S, N, 3}, "CD");
    expect(batch.CW, {S, N}, "CW");
    expect(batch.CP, {S, N}, "CP");
}

}  // namespace detail

// The per-zone feature vector each tower consumes, shape [S x N x W].
// Steps: weight every input block, run the four mixture stacks over the
// history blocks, broadcast the weather representation across zones, and
// concatenate with the weighted calendar contexts.
template <typename T>
Tensor<T> forward_features(const GesmeNet<T>& model, const SampleBatch<T>& batch,
                           const std::string& task) {
    model.tower(task);  // reject unknown tasks up front
    detail::check_batch(model, batch);
    const auto& cfg = model.config;
    const std::int64_t S = batch.X_st.dim(0);
    const std::int64_t N = cfg.n_zones;
    const std::int64_t B = cfg.lookback;
    const std::int64_t F_st = model.roster.st_width();

    Tensor<T> x_st = batch.X_st;
    Tensor<T> x_w = batch.X_w;
    Tensor<T> cd = batch.CD;
    Tensor<T> cw = batch.CW;
    Tensor<T> cp = batch.CP;
    if (model.has_weighting) {
        x_st = feature_weighting_forward(model.w_st, x_st);
        x_w = feature_weighting_forward(model.w_weather, x_w);
        cd = feature_weighting_forward(model.w_cd, cd);
        cw = feature_weighting_forward(model.w_cw, cw);
        cp = feature_weighting_forward(model.w_cp, cp);
    }

    std::vector<Tensor<T>> parts;

    if (!model.convrnn_me.empty()) {
        // [S x N x F_st x B] -> sequence stack -> final step [S x N x K].
        Tensor<T> h = stack_mixtures(model.convrnn_me, task, x_st);
        parts.push_back(slice_index(h, h.ndim() - 1, B - 1));
    }

    if (!model.conv_me.empty()) {
        // Flatten each zone's history and append its POI count: [S x N x (F_st*B + 1)].
        Tensor<T> flat = reshape(x_st, {S, N, F_st * B});
        Tensor<T> poi = reshape(cp, {S, N, 1});
        Tensor<T> x = concat(std::vector<Tensor<T>>{flat, poi}, 2);
        parts.push_back(stack_mixtures(model.conv_me, task, x));
    }

    if (!model.zonedist_gru_me.empty()) {
        // Per-zone time series: [S x N x B x F_st] -> [S x N x H].
        Tensor<T> series = permute(x_st, {0, 1, 3, 2});
        parts.push_back(stack_mixtures(model.zonedist_gru_me, task, series));
    }

    if (!model.gru_me.empty()) {
        // City-level weather: [S x B x F_w] -> [S x H], repeated across zones.
        Tensor<T> h = stack_mixtures(model.gru_me, task, x_w);
        parts.push_back(repeat_axis(h, 1, N));
    }

    parts.push_back(cd);
    parts.push_back(reshape(cw, {S, N, 1}));
    return concat(parts, 2);
}

// Per-task prediction, shape [S x N].
template <typename T>
Tensor<T> forward(const GesmeNet<T>& model, const SampleBatch<T>& batch, const std::string& task) {
    Tensor<T> features = forward_features(model, batch, task);
    if (features.dim(2) != model.tower_width)
        throw DimensionError("tower input width " + std::to_string(features.dim(2)) +
                             " does not match configured width " +
                             std::to_string(model.tower_width));
    Tensor<T> out = dense_forward(model.tower(task), features);
    return reshape(out, {batch.X_st.dim(0), model.config.n_zones});
}

}  // namespace gesme
