#pragma once

// Gating networks and gated mixture-of-experts combinators over the four
// expert families (zone convolution, plain GRU, zone-distributed GRU,
// convolutional-recurrent), plus the single shared-bottom alternative.

#include <functional>
#include <string>
#include <vector>

#include "gesme/common.hpp"
#include "gesme/init.hpp"
#include "gesme/layers.hpp"
#include "gesme/tensor.hpp"

namespace gesme {

enum class Sharing { MultiGate, SharedGate, SharedBottomSingle };

inline const char* sharing_name(Sharing s) {
    switch (s) {
        case Sharing::MultiGate: return "multi_gate";
        case Sharing::SharedGate: return "shared_gate";
        case Sharing::SharedBottomSingle: return "shared_bottom_single";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Zone-convolution layer (the expert of conv mixtures)
// ---------------------------------------------------------------------------

template <typename T>
struct Conv1dLayer {
    Tensor<T> filters;  // K x F x L
    Tensor<T> bias;     // K
    Activation activation = Activation::Relu;

    std::int64_t filter_count() const { return filters.dim(0); }
    std::int64_t features() const { return filters.dim(1); }
    std::int64_t length() const { return filters.dim(2); }

    static Conv1dLayer create(std::int64_t features, std::int64_t filters, std::int64_t length,
                              Activation activation, Rng& rng) {
        Conv1dLayer layer;
        layer.filters = Tensor<T>({filters, features, length});
        glorot_fill(layer.filters, rng, features * length, filters * length);
        layer.bias = Tensor<T>({filters});
        layer.activation = activation;
        return layer;
    }

    ParamList<T> params() const { return {{"filters", filters}, {"bias", bias}}; }
};

template <typename T>
Tensor<T> conv1d_forward(const Conv1dLayer<T>& layer, const Tensor<T>& x) {
    return activate(conv1d(x, layer.filters, layer.bias), layer.activation);
}

// ---------------------------------------------------------------------------
// Gate networks: map a mixture's input to m softmax probabilities
// ---------------------------------------------------------------------------

enum class GateKind { DenseSoftmax, GruSoftmax, ConvRnnSoftmax };

template <typename T>
struct GateNetwork {
    GateKind kind = GateKind::DenseSoftmax;
    std::int64_t m = 1;
    int sample_rank = 2;      // trailing axes of one input sample
    bool pool_zones = false;  // mean over the zone axis before the recurrence
    DenseLayer<T> proj;       // linear projection to m logits
    GruCell<T> gru;           // GruSoftmax only
    ConvRnnCell<T> conv;      // ConvRnnSoftmax only

    // Linear layer over the flattened sample (flat_size entries) to m logits.
    static GateNetwork dense(std::int64_t flat_size, int sample_rank, std::int64_t m, Rng& rng) {
        GateNetwork g;
        g.kind = GateKind::DenseSoftmax;
        g.m = m;
        g.sample_rank = sample_rank;
        g.proj = DenseLayer<T>::create(flat_size, m, Activation::Linear, rng);
        return g;
    }

    // Recurrence over the sample series; final state projected to m logits.
    // With pool_zones the sample is [N x B x F] and is averaged over zones
    // first; otherwise it is [B x F].
    static GateNetwork recurrent(std::int64_t features, std::int64_t hidden, std::int64_t m,
                                 bool pool_zones, Rng& rng) {
        GateNetwork g;
        g.kind = GateKind::GruSoftmax;
        g.m = m;
        g.sample_rank = pool_zones ? 3 : 2;
        g.pool_zones = pool_zones;
        g.gru = GruCell<T>::create(features, hidden, rng);
        g.proj = DenseLayer<T>::create(hidden, m, Activation::Linear, rng);
        return g;
    }

    // Convolutional recurrence over the sample [N x F x B]; the final step is
    // mean-pooled over zones and projected to m logits.
    static GateNetwork conv_recurrent(std::int64_t features, std::int64_t filters,
                                      std::int64_t length, std::int64_t m, Rng& rng) {
        GateNetwork g;
        g.kind = GateKind::ConvRnnSoftmax;
        g.m = m;
        g.sample_rank = 3;
        g.conv = ConvRnnCell<T>::create(features, filters, length, rng);
        g.proj = DenseLayer<T>::create(filters, m, Activation::Linear, rng);
        return g;
    }

    ParamList<T> params() const {
        ParamList<T> out;
        append_params(out, "proj", proj.params());
        if (kind == GateKind::GruSoftmax) append_params(out, "gru", gru.params());
        if (kind == GateKind::ConvRnnSoftmax) append_params(out, "conv", conv.params());
        return out;
    }
};

// X: leading batch axes + one gate sample -> probabilities [.. x m].
template <typename T>
Tensor<T> gate_probs(const GateNetwork<T>& gate, const Tensor<T>& X) {
    if (X.ndim() < gate.sample_rank)
        throw DimensionError("gate: input " + shape_str(X.shape()) + " has rank below the gate's sample rank " +
                             std::to_string(gate.sample_rank));
    switch (gate.kind) {
        case GateKind::DenseSoftmax: {
            std::int64_t flat = 1;
            for (int i = X.ndim() - gate.sample_rank; i < X.ndim(); ++i) flat *= X.dim(i);
            Shape lead(X.shape().begin(), X.shape().end() - gate.sample_rank);
            Shape flat_shape = lead;
            flat_shape.push_back(flat);
            auto logits = dense_forward(gate.proj, reshape(X, flat_shape));
            return softmax(logits);
        }
        case GateKind::GruSoftmax: {
            Tensor<T> series = gate.pool_zones ? mean_axis(X, X.ndim() - 3) : X;
            Shape h_shape(series.shape().begin(), series.shape().end() - 2);
            h_shape.push_back(gate.gru.hidden());
            auto final_state = gru_fold(gate.gru, series, Tensor<T>(h_shape));
            return softmax(dense_forward(gate.proj, final_state));
        }
        case GateKind::ConvRnnSoftmax: {
            auto states = convrnn_sequence(gate.conv, X);               // [.. x N x K x B]
            auto last = slice_index(states, states.ndim() - 1, X.dim(X.ndim() - 1) - 1);
            auto pooled = mean_axis(last, last.ndim() - 2);             // mean over zones
            return softmax(dense_forward(gate.proj, pooled));
        }
    }
    throw UsageError("bad gate kind");
}

// ---------------------------------------------------------------------------
// Mixture layer
// ---------------------------------------------------------------------------

enum class ExpertKind { Conv, Gru, ZoneGru, ConvRnn };

inline const char* expert_kind_name(ExpertKind k) {
    switch (k) {
        case ExpertKind::Conv: return "conv";
        case ExpertKind::Gru: return "gru";
        case ExpertKind::ZoneGru: return "zone_gru";
        case ExpertKind::ConvRnn: return "convrnn";
    }
    return "?";
}

template <typename T>
struct MixtureLayer {
    ExpertKind kind = ExpertKind::Conv;
    Sharing sharing = Sharing::MultiGate;
    bool return_sequences = false;  // recurrent experts emit whole series (stacking)
    std::vector<std::string> tasks;
    std::vector<Conv1dLayer<T>> conv_experts;
    std::vector<GruCell<T>> gru_experts;
    std::vector<ConvRnnCell<T>> seq_experts;
    std::vector<GateNetwork<T>> gates;  // |tasks|, 1, or 0 depending on sharing

    std::int64_t experts() const {
        switch (kind) {
            case ExpertKind::Conv: return static_cast<std::int64_t>(conv_experts.size());
            case ExpertKind::Gru:
            case ExpertKind::ZoneGru: return static_cast<std::int64_t>(gru_experts.size());
            case ExpertKind::ConvRnn: return static_cast<std::int64_t>(seq_experts.size());
        }
        return 0;
    }

    Tensor<T> expert_forward(std::int64_t index, const Tensor<T>& X) const {
        const auto i = static_cast<std::size_t>(index);
        switch (kind) {
            case ExpertKind::Conv: return conv1d_forward(conv_experts[i], X);
            case ExpertKind::Gru:
            case ExpertKind::ZoneGru: {
                Shape h_shape(X.shape().begin(), X.shape().end() - 2);
                h_shape.push_back(gru_experts[i].hidden());
                Tensor<T> h0(h_shape);
                if (return_sequences) return gru_unroll(gru_experts[i], X, h0);
                return kind == ExpertKind::Gru ? gru_fold(gru_experts[i], X, h0)
                                               : zone_distributed_gru(gru_experts[i], X);
            }
            case ExpertKind::ConvRnn: {
                auto states = convrnn_sequence(seq_experts[i], X);
                if (return_sequences) return states;
                return slice_index(states, states.ndim() - 1, X.dim(X.ndim() - 1) - 1);
            }
        }
        throw UsageError("bad expert kind");
    }

    ParamList<T> params() const {
        ParamList<T> out;
        for (std::size_t i = 0; i < conv_experts.size(); ++i)
            append_params(out, "expert." + std::to_string(i), conv_experts[i].params());
        for (std::size_t i = 0; i < gru_experts.size(); ++i)
            append_params(out, "expert." + std::to_string(i), gru_experts[i].params());
        for (std::size_t i = 0; i < seq_experts.size(); ++i)
            append_params(out, "expert." + std::to_string(i), seq_experts[i].params());
        for (std::size_t i = 0; i < gates.size(); ++i)
            append_params(out, "gate." + std::to_string(i), gates[i].params());
        return out;
    }

    void validate() const {
        const auto m = experts();
        if (m < 1) throw ConfigError("mixture layer needs at least one expert");
        switch (sharing) {
            case Sharing::MultiGate:
                if (gates.size() != tasks.size())
                    throw ConfigError("multi-gate mixture needs one gate per task");
                break;
            case Sharing::SharedGate:
                if (gates.size() != 1) throw ConfigError("shared-gate mixture needs exactly one gate");
                break;
            case Sharing::SharedBottomSingle:
                if (m != 1 || !gates.empty())
                    throw ConfigError("shared-bottom mixture must have one expert and no gates");
                break;
        }
        for (const auto& g : gates)
            if (g.m != m) throw ConfigError("gate expert count disagrees with expert list");
    }

    std::int64_t task_index(const std::string& task) const {
        for (std::size_t i = 0; i < tasks.size(); ++i)
            if (tasks[i] == task) return static_cast<std::int64_t>(i);
        throw UsageError("unknown task '" + task + "'");
    }
};

namespace detail {

// out[row, ...] scaled by the per-row weight tensor w (same leading shape).
template <typename T>
Tensor<T> weight_rows(const Tensor<T>& x, const Tensor<T>& w) {
    const std::int64_t rows = w.size();
    auto flat = reshape(x, {rows, x.size() / rows});
    auto scaled = rowwise_scale(flat, reshape(w, {rows}));
    return reshape(scaled, x.shape());
}

}  // namespace detail

// Probability-weighted sum of expert outputs under the task's gate.
template <typename T>
Tensor<T> mixture_forward(const MixtureLayer<T>& layer, const std::string& task,
                          const Tensor<T>& X) {
    const std::int64_t idx = layer.task_index(task);  // validates membership
    if (layer.sharing == Sharing::SharedBottomSingle) return layer.expert_forward(0, X);

    const auto& gate = layer.sharing == Sharing::MultiGate ? layer.gates[idx] : layer.gates[0];
    auto probs = gate_probs(gate, X);  // [.. x m]
    const std::int64_t m = layer.experts();
    Tensor<T> out;
    for (std::int64_t i = 0; i < m; ++i) {
        auto weighted =
            detail::weight_rows(layer.expert_forward(i, X), slice_index(probs, probs.ndim() - 1, i));
        out = i == 0 ? weighted : add(out, weighted);
    }
    return out;
}

// The single shared network's output; identical for every task by
// construction (task-specific towers are downstream).
template <typename T>
Tensor<T> shared_bottom_forward(const MixtureLayer<T>& layer, const Tensor<T>& X) {
    if (layer.sharing != Sharing::SharedBottomSingle)
        throw UsageError("shared_bottom_forward requires a shared-bottom mixture, got " +
                         std::string(sharing_name(layer.sharing)));
    return layer.expert_forward(0, X);
}

// Sequential application; each layer gates independently for the task.
template <typename T>
Tensor<T> stack_mixtures(const std::vector<MixtureLayer<T>>& layers, const std::string& task,
                         const Tensor<T>& X) {
    if (layers.empty()) throw UsageError("stack_mixtures: no layers");
    Tensor<T> h = X;
    for (const auto& layer : layers)
        h = layer.sharing == Sharing::SharedBottomSingle ? shared_bottom_forward(layer, h)
                                                         : mixture_forward(layer, task, h);
    return h;
}

// ---------------------------------------------------------------------------
// Builders.  Components derive their RNG streams from (seed, path.component)
// so identically-pathed experts initialize identically across variants.
// ---------------------------------------------------------------------------

struct MixtureGateConfig {
    std::int64_t gate_hidden = 4;   // recurrent gate state size
    std::int64_t gate_filters = 4;  // conv-recurrent gate filter count
};

namespace detail {

template <typename T>
void add_gates(MixtureLayer<T>& layer, std::int64_t m, Sharing sharing,
               const std::vector<std::string>& tasks, std::uint64_t seed, const std::string& path,
               const std::function<GateNetwork<T>(Rng&)>& make) {
    layer.sharing = sharing;
    layer.tasks = tasks;
    if (sharing == Sharing::SharedBottomSingle) {
        if (m != 1)
            throw ConfigError("shared-bottom mixture must have exactly one expert, got " +
                              std::to_string(m));
        return;
    }
    const std::size_t count = sharing == Sharing::MultiGate ? tasks.size() : 1;
    for (std::size_t g = 0; g < count; ++g) {
        auto rng = make_rng(seed, path + ".gate." + std::to_string(g));
        layer.gates.push_back(make(rng));
    }
}

}  // namespace detail

// Experts: zone convolution [N x F] -> [N x K]; dense gate on the flattened
// input (needs the zone count).
template <typename T>
MixtureLayer<T> make_conv_mixture(const std::vector<std::string>& tasks, Sharing sharing,
                                  std::int64_t m, std::int64_t zones, std::int64_t features,
                                  std::int64_t filters, std::int64_t length,
                                  Activation expert_activation, std::uint64_t seed,
                                  const std::string& path) {
    MixtureLayer<T> layer;
    layer.kind = ExpertKind::Conv;
    for (std::int64_t i = 0; i < m; ++i) {
        auto rng = make_rng(seed, path + ".expert." + std::to_string(i));
        layer.conv_experts.push_back(
            Conv1dLayer<T>::create(features, filters, length, expert_activation, rng));
    }
    detail::add_gates<T>(layer, m, sharing, tasks, seed, path, [&](Rng& rng) {
        return GateNetwork<T>::dense(zones * features, 2, m, rng);
    });
    layer.validate();
    return layer;
}

// Experts: plain GRU over [B x F]; recurrent gate on the same series.
template <typename T>
MixtureLayer<T> make_gru_mixture(const std::vector<std::string>& tasks, Sharing sharing,
                                 std::int64_t m, std::int64_t features, std::int64_t hidden,
                                 bool return_sequences, const MixtureGateConfig& gc,
                                 std::uint64_t seed, const std::string& path) {
    MixtureLayer<T> layer;
    layer.kind = ExpertKind::Gru;
    layer.return_sequences = return_sequences;
    for (std::int64_t i = 0; i < m; ++i) {
        auto rng = make_rng(seed, path + ".expert." + std::to_string(i));
        layer.gru_experts.push_back(GruCell<T>::create(features, hidden, rng));
    }
    detail::add_gates<T>(layer, m, sharing, tasks, seed, path, [&](Rng& rng) {
        return GateNetwork<T>::recurrent(features, gc.gate_hidden, m, /*pool_zones=*/false, rng);
    });
    layer.validate();
    return layer;
}

// Experts: the same GRU distributed over zones [N x B x F]; the gate pools
// the zone axis before its recurrence.
template <typename T>
MixtureLayer<T> make_zone_gru_mixture(const std::vector<std::string>& tasks, Sharing sharing,
                                      std::int64_t m, std::int64_t features, std::int64_t hidden,
                                      bool return_sequences, const MixtureGateConfig& gc,
                                      std::uint64_t seed, const std::string& path) {
    MixtureLayer<T> layer;
    layer.kind = ExpertKind::ZoneGru;
    layer.return_sequences = return_sequences;
    for (std::int64_t i = 0; i < m; ++i) {
        auto rng = make_rng(seed, path + ".expert." + std::to_string(i));
        layer.gru_experts.push_back(GruCell<T>::create(features, hidden, rng));
    }
    detail::add_gates<T>(layer, m, sharing, tasks, seed, path, [&](Rng& rng) {
        return GateNetwork<T>::recurrent(features, gc.gate_hidden, m, /*pool_zones=*/true, rng);
    });
    layer.validate();
    return layer;
}

// Experts: convolutional recurrence [N x F x B] -> [N x K x B]; gate is a
// small convolutional recurrence pooled over zones.
template <typename T>
MixtureLayer<T> make_convrnn_mixture(const std::vector<std::string>& tasks, Sharing sharing,
                                     std::int64_t m, std::int64_t features, std::int64_t filters,
                                     std::int64_t length, bool return_sequences,
                                     const MixtureGateConfig& gc, std::uint64_t seed,
                                     const std::string& path) {
    MixtureLayer<T> layer;
    layer.kind = ExpertKind::ConvRnn;
    layer.return_sequences = return_sequences;
    for (std::int64_t i = 0; i < m; ++i) {
        auto rng = make_rng(seed, path + ".expert." + std::to_string(i));
        layer.seq_experts.push_back(ConvRnnCell<T>::create(features, filters, length, rng));
    }
    detail::add_gates<T>(layer, m, sharing, tasks, seed, path, [&](Rng& rng) {
        return GateNetwork<T>::conv_recurrent(features, gc.gate_filters, length, m, rng);
    });
    layer.validate();
    return layer;
}

}  // namespace gesme
