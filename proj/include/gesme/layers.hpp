#pragma once

// Primitive layers: feature weighting, dense, GRU cell/sequence,
// zone-distributed GRU, and the convolutional-recurrent cell/sequence.
// Layers are plain structs of named parameter tensors plus free forward
// functions; all forwards accept extra leading (batch) axes beyond the
// documented per-sample shapes.

#include <string>
#include <utility>
#include <vector>

#include "gesme/common.hpp"
#include "gesme/init.hpp"
#include "gesme/tensor.hpp"

namespace gesme {

// Named views of a component's parameters, used by optimizers and
// checkpointing.  The tensors are shared handles, not copies.
template <typename T>
using ParamList = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
void append_params(ParamList<T>& out, const std::string& prefix, const ParamList<T>& inner) {
    for (const auto& [name, tensor] : inner) out.emplace_back(prefix + "." + name, tensor);
}

template <typename T>
void mark_trainable(const ParamList<T>& params) {
    for (auto [name, tensor] : params) tensor.set_requires_grad();  // handles share storage
}

// ---------------------------------------------------------------------------
// Feature weighting: X ⊙ act(W), W shaped like one input sample block.
// ---------------------------------------------------------------------------

template <typename T>
struct FeatureWeightingLayer {
    Tensor<T> W;
    Activation activation = Activation::Linear;
    double gamma = 0.5;

    static FeatureWeightingLayer create(Shape sample_shape, double gamma, Rng& rng,
                                        Activation activation = Activation::Linear) {
        if (gamma <= 0.0)
            throw ConfigError("feature weighting init half-width must be positive, got " +
                              std::to_string(gamma));
        FeatureWeightingLayer layer;
        layer.W = Tensor<T>(std::move(sample_shape));
        layer.activation = activation;
        layer.gamma = gamma;
        uniform_fill(layer.W, rng, -gamma, gamma);
        return layer;
    }

    ParamList<T> params() const { return {{"w", W}}; }
};

template <typename T>
Tensor<T> feature_weighting_forward(const FeatureWeightingLayer<T>& layer, const Tensor<T>& x) {
    return mul_trailing(x, activate(layer.W, layer.activation));
}

// ---------------------------------------------------------------------------
// Dense: act(x·Wᵀ + b) over the trailing axis.
// ---------------------------------------------------------------------------

template <typename T>
struct DenseLayer {
    Tensor<T> W;  // out x in
    Tensor<T> b;  // out
    Activation activation = Activation::Linear;

    std::int64_t in_features() const { return W.dim(1); }
    std::int64_t out_features() const { return W.dim(0); }

    static DenseLayer create(std::int64_t in, std::int64_t out, Activation activation, Rng& rng) {
        DenseLayer layer;
        layer.W = Tensor<T>({out, in});
        layer.b = Tensor<T>({out});
        layer.activation = activation;
        glorot_fill(layer.W, rng, in, out);
        return layer;
    }

    ParamList<T> params() const { return {{"w", W}, {"b", b}}; }
};

template <typename T>
Tensor<T> dense_forward(const DenseLayer<T>& layer, const Tensor<T>& x) {
    const std::int64_t in = layer.W.dim(1);
    if (x.dim(x.ndim() - 1) != in)
        throw DimensionError("dense: input " + shape_str(x.shape()) + " does not end in " +
                             std::to_string(in));
    Shape rows_shape{x.size() / in, in};
    auto h = matmul(reshape(x, rows_shape), layer.W, /*transpose_b=*/true);
    h = add_bias(h, layer.b);
    Shape out_shape(x.shape().begin(), x.shape().end() - 1);
    out_shape.push_back(layer.W.dim(0));
    return activate(reshape(h, out_shape), layer.activation);
}

// ---------------------------------------------------------------------------
// GRU
// ---------------------------------------------------------------------------

template <typename T>
struct GruCell {
    Tensor<T> U_z, U_r, U_h;  // H x F
    Tensor<T> W_z, W_r, W_h;  // H x H
    Tensor<T> b_z, b_r, b_h;  // H

    std::int64_t hidden() const { return U_z.dim(0); }
    std::int64_t features() const { return U_z.dim(1); }

    static GruCell create(std::int64_t features, std::int64_t hidden, Rng& rng) {
        if (hidden < 1) throw ConfigError("gru hidden size must be >= 1");
        GruCell cell;
        for (auto* t : {&cell.U_z, &cell.U_r, &cell.U_h}) {
            *t = Tensor<T>({hidden, features});
            glorot_fill(*t, rng, features, hidden);
        }
        for (auto* t : {&cell.W_z, &cell.W_r, &cell.W_h}) {
            *t = Tensor<T>({hidden, hidden});
            glorot_fill(*t, rng, hidden, hidden);
        }
        cell.b_z = Tensor<T>({hidden});
        cell.b_r = Tensor<T>({hidden});
        cell.b_h = Tensor<T>({hidden});
        return cell;
    }

    ParamList<T> params() const {
        return {{"u_z", U_z}, {"u_r", U_r}, {"u_h", U_h}, {"w_z", W_z}, {"w_r", W_r},
                {"w_h", W_h}, {"b_z", b_z}, {"b_r", b_r}, {"b_h", b_h}};
    }
};

// One recurrence step.  x_t: [..xF], h_prev: [..xH] with equal leading axes.
// The reset gate multiplies the already-formed recurrent product W_h·h_prev,
// not h_prev itself.
template <typename T>
Tensor<T> gru_step(const GruCell<T>& cell, const Tensor<T>& x_t, const Tensor<T>& h_prev) {
    const std::int64_t F = cell.features();
    const std::int64_t H = cell.hidden();
    if (x_t.dim(x_t.ndim() - 1) != F || h_prev.dim(h_prev.ndim() - 1) != H ||
        x_t.size() / F != h_prev.size() / H)
        throw DimensionError("gru_step: input " + shape_str(x_t.shape()) + " and state " +
                             shape_str(h_prev.shape()) + " do not match cell (F=" +
                             std::to_string(F) + ", H=" + std::to_string(H) + ")");
    const std::int64_t rows = x_t.size() / F;
    auto x = reshape(x_t, {rows, F});
    auto h = reshape(h_prev, {rows, H});

    auto z = sigmoid(add_bias(add(matmul(x, cell.U_z, true), matmul(h, cell.W_z, true)), cell.b_z));
    auto r = sigmoid(add_bias(add(matmul(x, cell.U_r, true), matmul(h, cell.W_r, true)), cell.b_r));
    auto cand = tanh_act(add_bias(
        add(matmul(x, cell.U_h, true), hadamard(r, matmul(h, cell.W_h, true))), cell.b_h));
    auto ones = Tensor<T>(z.shape(), T(1));
    auto h_t = add(hadamard(z, cand), hadamard(sub(ones, z), h));
    return reshape(h_t, h_prev.shape());
}

// Folds gru_step over the second-to-last axis (time), returning the final
// state: xs [..xBxF], h0 [..xH] -> [..xH].
template <typename T>
Tensor<T> gru_fold(const GruCell<T>& cell, const Tensor<T>& xs, const Tensor<T>& h0) {
    if (xs.ndim() < 2)
        throw UsageError("gru_fold: need a time axis, got " + shape_str(xs.shape()));
    const std::int64_t steps = xs.dim(xs.ndim() - 2);
    Tensor<T> h = h0;
    for (std::int64_t t = 0; t < steps; ++t)
        h = gru_step(cell, slice_index(xs, xs.ndim() - 2, t), h);
    return h;
}

// xs: [BxF], h0: [H] -> final [H].
template <typename T>
Tensor<T> gru_sequence(const GruCell<T>& cell, const Tensor<T>& xs, const Tensor<T>& h0) {
    return gru_fold(cell, xs, h0);
}

// Like gru_fold but emits the state after every step, stacked on the time
// axis: xs [..xBxF] -> [..xBxH].  Lets recurrent layers compose in stacks.
template <typename T>
Tensor<T> gru_unroll(const GruCell<T>& cell, const Tensor<T>& xs, const Tensor<T>& h0) {
    if (xs.ndim() < 2)
        throw UsageError("gru_unroll: need a time axis, got " + shape_str(xs.shape()));
    const int time_axis = xs.ndim() - 2;
    const std::int64_t steps = xs.dim(time_axis);
    Tensor<T> h = h0;
    std::vector<Tensor<T>> states;
    states.reserve(static_cast<std::size_t>(steps));
    Shape step_shape = h0.shape();
    step_shape.insert(step_shape.end() - 1, 1);
    for (std::int64_t t = 0; t < steps; ++t) {
        h = gru_step(cell, slice_index(xs, time_axis, t), h);
        states.push_back(reshape(h, step_shape));
    }
    return concat(states, static_cast<int>(step_shape.size()) - 2);
}

// Runs the same cell over every zone's series with shared parameters and a
// zero initial state: X [..xNxBxF] -> [..xNxH].
template <typename T>
Tensor<T> zone_distributed_gru(const GruCell<T>& cell, const Tensor<T>& X) {
    if (X.ndim() < 3)
        throw DimensionError("zone_distributed_gru: expected [..xNxBxF], got " +
                             shape_str(X.shape()));
    Shape h_shape(X.shape().begin(), X.shape().end() - 2);
    h_shape.push_back(cell.hidden());
    return gru_fold(cell, X, Tensor<T>(h_shape));
}

// ---------------------------------------------------------------------------
// Convolutional-recurrent cell over the zone axis
// ---------------------------------------------------------------------------

template <typename T>
struct ConvRnnCell {
    Tensor<T> U_c;  // K x F x L (input path)
    Tensor<T> W_c;  // K x K x L (recurrent path)
    Tensor<T> b_c;  // K
    Activation activation = Activation::Relu;

    std::int64_t filters() const { return U_c.dim(0); }
    std::int64_t features() const { return U_c.dim(1); }
    std::int64_t length() const { return U_c.dim(2); }

    static ConvRnnCell create(std::int64_t features, std::int64_t filters, std::int64_t length,
                              Rng& rng, Activation activation = Activation::Relu) {
        if (filters < 1) throw ConfigError("convrnn filter count must be >= 1");
        ConvRnnCell cell;
        cell.U_c = Tensor<T>({filters, features, length});
        glorot_fill(cell.U_c, rng, features * length, filters * length);
        cell.W_c = Tensor<T>({filters, filters, length});
        glorot_fill(cell.W_c, rng, filters * length, filters * length);
        cell.b_c = Tensor<T>({filters});
        cell.activation = activation;
        return cell;
    }

    ParamList<T> params() const { return {{"u_c", U_c}, {"w_c", W_c}, {"b_c", b_c}}; }
};

// H_t = act(U_c * X_t + W_c * H_prev + b_c), both convolutions same-padded
// over the zone axis.  X_t: [..xNxF], H_prev: [..xNxK] -> [..xNxK].
template <typename T>
Tensor<T> convrnn_step(const ConvRnnCell<T>& cell, const Tensor<T>& X_t, const Tensor<T>& H_prev) {
    if (X_t.ndim() < 2 || H_prev.ndim() < 2 || X_t.dim(X_t.ndim() - 1) != cell.features() ||
        H_prev.dim(H_prev.ndim() - 1) != cell.filters() ||
        X_t.dim(X_t.ndim() - 2) != H_prev.dim(H_prev.ndim() - 2))
        throw DimensionError("convrnn_step: input " + shape_str(X_t.shape()) + " and state " +
                             shape_str(H_prev.shape()) + " do not match cell (F=" +
                             std::to_string(cell.features()) + ", K=" +
                             std::to_string(cell.filters()) + ")");
    auto zero_bias = Tensor<T>(Shape{cell.filters()});
    auto pre = add(conv1d(X_t, cell.U_c, cell.b_c), conv1d(H_prev, cell.W_c, zero_bias));
    return activate(pre, cell.activation);
}

// Xs: [..xNxFxB] -> [..xNxKxB]; zero initial state, every step's hidden state
// emitted on the trailing axis.
template <typename T>
Tensor<T> convrnn_sequence(const ConvRnnCell<T>& cell, const Tensor<T>& Xs) {
    if (Xs.ndim() < 3)
        throw UsageError("convrnn_sequence: expected [..xNxFxB], got " + shape_str(Xs.shape()));
    const int time_axis = Xs.ndim() - 1;
    const std::int64_t steps = Xs.dim(time_axis);
    Shape h_shape(Xs.shape().begin(), Xs.shape().end() - 2);
    h_shape.push_back(cell.filters());
    Tensor<T> h(h_shape);
    std::vector<Tensor<T>> states;
    states.reserve(static_cast<std::size_t>(steps));
    Shape step_shape = h_shape;
    step_shape.push_back(1);
    for (std::int64_t t = 0; t < steps; ++t) {
        h = convrnn_step(cell, slice_index(Xs, time_axis, t), h);
        states.push_back(reshape(h, step_shape));
    }
    return concat(states, static_cast<int>(step_shape.size()) - 1);
}

}  // namespace gesme
