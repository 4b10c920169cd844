#pragma once

// Training loop: squared-error task losses with L2/L1 regularization split
// across the parameter partition, Adam updates, seeded minibatch shuffling,
// and early stopping on the validation task loss with best-snapshot restore.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "gesme/common.hpp"
#include "gesme/model.hpp"
#include "gesme/sample.hpp"
#include "gesme/tensor.hpp"

namespace gesme {

struct TrainConfig {
    double lr = 0.001;
    std::int64_t batch_size = 32;
    double alpha = 0.001;  // L2 weight on the network partition
    double beta = 0.001;   // L1 weight on the feature-weighting partition
    std::int64_t patience = 50;
    std::int64_t max_epochs = 500;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double target_train_loss = 0.0;  // stop once the epoch train loss drops below; 0 disables
    std::uint64_t seed = 0;
};

inline void validate_config(const TrainConfig& cfg) {
    if (cfg.lr < 0) throw ConfigError("learning rate must be non-negative");
    if (cfg.batch_size < 1) throw ConfigError("batch_size must be positive");
    if (cfg.patience < 1) throw ConfigError("patience must be at least 1");
    if (cfg.max_epochs < 1) throw ConfigError("max_epochs must be positive");
    if (cfg.alpha < 0 || cfg.beta < 0) throw ConfigError("alpha and beta must be non-negative");
    if (cfg.target_train_loss < 0) throw ConfigError("target_train_loss must be non-negative");
}

// Mean over the batch of each sample's squared residual norm.
template <typename T>
Tensor<T> task_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    if (pred.shape() != target.shape())
        throw DimensionError("task loss: prediction " + shape_str(pred.shape()) +
                             " vs target " + shape_str(target.shape()));
    auto diff = sub(pred, target);
    auto total = reduce_sum(hadamard(diff, diff));
    return scale(total, T(1) / static_cast<T>(pred.dim(0)));
}

template <typename T>
struct LossReport {
    Tensor<T> total;  // scalar, recorded on the active tape
    std::vector<std::pair<std::string, T>> per_task;
    T task_sum = T(0);
    T l2_penalty = T(0);
    T l1_penalty = T(0);
};

// Sum of per-task losses plus alpha * sum of squared network weights plus
// beta * sum of absolute feature-weighting weights.
template <typename T>
LossReport<T> total_loss(const GesmeNet<T>& model, const SampleBatch<T>& batch, double alpha,
                         double beta) {
    LossReport<T> report;
    Tensor<T> total;
    for (const auto& task : model.config.tasks) {
        auto loss = task_loss(forward(model, batch, task), batch.target(task));
        report.per_task.emplace_back(task, loss.item());
        report.task_sum += loss.item();
        total = total.defined() ? add(total, loss) : loss;
    }

    if (alpha > 0) {
        Tensor<T> l2;
        for (const auto& [name, w] : model.network_params()) {
            auto term = reduce_sum(hadamard(w, w));
            l2 = l2.defined() ? add(l2, term) : term;
        }
        if (l2.defined()) {
            report.l2_penalty = static_cast<T>(alpha) * l2.item();
            total = add(total, scale(l2, static_cast<T>(alpha)));
        }
    }
    if (beta > 0) {
        Tensor<T> l1;
        for (const auto& [name, w] : model.weighting_params()) {
            auto term = reduce_sum(abs_val(w));
            l1 = l1.defined() ? add(l1, term) : term;
        }
        if (l1.defined()) {
            report.l1_penalty = static_cast<T>(beta) * l1.item();
            total = add(total, scale(l1, static_cast<T>(beta)));
        }
    }

    report.total = total;
    return report;
}

// Unregularized per-task losses, for validation tracking (no tape needed).
template <typename T>
std::vector<std::pair<std::string, T>> eval_task_losses(const GesmeNet<T>& model,
                                                        const SampleBatch<T>& batch) {
    std::vector<std::pair<std::string, T>> out;
    for (const auto& task : model.config.tasks)
        out.emplace_back(task, task_loss(forward(model, batch, task), batch.target(task)).item());
    return out;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <typename T>
struct AdamState {
    struct Slot {
        std::string name;
        Tensor<T> param;
        std::vector<double> m;
        std::vector<double> v;
    };
    std::vector<Slot> slots;
    std::int64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    static AdamState create(const ParamList<T>& params, double beta1 = 0.9, double beta2 = 0.999,
                            double eps = 1e-8) {
        AdamState state;
        state.beta1 = beta1;
        state.beta2 = beta2;
        state.eps = eps;
        for (const auto& [name, tensor] : params) {
            Slot slot;
            slot.name = name;
            slot.param = tensor;
            slot.m.assign(static_cast<std::size_t>(tensor.size()), 0.0);
            slot.v.assign(static_cast<std::size_t>(tensor.size()), 0.0);
            state.slots.push_back(std::move(slot));
        }
        return state;
    }
};

// One in-place update from the gradients currently stored on the parameters.
// A non-finite gradient aborts, naming the offending parameter.
template <typename T>
void adam_step(AdamState<T>& state, double lr) {
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (auto& slot : state.slots) {
        auto grad = slot.param.grad();
        auto values = slot.param.values();
        for (std::size_t i = 0; i < grad.size(); ++i) {
            const double g = static_cast<double>(grad[i]);
            if (!std::isfinite(g))
                throw NumericError("non-finite gradient in parameter '" + slot.name + "'");
            slot.m[i] = state.beta1 * slot.m[i] + (1.0 - state.beta1) * g;
            slot.v[i] = state.beta2 * slot.v[i] + (1.0 - state.beta2) * g * g;
            const double m_hat = slot.m[i] / bc1;
            const double v_hat = slot.v[i] / bc2;
            values[i] -= static_cast<T>(lr * m_hat / (std::sqrt(v_hat) + state.eps));
        }
    }
}

// ---------------------------------------------------------------------------
// Minibatch plumbing
// ---------------------------------------------------------------------------

namespace detail {

// Deterministic Fisher-Yates; avoids the implementation-defined std::shuffle.
inline void shuffle_indices(std::vector<std::int64_t>& idx, Rng& rng) {
    for (std::size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[static_cast<std::size_t>(rng() % i)]);
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& t, const std::vector<std::int64_t>& rows) {
    const std::int64_t rest = t.size() / t.dim(0);
    Shape shape = t.shape();
    shape[0] = static_cast<std::int64_t>(rows.size());
    std::vector<T> out;
    out.reserve(rows.size() * static_cast<std::size_t>(rest));
    auto src = t.values();
    for (auto r : rows)
        out.insert(out.end(), src.begin() + r * rest, src.begin() + (r + 1) * rest);
    return Tensor<T>::from(shape, std::move(out));
}

}  // namespace detail

template <typename T>
SampleBatch<T> subset_batch(const SampleBatch<T>& batch, const std::vector<std::int64_t>& rows) {
    SampleBatch<T> out;
    out.X_st = detail::gather_rows(batch.X_st, rows);
    out.X_w = detail::gather_rows(batch.X_w, rows);
    out.CD = detail::gather_rows(batch.CD, rows);
    out.CW = detail::gather_rows(batch.CW, rows);
    out.CP = detail::gather_rows(batch.CP, rows);
    for (const auto& [task, t] : batch.targets) out.targets[task] = detail::gather_rows(t, rows);
    return out;
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

template <typename T>
struct EpochRow {
    std::int64_t epoch = 0;  // 1-based
    T train_loss = T(0);     // regularized, sample-weighted mean over minibatches
    T val_loss = T(0);       // unregularized sum of task losses
    std::vector<std::pair<std::string, T>> val_per_task;
};

template <typename T>
struct FitResult {
    std::vector<EpochRow<T>> history;
    std::int64_t epochs_run = 0;
    std::int64_t best_epoch = 0;
    T best_val = std::numeric_limits<T>::infinity();
    double wall_seconds = 0;
};

namespace detail {

template <typename T>
std::vector<Tensor<T>> snapshot_params(const ParamList<T>& params) {
    std::vector<Tensor<T>> out;
    out.reserve(params.size());
    for (const auto& [name, t] : params) out.push_back(t.clone_values());
    return out;
}

template <typename T>
void restore_params(const ParamList<T>& params, const std::vector<Tensor<T>>& snapshot) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor<T> handle = params[i].second;  // shares storage, non-const view
        auto src = snapshot[i].values();
        auto dst = handle.values();
        std::copy(src.begin(), src.end(), dst.begin());
    }
}

}  // namespace detail

// Seeded minibatch training with early stopping.  The model is left holding
// the parameters of its best validation epoch, also on abnormal exit.
template <typename T>
FitResult<T> fit(GesmeNet<T>& model, const SampleBatch<T>& train, const SampleBatch<T>& val,
                 const TrainConfig& cfg) {
    validate_config(cfg);
    if (!train.X_st.defined() || train.size() < 1)
        throw ConfigError("training split is empty");
    if (!val.X_st.defined() || val.size() < 1) throw ConfigError("validation split is empty");

    const auto started = std::chrono::steady_clock::now();
    auto params = model.params();
    for (auto& [name, t] : params) t.set_requires_grad();
    auto adam = AdamState<T>::create(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    auto rng = make_rng(cfg.seed, "train.shuffle");

    FitResult<T> result;
    auto best = detail::snapshot_params(params);
    std::int64_t bad_epochs = 0;

    std::vector<std::int64_t> order(static_cast<std::size_t>(train.size()));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::int64_t>(i);

    try {
        for (std::int64_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
            detail::shuffle_indices(order, rng);

            double loss_sum = 0;
            std::int64_t seen = 0;
            for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
                auto end = std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_size));
                std::vector<std::int64_t> rows(order.begin() + static_cast<std::ptrdiff_t>(at),
                                               order.begin() + static_cast<std::ptrdiff_t>(end));
                auto minibatch = subset_batch(train, rows);

                for (auto& [name, t] : params) t.zero_grad();
                T loss_value;
                {
                    Tape<T> tape;
                    typename Tape<T>::Scope scope(tape);
                    auto report = total_loss(model, minibatch, cfg.alpha, cfg.beta);
                    loss_value = report.total.item();
                    tape.backward(report.total);
                }
                if (!std::isfinite(static_cast<double>(loss_value)))
                    throw NumericError("non-finite training loss in epoch " + std::to_string(epoch));
                adam_step(adam, cfg.lr);

                loss_sum += static_cast<double>(loss_value) * static_cast<double>(rows.size());
                seen += static_cast<std::int64_t>(rows.size());
            }

            EpochRow<T> row;
            row.epoch = epoch;
            row.train_loss = static_cast<T>(loss_sum / static_cast<double>(seen));
            row.val_per_task = eval_task_losses(model, val);
            for (const auto& [task, v] : row.val_per_task) row.val_loss += v;
            result.history.push_back(row);
            result.epochs_run = epoch;

            if (row.val_loss < result.best_val) {
                result.best_val = row.val_loss;
                result.best_epoch = epoch;
                best = detail::snapshot_params(params);
                bad_epochs = 0;
            } else {
                bad_epochs += 1;
            }
            if (cfg.target_train_loss > 0 &&
                static_cast<double>(row.train_loss) < cfg.target_train_loss)
                break;
            if (bad_epochs >= cfg.patience) break;
        }
    } catch (...) {
        // Leave the caller a usable model: the best state seen so far.
        detail::restore_params(params, best);
        throw;
    }

    detail::restore_params(params, best);
    result.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return result;
}

// Loss-curve CSV: epoch, regularized train loss, validation task-loss sum,
// then one unregularized validation column per task.
template <typename T>
void write_loss_curve(const std::string& path, const FitResult<T>& result,
                      const std::vector<std::string>& tasks) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path + "'");
    out << "epoch,train_loss,val_loss";
    for (const auto& task : tasks) out << ",val_loss_" << task;
    out << "\n";
    out.precision(10);
    for (const auto& row : result.history) {
        out << row.epoch << "," << row.train_loss << "," << row.val_loss;
        for (const auto& [task, v] : row.val_per_task) out << "," << v;
        out << "\n";
    }
    if (!out) throw IoError("failed writing '" + path + "'");
}

}  // namespace gesme
