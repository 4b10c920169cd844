#pragma once

// Forecast quality metrics, model evaluation in original units, and the
// feature-importance summaries read off the weighting block.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "gesme/common.hpp"
#include "gesme/data.hpp"
#include "gesme/layers.hpp"
#include "gesme/model.hpp"
#include "gesme/sample.hpp"
#include "gesme/tensor.hpp"

namespace gesme {

namespace detail {

inline void check_metric_args(std::size_t pred, std::size_t actual) {
    if (pred == 0) throw UsageError("metrics need at least one value");
    if (pred != actual)
        throw DimensionError("metric comparison of " + std::to_string(pred) + " predictions and " +
                             std::to_string(actual) + " actuals");
}

}  // namespace detail

// Mean absolute error over flattened entries.
template <typename Seq>
double mae(const Seq& pred, const Seq& actual) {
    detail::check_metric_args(pred.size(), actual.size());
    double sum = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        sum += std::abs(static_cast<double>(pred[i]) - static_cast<double>(actual[i]));
    return sum / static_cast<double>(pred.size());
}

// Root mean squared error over flattened entries.
template <typename Seq>
double rmse(const Seq& pred, const Seq& actual) {
    detail::check_metric_args(pred.size(), actual.size());
    double sum = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = static_cast<double>(pred[i]) - static_cast<double>(actual[i]);
        sum += d * d;
    }
    return std::sqrt(sum / static_cast<double>(pred.size()));
}

// Symmetric mean absolute percentage error with a one-count floor in the
// denominator, which keeps empty cells from blowing the ratio up.
template <typename Seq>
double smape(const Seq& pred, const Seq& actual) {
    detail::check_metric_args(pred.size(), actual.size());
    double sum = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double p = static_cast<double>(pred[i]);
        const double a = static_cast<double>(actual[i]);
        sum += std::abs(p - a) / (std::abs(p) + std::abs(a) + 1.0);
    }
    return sum / static_cast<double>(pred.size());
}

template <typename T>
double mae(const Tensor<T>& pred, const Tensor<T>& actual) {
    return mae(pred.values(), actual.values());
}
template <typename T>
double rmse(const Tensor<T>& pred, const Tensor<T>& actual) {
    return rmse(pred.values(), actual.values());
}
template <typename T>
double smape(const Tensor<T>& pred, const Tensor<T>& actual) {
    return smape(pred.values(), actual.values());
}

struct TaskMetrics {
    double mae = 0;
    double rmse = 0;
    double smape = 0;
    double time_s = 0;
};

// Runs the model on a batch and scores each task in original units: both
// predictions and targets pass back through the task's normalization before
// any error is computed.  Wall time is split evenly across tasks.
template <typename T>
std::map<std::string, TaskMetrics> evaluate(const GesmeNet<T>& model, const SampleBatch<T>& batch,
                                            const Normalization& norm) {
    const auto t0 = std::chrono::steady_clock::now();
    std::map<std::string, TaskMetrics> out;
    for (const auto& task : model.config.tasks) {
        const auto& stats = norm.field(task);
        const auto pred = forward(model, batch, task);
        const auto& target = batch.target(task);
        std::vector<double> p(static_cast<std::size_t>(pred.size()));
        std::vector<double> a(p.size());
        auto pv = pred.values();
        auto av = target.values();
        for (std::size_t i = 0; i < p.size(); ++i) {
            p[i] = denormalize_value(static_cast<double>(pv[i]), stats);
            a[i] = denormalize_value(static_cast<double>(av[i]), stats);
        }
        out[task] = {mae(p, a), rmse(p, a), smape(p, a), 0.0};
    }
    const auto wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (auto& [task, m] : out) m.time_s = wall / static_cast<double>(out.size());
    return out;
}

// Mean absolute weighted inputs, summarized along the axes a reader cares
// about.  The temporal view covers every lagged column — zone history fields
// with zones pooled, then weather fields — per (lag, field); the spatial
// view covers the zone history fields per (zone, field) with lags pooled.
// Both pool over samples.
struct ImportanceReport {
    std::vector<std::string> temporal_fields;  // history fields, then weather
    std::vector<std::string> spatial_fields;   // history fields
    std::int64_t n_zones = 0;
    std::int64_t lookback = 0;
    std::vector<double> temporal;  // lookback x temporal_fields
    std::vector<double> spatial;   // n_zones x spatial_fields

    double temporal_at(std::int64_t lag, std::int64_t field) const {
        return temporal[static_cast<std::size_t>(
            lag * static_cast<std::int64_t>(temporal_fields.size()) + field)];
    }
    double spatial_at(std::int64_t zone, std::int64_t field) const {
        return spatial[static_cast<std::size_t>(
            zone * static_cast<std::int64_t>(spatial_fields.size()) + field)];
    }
};

template <typename T>
ImportanceReport importance_report(const GesmeNet<T>& model, const SampleBatch<T>& batch) {
    if (!model.has_weighting)
        throw UsageError("the model was built without the feature weighting block");
    detail::check_batch(model, batch);

    const auto w_st = feature_weighting_forward(model.w_st, batch.X_st);
    const auto w_w = feature_weighting_forward(model.w_weather, batch.X_w);
    const auto S = w_st.dim(0);
    const auto N = w_st.dim(1);
    const auto F = w_st.dim(2);
    const auto B = w_st.dim(3);
    const auto Fw = w_w.dim(2);
    const auto width = F + Fw;

    ImportanceReport report;
    report.temporal_fields = model.roster.st_fields;
    for (const auto& name : model.roster.weather_fields) report.temporal_fields.push_back(name);
    report.spatial_fields = model.roster.st_fields;
    report.n_zones = N;
    report.lookback = B;
    report.temporal.assign(static_cast<std::size_t>(B * width), 0.0);
    report.spatial.assign(static_cast<std::size_t>(N * F), 0.0);

    auto sv = w_st.values();
    for (std::int64_t s = 0; s < S; ++s)
        for (std::int64_t z = 0; z < N; ++z)
            for (std::int64_t f = 0; f < F; ++f)
                for (std::int64_t l = 0; l < B; ++l) {
                    const double m = std::abs(static_cast<double>(
                        sv[static_cast<std::size_t>(((s * N + z) * F + f) * B + l)]));
                    report.temporal[static_cast<std::size_t>(l * width + f)] += m;
                    report.spatial[static_cast<std::size_t>(z * F + f)] += m;
                }
    auto wv = w_w.values();
    for (std::int64_t s = 0; s < S; ++s)
        for (std::int64_t l = 0; l < B; ++l)
            for (std::int64_t j = 0; j < Fw; ++j)
                report.temporal[static_cast<std::size_t>(l * width + F + j)] += std::abs(
                    static_cast<double>(wv[static_cast<std::size_t>((s * B + l) * Fw + j)]));

    for (std::int64_t l = 0; l < B; ++l) {
        for (std::int64_t f = 0; f < F; ++f)
            report.temporal[static_cast<std::size_t>(l * width + f)] /= static_cast<double>(S * N);
        for (std::int64_t j = 0; j < Fw; ++j)
            report.temporal[static_cast<std::size_t>(l * width + F + j)] /= static_cast<double>(S);
    }
    for (auto& x : report.spatial) x /= static_cast<double>(S * B);
    return report;
}

inline void write_metrics_csv(const std::string& path,
                              const std::map<std::string, TaskMetrics>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path + "'");
    out << "task,mae,rmse,smape,time_s\n";
    out.precision(10);
    for (const auto& [task, m] : rows)
        out << task << "," << m.mae << "," << m.rmse << "," << m.smape << "," << m.time_s << "\n";
    if (!out) throw IoError("failed writing '" + path + "'");
}

inline void write_temporal_csv(const std::string& path, const ImportanceReport& report) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path + "'");
    out << "lag";
    for (const auto& f : report.temporal_fields) out << "," << f;
    out << "\n";
    out.precision(10);
    for (std::int64_t l = 0; l < report.lookback; ++l) {
        out << l;
        for (std::size_t f = 0; f < report.temporal_fields.size(); ++f)
            out << "," << report.temporal_at(l, static_cast<std::int64_t>(f));
        out << "\n";
    }
    if (!out) throw IoError("failed writing '" + path + "'");
}

inline void write_spatial_csv(const std::string& path, const ImportanceReport& report) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path + "'");
    out << "zone";
    for (const auto& f : report.spatial_fields) out << "," << f;
    out << "\n";
    out.precision(10);
    for (std::int64_t z = 0; z < report.n_zones; ++z) {
        out << z;
        for (std::size_t f = 0; f < report.spatial_fields.size(); ++f)
            out << "," << report.spatial_at(z, static_cast<std::int64_t>(f));
        out << "\n";
    }
    if (!out) throw IoError("failed writing '" + path + "'");
}

}  // namespace gesme
