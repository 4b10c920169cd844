#pragma once

// The tensor bundle one training/evaluation batch carries, plus the feature
// roster that names its columns.  Produced by the data pipeline, consumed by
// the model.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "gesme/common.hpp"
#include "gesme/tensor.hpp"

namespace gesme {

// Names of the feature columns a dataset provides.  st_fields are the
// zone-resolved history fields (demand, gap, speed, ...); weather_fields are
// the city-level weather columns after encoding.
struct FeatureRoster {
    std::vector<std::string> st_fields;
    std::vector<std::string> weather_fields;

    std::int64_t st_width() const { return static_cast<std::int64_t>(st_fields.size()); }
    std::int64_t weather_width() const { return static_cast<std::int64_t>(weather_fields.size()); }

    bool operator==(const FeatureRoster&) const = default;
};

template <typename T>
struct SampleBatch {
    Tensor<T> X_st;  // S x N x F_st x b   zone history block, lags t-b..t-1
    Tensor<T> X_w;   // S x b x F_w        weather history over the same lags
    Tensor<T> CD;    // S x N x 3          one-hot time-of-day bin at t
    Tensor<T> CW;    // S x N              weekday(0)/weekend(1) at t
    Tensor<T> CP;    // S x N              per-zone POI counts
    std::map<std::string, Tensor<T>> targets;  // task -> S x N ground truth at t

    std::int64_t size() const { return X_st.dim(0); }

    const Tensor<T>& target(const std::string& task) const {
        auto it = targets.find(task);
        if (it == targets.end()) throw UsageError("batch has no target for task '" + task + "'");
        return it->second;
    }
};

}  // namespace gesme
