#pragma once

// Preprocessed-dataset persistence: a JSON manifest describing the axis,
// roster, splits, normalization, and tensor layout, next to a raw blob of
// little-endian binary32 tensor data.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "gesme/blob.hpp"
#include "gesme/common.hpp"
#include "gesme/data.hpp"
#include "gesme/sample.hpp"
#include "gesme/tensor.hpp"

namespace gesme {

inline constexpr const char* kDatasetFormat = "gesme-dataset-v1";

namespace detail {

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> batch_tensors(const std::string& split,
                                                             const SampleBatch<T>& batch) {
    std::vector<std::pair<std::string, Tensor<T>>> items;
    if (!batch.X_st.defined()) return items;
    items.emplace_back(split + ".x_st", batch.X_st);
    items.emplace_back(split + ".x_w", batch.X_w);
    items.emplace_back(split + ".cd", batch.CD);
    items.emplace_back(split + ".cw", batch.CW);
    items.emplace_back(split + ".cp", batch.CP);
    for (const auto& [task, target] : batch.targets)
        items.emplace_back(split + ".target." + task, target);
    return items;
}

inline nlohmann::json counters_to_json(const IngestCounters& c) {
    return {{"orders_total", c.orders_total},
            {"orders_outside_axis", c.orders_outside_axis},
            {"orders_unanswered", c.orders_unanswered},
            {"trips_total", c.trips_total},
            {"traj_points_total", c.traj_points_total},
            {"traj_points_out_of_grid", c.traj_points_out_of_grid},
            {"traj_points_outside_axis", c.traj_points_outside_axis},
            {"cells_without_speed", c.cells_without_speed},
            {"weather_slots_filled", c.weather_slots_filled},
            {"weather_unseen_categories", c.weather_unseen_categories}};
}

inline IngestCounters counters_from_json(const nlohmann::json& j) {
    IngestCounters c;
    c.orders_total = j.at("orders_total").get<std::int64_t>();
    c.orders_outside_axis = j.at("orders_outside_axis").get<std::int64_t>();
    c.orders_unanswered = j.at("orders_unanswered").get<std::int64_t>();
    c.trips_total = j.at("trips_total").get<std::int64_t>();
    c.traj_points_total = j.at("traj_points_total").get<std::int64_t>();
    c.traj_points_out_of_grid = j.at("traj_points_out_of_grid").get<std::int64_t>();
    c.traj_points_outside_axis = j.at("traj_points_outside_axis").get<std::int64_t>();
    c.cells_without_speed = j.at("cells_without_speed").get<std::int64_t>();
    c.weather_slots_filled = j.at("weather_slots_filled").get<std::int64_t>();
    c.weather_unseen_categories = j.at("weather_unseen_categories").get<std::int64_t>();
    return c;
}

}  // namespace detail

template <typename T>
void save_dataset(const Dataset<T>& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);

    std::vector<std::pair<std::string, Tensor<T>>> items;
    auto add = [&](const char* split, const SampleBatch<T>& batch) {
        for (auto& item : detail::batch_tensors(split, batch)) items.push_back(std::move(item));
    };
    add("train", ds.train);
    add("val", ds.val);
    add("test", ds.test);

    std::string blob;
    nlohmann::json tensors = detail::tensor_table(items, blob);

    nlohmann::json norm_st = nlohmann::json::array();
    for (const auto& [name, stats] : ds.norm.st)
        norm_st.push_back({{"field", name}, {"min", stats.min}, {"max", stats.max}});

    nlohmann::json manifest{
        {"format", kDatasetFormat},
        {"axis",
         {{"start_ts", ds.axis.start_ts},
          {"interval_minutes", ds.axis.interval_minutes},
          {"n_slots", ds.axis.n_slots}}},
        {"roster",
         {{"st_fields", ds.roster.st_fields}, {"weather_fields", ds.roster.weather_fields}}},
        {"tasks", ds.tasks},
        {"splits", {{"train_end", ds.splits.train_end}, {"val_end", ds.splits.val_end}}},
        {"normalization",
         {{"st", norm_st}, {"poi", {{"min", ds.norm.poi.min}, {"max", ds.norm.poi.max}}}}},
        {"counters", detail::counters_to_json(ds.counters)},
        {"tensors", tensors},
        {"blob_bytes", blob.size()}};

    detail::write_file(dir / "dataset.manifest.json", manifest.dump(2) + "\n");
    detail::write_file(dir / "dataset.params", blob);
}

template <typename T>
Dataset<T> load_dataset(const std::filesystem::path& dir) {
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(detail::read_file(dir / "dataset.manifest.json"));
    } catch (const nlohmann::json::exception&) {
        throw IoError("corrupt dataset manifest in '" + dir.string() + "'");
    }

    Dataset<T> ds;
    try {
        if (manifest.at("format").get<std::string>() != kDatasetFormat)
            throw IoError("unknown dataset format in '" + dir.string() + "'");
        const auto& axis = manifest.at("axis");
        ds.axis.start_ts = axis.at("start_ts").get<std::int64_t>();
        ds.axis.interval_minutes = axis.at("interval_minutes").get<std::int64_t>();
        ds.axis.n_slots = axis.at("n_slots").get<std::int64_t>();
        const auto& roster = manifest.at("roster");
        ds.roster.st_fields = roster.at("st_fields").get<std::vector<std::string>>();
        ds.roster.weather_fields = roster.at("weather_fields").get<std::vector<std::string>>();
        ds.tasks = manifest.at("tasks").get<std::vector<std::string>>();
        ds.splits.train_end = manifest.at("splits").at("train_end").get<std::int64_t>();
        ds.splits.val_end = manifest.at("splits").at("val_end").get<std::int64_t>();
        const auto& norm = manifest.at("normalization");
        for (const auto& entry : norm.at("st"))
            ds.norm.st.emplace_back(
                entry.at("field").get<std::string>(),
                FieldStats{entry.at("min").get<double>(), entry.at("max").get<double>()});
        ds.norm.poi = {norm.at("poi").at("min").get<double>(),
                       norm.at("poi").at("max").get<double>()};
        ds.counters = detail::counters_from_json(manifest.at("counters"));

        const auto blob = detail::read_file(dir / "dataset.params");
        if (manifest.at("blob_bytes").get<std::size_t>() != blob.size())
            throw IoError("dataset blob is " + std::to_string(blob.size()) +
                          " bytes but the manifest expects " +
                          std::to_string(manifest.at("blob_bytes").get<std::size_t>()));

        for (const auto& entry : manifest.at("tensors")) {
            const auto name = entry.at("name").get<std::string>();
            Tensor<T> tensor = detail::read_tensor_entry<T>(entry, blob, "dataset");
            const auto dot = name.find('.');
            const std::string split = name.substr(0, dot);
            const std::string kind = name.substr(dot + 1);
            SampleBatch<T>* batch = split == "train" ? &ds.train
                                    : split == "val" ? &ds.val
                                    : split == "test" ? &ds.test
                                                      : nullptr;
            if (batch == nullptr) throw IoError("unknown dataset tensor '" + name + "'");
            if (kind == "x_st")
                batch->X_st = tensor;
            else if (kind == "x_w")
                batch->X_w = tensor;
            else if (kind == "cd")
                batch->CD = tensor;
            else if (kind == "cw")
                batch->CW = tensor;
            else if (kind == "cp")
                batch->CP = tensor;
            else if (kind.rfind("target.", 0) == 0)
                batch->targets.emplace(kind.substr(7), tensor);
            else
                throw IoError("unknown dataset tensor '" + name + "'");
        }
    } catch (const nlohmann::json::exception&) {
        throw IoError("corrupt dataset manifest in '" + dir.string() + "'");
    }
    return ds;
}

}  // namespace gesme
