#pragma once

// Data pipeline: the discrete time axis, raw CSV ingest (orders, GPS
// trajectories, weather, POI), zone-slot aggregation, context and weather
// encoding, and window assembly into normalized SampleBatch splits.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gesme/common.hpp"
#include "gesme/sample.hpp"
#include "gesme/tensor.hpp"

namespace gesme {

// ---------------------------------------------------------------------------
// Time axis
// ---------------------------------------------------------------------------

struct TimeAxis {
    std::int64_t start_ts = 0;          // Unix seconds, midnight-aligned
    std::int64_t interval_minutes = 0;  // slot length
    std::int64_t n_slots = 0;

    std::int64_t interval_seconds() const { return interval_minutes * 60; }
    std::int64_t slots_per_day() const { return 1440 / interval_minutes; }

    // Slot containing ts, or -1 outside the axis.
    std::int64_t slot_of(std::int64_t ts) const {
        if (ts < start_ts) return -1;
        const std::int64_t slot = (ts - start_ts) / interval_seconds();
        return slot < n_slots ? slot : -1;
    }

    std::int64_t ts_of(std::int64_t slot) const { return start_ts + slot * interval_seconds(); }
    std::int64_t slot_in_day(std::int64_t slot) const { return slot % slots_per_day(); }

    // 1970-01-01 was a Thursday; day 0 of the week here is Sunday.
    bool weekend(std::int64_t slot) const {
        const std::int64_t day = ts_of(slot) / 86400;
        const std::int64_t dow = (day + 4) % 7;
        return dow == 0 || dow == 6;
    }
};

// Uniform slot grid over whole days.  The interval must divide a day.
inline TimeAxis partition_time(std::int64_t start_ts, std::int64_t days,
                               std::int64_t interval_minutes) {
    if (interval_minutes < 1 || 1440 % interval_minutes != 0)
        throw ConfigError("interval of " + std::to_string(interval_minutes) +
                          " minutes does not divide a day");
    if (days < 1) throw ConfigError("time axis needs at least one day");
    if (start_ts % 86400 != 0) throw ConfigError("time axis must start at midnight UTC");
    TimeAxis axis;
    axis.start_ts = start_ts;
    axis.interval_minutes = interval_minutes;
    axis.n_slots = days * (1440 / interval_minutes);
    return axis;
}

// ---------------------------------------------------------------------------
// CSV ingest
// ---------------------------------------------------------------------------

struct OrderRow {
    std::string order_id;
    std::int64_t zone_id = 0;
    std::int64_t ts = 0;
    std::string driver_id;  // empty means no driver answered
};

struct TrajPoint {
    std::string trip_id;
    std::int64_t ts = 0;
    double lat = 0;
    double lon = 0;
};

inline constexpr int kWeatherContinuous = 7;

struct WeatherRow {
    std::int64_t ts = 0;
    std::string category;
    std::array<double, kWeatherContinuous> cont{};  // temp, pm, dew, humidity, cloud, wind, visibility
};

inline const std::array<const char*, kWeatherContinuous>& weather_continuous_names() {
    static const std::array<const char*, kWeatherContinuous> names{
        "temp", "pm", "dew", "humidity", "cloud", "wind", "visibility"};
    return names;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    fields.push_back(cur);
    return fields;
}

inline IngestError csv_error(const std::string& file, std::size_t line_no, const std::string& what) {
    return IngestError(file + " line " + std::to_string(line_no) + ": " + what);
}

inline double parse_csv_double(const std::string& field, const std::string& file,
                               std::size_t line_no, const char* column) {
    double out = 0;
    const char* begin = field.data();
    const char* end = begin + field.size();
    auto [ptr, ec] = std::from_chars(begin, end, out);
    if (ec != std::errc{} || ptr != end)
        throw csv_error(file, line_no, std::string("cannot parse ") + column + " from '" + field + "'");
    return out;
}

inline std::int64_t parse_csv_int(const std::string& field, const std::string& file,
                                  std::size_t line_no, const char* column) {
    std::int64_t out = 0;
    const char* begin = field.data();
    const char* end = begin + field.size();
    auto [ptr, ec] = std::from_chars(begin, end, out);
    if (ec != std::errc{} || ptr != end)
        throw csv_error(file, line_no, std::string("cannot parse ") + column + " from '" + field + "'");
    return out;
}

// Opens the file, validates the exact header, and hands rows to `consume`
// with their 1-based line number.
template <typename F>
void read_csv(const std::string& path, const std::string& header, F&& consume) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "'");
    const std::string file = std::filesystem::path(path).filename().string();
    std::string line;
    std::size_t line_no = 0;
    if (!std::getline(in, line)) throw csv_error(file, 1, "empty file");
    ++line_no;
    {
        auto got = line;
        if (!got.empty() && got.back() == '\r') got.pop_back();
        if (got != header)
            throw csv_error(file, 1, "header is '" + got + "', expected '" + header + "'");
    }
    const std::size_t n_cols = split_csv_line(header).size();
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        auto fields = split_csv_line(line);
        if (fields.size() != n_cols)
            throw csv_error(file, line_no, "expected " + std::to_string(n_cols) + " fields, got " +
                                               std::to_string(fields.size()));
        consume(file, line_no, fields);
    }
}

}  // namespace detail

inline std::vector<OrderRow> read_orders_csv(const std::string& path) {
    std::vector<OrderRow> rows;
    detail::read_csv(path, "order_id,zone_id,ts,driver_id",
                     [&rows](const std::string& file, std::size_t line_no,
                             const std::vector<std::string>& f) {
                         OrderRow row;
                         row.order_id = f[0];
                         if (row.order_id.empty())
                             throw detail::csv_error(file, line_no, "empty order_id");
                         row.zone_id = detail::parse_csv_int(f[1], file, line_no, "zone_id");
                         row.ts = detail::parse_csv_int(f[2], file, line_no, "ts");
                         row.driver_id = f[3];
                         rows.push_back(std::move(row));
                     });
    return rows;
}

inline std::vector<TrajPoint> read_trajectory_csv(const std::string& path) {
    std::vector<TrajPoint> rows;
    detail::read_csv(path, "trip_id,ts,lat,lon",
                     [&rows](const std::string& file, std::size_t line_no,
                             const std::vector<std::string>& f) {
                         TrajPoint p;
                         p.trip_id = f[0];
                         if (p.trip_id.empty())
                             throw detail::csv_error(file, line_no, "empty trip_id");
                         p.ts = detail::parse_csv_int(f[1], file, line_no, "ts");
                         p.lat = detail::parse_csv_double(f[2], file, line_no, "lat");
                         p.lon = detail::parse_csv_double(f[3], file, line_no, "lon");
                         rows.push_back(std::move(p));
                     });
    return rows;
}

inline std::vector<WeatherRow> read_weather_csv(const std::string& path) {
    std::vector<WeatherRow> rows;
    detail::read_csv(path, "ts,category,temp,pm,dew,humidity,cloud,wind,visibility",
                     [&rows](const std::string& file, std::size_t line_no,
                             const std::vector<std::string>& f) {
                         WeatherRow row;
                         row.ts = detail::parse_csv_int(f[0], file, line_no, "ts");
                         row.category = f[1];
                         if (row.category.empty())
                             throw detail::csv_error(file, line_no, "empty category");
                         for (int i = 0; i < kWeatherContinuous; ++i)
                             row.cont[static_cast<std::size_t>(i)] = detail::parse_csv_double(
                                 f[static_cast<std::size_t>(2 + i)], file, line_no,
                                 weather_continuous_names()[static_cast<std::size_t>(i)]);
                         rows.push_back(std::move(row));
                     });
    return rows;
}

// zone_id -> poi_count, densified to [0, n) with zeros for absent zones.
inline std::vector<double> read_poi_csv(const std::string& path, std::int64_t n_zones) {
    std::vector<double> poi(static_cast<std::size_t>(n_zones), 0.0);
    detail::read_csv(path, "zone_id,poi_count",
                     [&poi, n_zones](const std::string& file, std::size_t line_no,
                                     const std::vector<std::string>& f) {
                         const auto zone = detail::parse_csv_int(f[0], file, line_no, "zone_id");
                         if (zone < 0 || zone >= n_zones)
                             throw detail::csv_error(file, line_no,
                                                     "zone_id " + std::to_string(zone) +
                                                         " outside [0, " + std::to_string(n_zones) + ")");
                         poi[static_cast<std::size_t>(zone)] =
                             detail::parse_csv_double(f[1], file, line_no, "poi_count");
                     });
    return poi;
}

// ---------------------------------------------------------------------------
// Aggregation to zone x slot matrices
// ---------------------------------------------------------------------------

// One named N x n_slots matrix, row-major by zone.
struct ZoneSlotField {
    std::string name;
    std::int64_t n_zones = 0;
    std::int64_t n_slots = 0;
    std::vector<double> values;

    static ZoneSlotField zeros(std::string name, std::int64_t n_zones, std::int64_t n_slots) {
        ZoneSlotField f;
        f.name = std::move(name);
        f.n_zones = n_zones;
        f.n_slots = n_slots;
        f.values.assign(static_cast<std::size_t>(n_zones * n_slots), 0.0);
        return f;
    }

    double& at(std::int64_t zone, std::int64_t slot) {
        return values[static_cast<std::size_t>(zone * n_slots + slot)];
    }
    double at(std::int64_t zone, std::int64_t slot) const {
        return values[static_cast<std::size_t>(zone * n_slots + slot)];
    }
};

struct IngestCounters {
    std::int64_t orders_total = 0;
    std::int64_t orders_outside_axis = 0;
    std::int64_t orders_unanswered = 0;
    std::int64_t trips_total = 0;
    std::int64_t traj_points_total = 0;
    std::int64_t traj_points_out_of_grid = 0;
    std::int64_t traj_points_outside_axis = 0;
    std::int64_t cells_without_speed = 0;
    std::int64_t weather_slots_filled = 0;
    std::int64_t weather_unseen_categories = 0;
};

struct OrderAggregate {
    ZoneSlotField demand;  // all orders
    ZoneSlotField answered;
    ZoneSlotField gap;  // demand - answered
    IngestCounters counters;
};

// Counts orders per zone and slot.  demand counts every order, answered only
// those with a driver, gap is their difference.
inline OrderAggregate aggregate_orders(const std::vector<OrderRow>& rows, const TimeAxis& axis,
                                       std::int64_t n_zones) {
    OrderAggregate agg{ZoneSlotField::zeros("original_demand", n_zones, axis.n_slots),
                       ZoneSlotField::zeros("answered", n_zones, axis.n_slots),
                       ZoneSlotField::zeros("gap", n_zones, axis.n_slots),
                       {}};
    for (const auto& row : rows) {
        agg.counters.orders_total += 1;
        if (row.zone_id < 0 || row.zone_id >= n_zones)
            throw IngestError("order '" + row.order_id + "' references unknown zone " +
                              std::to_string(row.zone_id));
        const auto slot = axis.slot_of(row.ts);
        if (slot < 0) {
            agg.counters.orders_outside_axis += 1;
            continue;
        }
        agg.demand.at(row.zone_id, slot) += 1;
        if (row.driver_id.empty()) {
            agg.counters.orders_unanswered += 1;
        } else {
            agg.answered.at(row.zone_id, slot) += 1;
        }
    }
    for (std::size_t i = 0; i < agg.gap.values.size(); ++i)
        agg.gap.values[i] = agg.demand.values[i] - agg.answered.values[i];
    return agg;
}

// Rectangular lat/lon grid; zone = row * cols + col, row-major from the
// south-west corner.
struct GridSpec {
    double lat0 = 0, lon0 = 0;  // south-west corner
    double lat1 = 0, lon1 = 0;  // north-east corner
    std::int64_t rows = 0, cols = 0;

    std::int64_t n_zones() const { return rows * cols; }

    std::int64_t zone_of(double lat, double lon) const {
        if (lat < lat0 || lat >= lat1 || lon < lon0 || lon >= lon1) return -1;
        const auto r = static_cast<std::int64_t>((lat - lat0) / (lat1 - lat0) * static_cast<double>(rows));
        const auto c = static_cast<std::int64_t>((lon - lon0) / (lon1 - lon0) * static_cast<double>(cols));
        return std::min(r, rows - 1) * cols + std::min(c, cols - 1);
    }
};

inline double haversine_km(double lat1, double lon1, double lat2, double lon2) {
    constexpr double kEarthRadiusKm = 6371.0088;
    constexpr double kDeg = 3.14159265358979323846 / 180.0;
    const double dlat = (lat2 - lat1) * kDeg;
    const double dlon = (lon2 - lon1) * kDeg;
    const double a = std::sin(dlat / 2) * std::sin(dlat / 2) +
                     std::cos(lat1 * kDeg) * std::cos(lat2 * kDeg) * std::sin(dlon / 2) *
                         std::sin(dlon / 2);
    return 2.0 * kEarthRadiusKm * std::asin(std::min(1.0, std::sqrt(a)));
}

struct TrajAggregate {
    ZoneSlotField supply;  // distinct trajectories seen in the cell
    ZoneSlotField speed;   // mean per-vehicle in-cell speed, km/h
    ZoneSlotField starts;  // trip start points
    IngestCounters counters;
};

// Distinct-trajectory counts, mean in-cell speeds, and start-point counts.
// Points outside the grid or the time axis are dropped and counted.  A trip
// whose timestamps do not strictly increase is rejected.
inline TrajAggregate aggregate_trajectories(const std::vector<TrajPoint>& points,
                                            const TimeAxis& axis, const GridSpec& grid) {
    const std::int64_t N = grid.n_zones();
    if (N < 1) throw ConfigError("grid has no zones");
    TrajAggregate agg{ZoneSlotField::zeros("supply", N, axis.n_slots),
                      ZoneSlotField::zeros("speed", N, axis.n_slots),
                      ZoneSlotField::zeros("starts", N, axis.n_slots),
                      {}};

    // Group points per trip in file order.
    std::vector<std::pair<std::string, std::vector<const TrajPoint*>>> trips;
    std::map<std::string, std::size_t> index;
    for (const auto& p : points) {
        auto [it, inserted] = index.try_emplace(p.trip_id, trips.size());
        if (inserted) trips.push_back({p.trip_id, {}});
        trips[it->second].second.push_back(&p);
    }
    agg.counters.trips_total = static_cast<std::int64_t>(trips.size());
    agg.counters.traj_points_total = static_cast<std::int64_t>(points.size());

    // (zone, slot) -> accumulated distance km and seconds per trip.
    std::map<std::pair<std::int64_t, std::int64_t>, std::pair<double, double>> cell_sums;
    std::map<std::pair<std::int64_t, std::int64_t>, std::pair<double, std::int64_t>> cell_speed;

    for (const auto& [trip_id, pts] : trips) {
        for (std::size_t i = 1; i < pts.size(); ++i)
            if (pts[i]->ts <= pts[i - 1]->ts)
                throw IngestError("trip '" + trip_id + "' has non-monotone timestamps");

        std::set<std::pair<std::int64_t, std::int64_t>> visited;
        cell_sums.clear();
        bool started = false;
        for (std::size_t i = 0; i < pts.size(); ++i) {
            const auto& p = *pts[i];
            const auto zone = grid.zone_of(p.lat, p.lon);
            const auto slot = axis.slot_of(p.ts);
            if (zone < 0) {
                agg.counters.traj_points_out_of_grid += 1;
                continue;
            }
            if (slot < 0) {
                agg.counters.traj_points_outside_axis += 1;
                continue;
            }
            visited.insert({zone, slot});
            if (!started) {
                agg.starts.at(zone, slot) += 1;
                started = true;
            }
            if (i + 1 < pts.size()) {
                const auto& q = *pts[i + 1];
                if (grid.zone_of(q.lat, q.lon) == zone && axis.slot_of(q.ts) == slot) {
                    auto& sums = cell_sums[{zone, slot}];
                    sums.first += haversine_km(p.lat, p.lon, q.lat, q.lon);
                    sums.second += static_cast<double>(q.ts - p.ts);
                }
            }
        }
        for (const auto& cell : visited) agg.supply.at(cell.first, cell.second) += 1;
        for (const auto& [cell, sums] : cell_sums)
            if (sums.second > 0) {
                auto& acc = cell_speed[cell];
                acc.first += sums.first / sums.second * 3600.0;  // km/h for this vehicle
                acc.second += 1;
            }
    }

    for (const auto& [cell, acc] : cell_speed)
        agg.speed.at(cell.first, cell.second) = acc.first / static_cast<double>(acc.second);
    for (std::int64_t z = 0; z < N; ++z)
        for (std::int64_t t = 0; t < axis.n_slots; ++t)
            if (cell_speed.find({z, t}) == cell_speed.end()) agg.counters.cells_without_speed += 1;
    return agg;
}

// ---------------------------------------------------------------------------
// Context encoding
// ---------------------------------------------------------------------------

struct ContextEncoding {
    std::vector<double> cd;  // n_slots x 3 one-hot eight-hour bins
    std::vector<double> cw;  // n_slots, 1 on weekends
};

// Three eight-hour day bins (night, day, evening) plus a weekend flag.
inline ContextEncoding encode_contexts(const TimeAxis& axis) {
    const auto spd = axis.slots_per_day();
    if (spd % 3 != 0)
        throw ConfigError("slots per day (" + std::to_string(spd) + ") not divisible into 3 bins");
    ContextEncoding enc;
    enc.cd.assign(static_cast<std::size_t>(axis.n_slots * 3), 0.0);
    enc.cw.assign(static_cast<std::size_t>(axis.n_slots), 0.0);
    const auto per_bin = spd / 3;
    for (std::int64_t t = 0; t < axis.n_slots; ++t) {
        const auto bin = axis.slot_in_day(t) / per_bin;
        enc.cd[static_cast<std::size_t>(t * 3 + bin)] = 1.0;
        enc.cw[static_cast<std::size_t>(t)] = axis.weekend(t) ? 1.0 : 0.0;
    }
    return enc;
}

// ---------------------------------------------------------------------------
// Weather encoding
// ---------------------------------------------------------------------------

struct WeatherEncoding {
    std::vector<std::string> field_names;  // category one-hots then continuous
    std::vector<double> xw;                // n_slots x width
    std::vector<std::string> categories;   // seen in the training slots, sorted
    std::array<double, kWeatherContinuous> mean{};
    std::array<double, kWeatherContinuous> stddev{};
    std::int64_t slots_filled = 0;
    std::int64_t unseen_categories = 0;

    std::int64_t width() const { return static_cast<std::int64_t>(field_names.size()); }
};

// One-hot weather category plus standardized continuous columns.  Category
// vocabulary and standardization statistics come from the training slots
// only.  Slots without a record inherit the previous one (counted); a
// category never seen in training encodes as all zeros (counted).
inline WeatherEncoding encode_weather(const std::vector<WeatherRow>& rows, const TimeAxis& axis,
                                      std::int64_t train_end_slot) {
    if (train_end_slot < 1 || train_end_slot > axis.n_slots)
        throw ConfigError("weather training boundary outside the time axis");

    // Latest record per slot wins.
    std::vector<const WeatherRow*> per_slot(static_cast<std::size_t>(axis.n_slots), nullptr);
    for (const auto& row : rows) {
        const auto slot = axis.slot_of(row.ts);
        if (slot < 0) continue;
        auto& cur = per_slot[static_cast<std::size_t>(slot)];
        if (cur == nullptr || row.ts >= cur->ts) cur = &row;
    }

    WeatherEncoding enc;

    // Fill gaps from the nearest earlier slot; leading gaps borrow the first
    // known record.
    const WeatherRow* last = nullptr;
    for (auto& slot : per_slot)
        if (slot != nullptr) {
            last = slot;
            break;
        }
    if (last == nullptr) throw IngestError("weather has no records inside the time axis");
    for (auto& slot : per_slot) {
        if (slot == nullptr) {
            slot = last;
            enc.slots_filled += 1;
        } else {
            last = slot;
        }
    }

    std::set<std::string> vocab;
    for (std::int64_t t = 0; t < train_end_slot; ++t)
        vocab.insert(per_slot[static_cast<std::size_t>(t)]->category);
    enc.categories.assign(vocab.begin(), vocab.end());

    for (const auto& c : enc.categories) enc.field_names.push_back("weather_" + c);
    for (const auto* name : weather_continuous_names()) enc.field_names.push_back(name);

    for (int i = 0; i < kWeatherContinuous; ++i) {
        double sum = 0;
        for (std::int64_t t = 0; t < train_end_slot; ++t)
            sum += per_slot[static_cast<std::size_t>(t)]->cont[static_cast<std::size_t>(i)];
        const double mean = sum / static_cast<double>(train_end_slot);
        double var = 0;
        for (std::int64_t t = 0; t < train_end_slot; ++t) {
            const double d =
                per_slot[static_cast<std::size_t>(t)]->cont[static_cast<std::size_t>(i)] - mean;
            var += d * d;
        }
        const double sd = std::sqrt(var / static_cast<double>(train_end_slot));
        enc.mean[static_cast<std::size_t>(i)] = mean;
        enc.stddev[static_cast<std::size_t>(i)] = sd > 0 ? sd : 1.0;
    }

    const auto width = enc.width();
    enc.xw.assign(static_cast<std::size_t>(axis.n_slots * width), 0.0);
    for (std::int64_t t = 0; t < axis.n_slots; ++t) {
        const auto& row = *per_slot[static_cast<std::size_t>(t)];
        auto cat = std::lower_bound(enc.categories.begin(), enc.categories.end(), row.category);
        if (cat != enc.categories.end() && *cat == row.category) {
            const auto k = static_cast<std::int64_t>(cat - enc.categories.begin());
            enc.xw[static_cast<std::size_t>(t * width + k)] = 1.0;
        } else {
            enc.unseen_categories += 1;
        }
        for (int i = 0; i < kWeatherContinuous; ++i)
            enc.xw[static_cast<std::size_t>(t * width + static_cast<std::int64_t>(enc.categories.size()) + i)] =
                (row.cont[static_cast<std::size_t>(i)] - enc.mean[static_cast<std::size_t>(i)]) /
                enc.stddev[static_cast<std::size_t>(i)];
    }
    return enc;
}

// ---------------------------------------------------------------------------
// Sample assembly
// ---------------------------------------------------------------------------

struct SplitBounds {
    std::int64_t train_end = 0;  // first validation slot
    std::int64_t val_end = 0;    // first test slot
};

// Chronological 70 / 15 / 15 split.
inline SplitBounds default_splits(std::int64_t n_slots) {
    SplitBounds s;
    s.train_end = static_cast<std::int64_t>(std::llround(static_cast<double>(n_slots) * 0.70));
    s.val_end = static_cast<std::int64_t>(std::llround(static_cast<double>(n_slots) * 0.85));
    if (s.train_end < 1 || s.val_end <= s.train_end || s.val_end >= n_slots)
        throw ConfigError("time axis too short to split");
    return s;
}

struct FieldStats {
    double min = 0;
    double max = 1;
};

struct Normalization {
    std::vector<std::pair<std::string, FieldStats>> st;  // per history field
    FieldStats poi;

    const FieldStats& field(const std::string& name) const {
        for (const auto& [n, s] : st)
            if (n == name) return s;
        throw UsageError("no normalization stats for field '" + name + "'");
    }
};

inline double normalize_value(double v, const FieldStats& s) {
    return s.max > s.min ? (v - s.min) / (s.max - s.min) : 0.0;
}

inline double denormalize_value(double v, const FieldStats& s) {
    return s.max > s.min ? v * (s.max - s.min) + s.min : s.min;
}

template <typename T>
struct Dataset {
    SampleBatch<T> train, val, test;
    FeatureRoster roster;
    std::vector<std::string> tasks;
    Normalization norm;
    SplitBounds splits;
    TimeAxis axis;
    IngestCounters counters;

    std::int64_t n_zones() const { return train.X_st.defined() ? train.X_st.dim(1) : 0; }
};

// Slides a lookback window over each split, min-max normalizes every history
// field with training statistics, and broadcasts contexts across zones.
// Windows reaching across a split boundary are dropped, so the first sample
// of a split sits `lookback` slots inside it.
template <typename T>
Dataset<T> make_samples(const std::vector<ZoneSlotField>& fields, const std::vector<double>& poi,
                        const WeatherEncoding& weather, const TimeAxis& axis,
                        const std::vector<std::string>& tasks, std::int64_t lookback,
                        const SplitBounds& splits) {
    if (fields.empty()) throw ConfigError("no history fields");
    const std::int64_t N = fields[0].n_zones;
    const std::int64_t F = static_cast<std::int64_t>(fields.size());
    const std::int64_t b = lookback;
    if (b < 1) throw ConfigError("lookback must be positive");
    for (const auto& f : fields)
        if (f.n_zones != N || f.n_slots != axis.n_slots)
            throw DimensionError("field '" + f.name + "' does not match the axis");
    if (static_cast<std::int64_t>(poi.size()) != N)
        throw DimensionError("poi vector does not match the zone count");
    if (splits.train_end <= b || splits.val_end <= splits.train_end ||
        splits.val_end >= axis.n_slots)
        throw ConfigError("split boundaries do not leave room for samples");
    for (const auto& task : tasks) {
        bool known = false;
        for (const auto& f : fields) known = known || f.name == task;
        if (!known) throw ConfigError("task '" + task + "' is not a history field");
    }

    Dataset<T> ds;
    ds.axis = axis;
    ds.splits = splits;
    ds.tasks = tasks;
    for (const auto& f : fields) ds.roster.st_fields.push_back(f.name);
    ds.roster.weather_fields = weather.field_names;

    // Training-split statistics per field, and for the POI column.
    for (const auto& f : fields) {
        FieldStats s{f.values[0], f.values[0]};
        for (std::int64_t z = 0; z < N; ++z)
            for (std::int64_t t = 0; t < splits.train_end; ++t) {
                s.min = std::min(s.min, f.at(z, t));
                s.max = std::max(s.max, f.at(z, t));
            }
        ds.norm.st.emplace_back(f.name, s);
    }
    ds.norm.poi = {poi[0], poi[0]};
    for (double v : poi) {
        ds.norm.poi.min = std::min(ds.norm.poi.min, v);
        ds.norm.poi.max = std::max(ds.norm.poi.max, v);
    }

    const auto context = encode_contexts(axis);
    const auto Fw = weather.width();

    auto build_split = [&](std::int64_t lo, std::int64_t hi) {
        std::vector<std::int64_t> anchors;
        for (std::int64_t t = lo + b; t < hi; ++t) anchors.push_back(t);
        SampleBatch<T> batch;
        if (anchors.empty()) return batch;
        const auto S = static_cast<std::int64_t>(anchors.size());

        batch.X_st = Tensor<T>({S, N, F, b});
        batch.X_w = Tensor<T>({S, b, Fw});
        batch.CD = Tensor<T>({S, N, 3});
        batch.CW = Tensor<T>({S, N});
        batch.CP = Tensor<T>({S, N});
        for (const auto& task : tasks) batch.targets[task] = Tensor<T>({S, N});

        auto x_st = batch.X_st.values();
        auto x_w = batch.X_w.values();
        auto cd = batch.CD.values();
        auto cw = batch.CW.values();
        auto cp = batch.CP.values();

        for (std::int64_t s = 0; s < S; ++s) {
            const auto t = anchors[static_cast<std::size_t>(s)];
            for (std::int64_t z = 0; z < N; ++z) {
                for (std::int64_t f = 0; f < F; ++f) {
                    const auto& stats = ds.norm.st[static_cast<std::size_t>(f)].second;
                    for (std::int64_t l = 0; l < b; ++l)
                        x_st[static_cast<std::size_t>(((s * N + z) * F + f) * b + l)] =
                            static_cast<T>(normalize_value(
                                fields[static_cast<std::size_t>(f)].at(z, t - b + l), stats));
                }
                for (std::int64_t k = 0; k < 3; ++k)
                    cd[static_cast<std::size_t>((s * N + z) * 3 + k)] =
                        static_cast<T>(context.cd[static_cast<std::size_t>(t * 3 + k)]);
                cw[static_cast<std::size_t>(s * N + z)] =
                    static_cast<T>(context.cw[static_cast<std::size_t>(t)]);
                cp[static_cast<std::size_t>(s * N + z)] = static_cast<T>(
                    normalize_value(poi[static_cast<std::size_t>(z)], ds.norm.poi));
            }
            for (std::int64_t l = 0; l < b; ++l)
                for (std::int64_t w = 0; w < Fw; ++w)
                    x_w[static_cast<std::size_t>((s * b + l) * Fw + w)] = static_cast<T>(
                        weather.xw[static_cast<std::size_t>((t - b + l) * Fw + w)]);
            for (const auto& task : tasks) {
                const ZoneSlotField* field = nullptr;
                for (const auto& f : fields)
                    if (f.name == task) field = &f;
                const auto& stats = ds.norm.field(task);
                auto tv = batch.targets[task].values();
                for (std::int64_t z = 0; z < N; ++z)
                    tv[static_cast<std::size_t>(s * N + z)] =
                        static_cast<T>(normalize_value(field->at(z, t), stats));
            }
        }
        return batch;
    };

    ds.train = build_split(0, splits.train_end);
    ds.val = build_split(splits.train_end, splits.val_end);
    ds.test = build_split(splits.val_end, axis.n_slots);
    ds.counters.weather_slots_filled = weather.slots_filled;
    ds.counters.weather_unseen_categories = weather.unseen_categories;
    return ds;
}

}  // namespace gesme
