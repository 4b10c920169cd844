#pragma once

// Synthetic benchmark data: per-zone Poisson demand driven by a daily
// sinusoid, weekday factor, and smooth zone gradient; binomial gaps that
// grow with demand; an optional warped second city; plus matching weather,
// POI counts, and an optional pure-noise history field.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "gesme/common.hpp"
#include "gesme/data.hpp"
#include "gesme/init.hpp"

namespace gesme {

struct SynthConfig {
    std::int64_t n_zones = 4;
    std::int64_t days = 20;
    std::int64_t interval_minutes = 15;
    std::int64_t start_ts = 0;  // 1970-01-01, a Thursday
    std::string mode = "demand_gap";  // or "two_city"
    double base_min = 3.5;            // quietest zone's base rate
    double base_max = 9.0;            // busiest zone's base rate
    double weekend_factor = 0.75;     // weekend demand multiplier
    double noise = 0.25;              // additive uniform rate noise
    double gap_min = 0.10;            // unanswered fraction, quietest zone
    double gap_max = 0.35;            // unanswered fraction, busiest zone
    bool add_noise_field = false;     // extra i.i.d. history field
    std::uint64_t seed = 0;
};

struct SynthData {
    TimeAxis axis;
    std::vector<ZoneSlotField> fields;
    std::vector<std::string> tasks;
    std::vector<double> poi;
    std::vector<WeatherRow> weather;
};

namespace detail {

inline std::int64_t poisson_draw(Rng& rng, double lambda) {
    if (lambda <= 0) return 0;
    const double limit = std::exp(-lambda);
    double p = 1.0;
    std::int64_t k = 0;
    do {
        k += 1;
        p *= uniform_draw(rng, 0.0, 1.0);
    } while (p > limit);
    return k - 1;
}

inline std::int64_t binomial_draw(Rng& rng, std::int64_t n, double p) {
    std::int64_t hits = 0;
    for (std::int64_t i = 0; i < n; ++i)
        if (uniform_draw(rng, 0.0, 1.0) < p) hits += 1;
    return hits;
}

}  // namespace detail

inline void validate_config(const SynthConfig& cfg) {
    if (cfg.n_zones < 1) throw ConfigError("synth needs at least one zone");
    if (cfg.mode != "demand_gap" && cfg.mode != "two_city")
        throw ConfigError("unknown synth mode '" + cfg.mode + "'");
    if (cfg.base_min <= 0 || cfg.base_max < cfg.base_min)
        throw ConfigError("synth base rates must satisfy 0 < base_min <= base_max");
    if (cfg.gap_min < 0 || cfg.gap_max > 1 || cfg.gap_max < cfg.gap_min)
        throw ConfigError("synth gap fractions must satisfy 0 <= gap_min <= gap_max <= 1");
}

inline SynthData synth_generate(const SynthConfig& cfg) {
    validate_config(cfg);
    SynthData out;
    out.axis = partition_time(cfg.start_ts, cfg.days, cfg.interval_minutes);
    const auto& axis = out.axis;
    const std::int64_t N = cfg.n_zones;
    const auto spd = axis.slots_per_day();
    constexpr double kTau = 2.0 * 3.14159265358979323846;

    auto zone_frac = [N](std::int64_t z) {
        return N > 1 ? static_cast<double>(z) / static_cast<double>(N - 1) : 0.0;
    };
    auto base_rate = [&](std::int64_t z) {
        return cfg.base_min + (cfg.base_max - cfg.base_min) * zone_frac(z);
    };
    // Quiet nights, midday peak, slightly shifted per zone so the spatial
    // convolution has structure to find.
    auto rate = [&](std::int64_t z, std::int64_t t, Rng& rng) {
        const double phase = kTau * static_cast<double>(axis.slot_in_day(t)) / static_cast<double>(spd);
        const double daily = 0.2 + 0.8 * (0.5 + 0.5 * std::sin(phase - kTau / 4 + 0.3 * zone_frac(z)));
        const double week = axis.weekend(t) ? cfg.weekend_factor : 1.0;
        const double lambda = base_rate(z) * daily * week + uniform_draw(rng, -cfg.noise, cfg.noise);
        return std::max(0.0, lambda);
    };

    auto demand_field = [&](const std::string& name, const std::string& stream, double scale,
                            std::int64_t zone_shift, std::int64_t slot_shift) {
        auto rng = make_rng(cfg.seed, "synth." + stream);
        auto field = ZoneSlotField::zeros(name, N, axis.n_slots);
        for (std::int64_t z = 0; z < N; ++z)
            for (std::int64_t t = 0; t < axis.n_slots; ++t) {
                const auto src_z = (z + zone_shift) % N;
                const auto src_t = std::max<std::int64_t>(0, t - slot_shift);
                field.at(z, t) =
                    static_cast<double>(detail::poisson_draw(rng, scale * rate(src_z, src_t, rng)));
            }
        return field;
    };

    if (cfg.mode == "demand_gap") {
        auto demand = demand_field("original_demand", "demand", 1.0, 0, 0);
        auto gap_rng = make_rng(cfg.seed, "synth.gap");
        auto gap = ZoneSlotField::zeros("gap", N, axis.n_slots);
        for (std::int64_t z = 0; z < N; ++z) {
            const double p = cfg.gap_min + (cfg.gap_max - cfg.gap_min) * zone_frac(z);
            for (std::int64_t t = 0; t < axis.n_slots; ++t)
                gap.at(z, t) = static_cast<double>(detail::binomial_draw(
                    gap_rng, static_cast<std::int64_t>(demand.at(z, t)), p));
        }
        out.fields.push_back(std::move(demand));
        out.fields.push_back(std::move(gap));
        out.tasks = {"original_demand", "gap"};
    } else {
        // Second city: the same latent rate surface, smoothly warped (zone
        // roll, slot lag, damped scale) and re-sampled.
        out.fields.push_back(demand_field("demand_chengdu", "demand", 1.0, 0, 0));
        out.fields.push_back(
            demand_field("demand_xian", "city2", 0.85, std::max<std::int64_t>(1, N / 3), spd / 8));
        out.tasks = {"demand_chengdu", "demand_xian"};
    }

    if (cfg.add_noise_field) {
        auto rng = make_rng(cfg.seed, "synth.noisefield");
        auto field = ZoneSlotField::zeros("noise", N, axis.n_slots);
        for (auto& v : field.values) v = uniform_draw(rng, 0.0, 10.0);
        out.fields.push_back(std::move(field));
    }

    {
        auto rng = make_rng(cfg.seed, "synth.poi");
        out.poi.resize(static_cast<std::size_t>(N));
        for (std::int64_t z = 0; z < N; ++z)
            out.poi[static_cast<std::size_t>(z)] =
                std::floor(8.0 + 40.0 * zone_frac(z) + uniform_draw(rng, 0.0, 6.0));
    }

    {
        auto rng = make_rng(cfg.seed, "synth.weather");
        const char* categories[] = {"clear", "cloudy", "rain"};
        std::int64_t day_cat = 0;
        for (std::int64_t t = 0; t < axis.n_slots; ++t) {
            if (axis.slot_in_day(t) == 0) {
                const double u = uniform_draw(rng, 0.0, 1.0);
                day_cat = u < 0.5 ? 0 : (u < 0.8 ? 1 : 2);
            }
            const double phase = kTau * static_cast<double>(axis.slot_in_day(t)) / static_cast<double>(spd);
            WeatherRow row;
            row.ts = axis.ts_of(t);
            row.category = categories[day_cat];
            row.cont[0] = 20.0 + 8.0 * std::sin(phase - kTau / 4) + uniform_draw(rng, -1.0, 1.0);
            row.cont[1] = 60.0 + 20.0 * std::sin(kTau * static_cast<double>(t) /
                                                 (7.0 * static_cast<double>(spd))) +
                          uniform_draw(rng, -5.0, 5.0);
            row.cont[2] = row.cont[0] - 5.0 + uniform_draw(rng, -0.5, 0.5);
            row.cont[3] = 55.0 + 15.0 * std::sin(phase + 1.0) + uniform_draw(rng, -3.0, 3.0);
            row.cont[4] = (day_cat == 0 ? 20.0 : 60.0) + uniform_draw(rng, -10.0, 10.0);
            row.cont[5] = 10.0 + 5.0 * std::abs(std::sin(phase)) + uniform_draw(rng, -2.0, 2.0);
            row.cont[6] = (day_cat == 2 ? 8.0 : 15.0) + uniform_draw(rng, -1.0, 1.0);
            out.weather.push_back(std::move(row));
        }
    }

    return out;
}

}  // namespace gesme
