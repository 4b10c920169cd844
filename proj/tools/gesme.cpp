// Command-line driver: synthesize or ingest datasets, train and evaluate the
// forecasting variants, produce ablation tables, hyperparameter sweeps, and
// feature-importance reports.
//
// Exit codes: 0 success, 2 usage/config/schema error, 3 numerical failure.

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "gesme/checkpoint.hpp"
#include "gesme/common.hpp"
#include "gesme/data.hpp"
#include "gesme/dataset_io.hpp"
#include "gesme/metrics.hpp"
#include "gesme/model.hpp"
#include "gesme/sample.hpp"
#include "gesme/synth.hpp"
#include "gesme/train.hpp"

namespace {

using Real = float;
namespace fs = std::filesystem;
using nlohmann::json;

constexpr const char* kVersion = "v0.1.0";

// ---------------------------------------------------------------------------
// Flat key=value settings, applied in precedence order: preset, config file,
// --set pairs, dedicated flags.  Later entries win.
// ---------------------------------------------------------------------------

const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys = {
        // model
        "variant", "tasks", "ablation", "lookback", "layers_per_block", "experts_per_layer",
        "conv_filters", "conv_filter_len", "convrnn_filters", "convrnn_filter_len", "gru_hidden",
        "gate_hidden", "gate_filters", "alpha", "beta", "gamma", "weighting_activation", "seed",
        // training
        "lr", "batch_size", "patience", "max_epochs", "adam_beta1", "adam_beta2", "adam_eps",
        "target_train_loss",
        // synthetic scenario
        "mode", "zones", "days", "interval_minutes", "start_ts", "base_min", "base_max",
        "weekend_factor", "noise", "gap_min", "gap_max", "noise_field"};
    return keys;
}

struct Settings {
    std::vector<std::pair<std::string, std::string>> entries;

    void put(const std::string& key, const std::string& value) {
        if (known_keys().count(key) == 0)
            throw gesme::ConfigError("unknown config key '" + key + "'");
        entries.emplace_back(key, value);
    }

    bool has(const std::string& key) const {
        for (const auto& [k, v] : entries)
            if (k == key) return true;
        return false;
    }
};

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return "";
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream stream(s);
    std::string item;
    while (std::getline(stream, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::string join(const std::vector<std::string>& items, const std::string& sep = ",") {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i > 0) out += sep;
        out += items[i];
    }
    return out;
}

std::int64_t parse_int(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const auto v = std::stoll(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw gesme::ConfigError("key '" + key + "' needs an integer, got '" + value + "'");
    }
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const auto v = std::stoull(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw gesme::ConfigError("key '" + key + "' needs an unsigned integer, got '" + value +
                                 "'");
    }
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const auto v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw gesme::ConfigError("key '" + key + "' needs a number, got '" + value + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "1" || value == "true" || value == "yes") return true;
    if (value == "0" || value == "false" || value == "no") return false;
    throw gesme::ConfigError("key '" + key + "' needs a boolean, got '" + value + "'");
}

std::vector<std::int64_t> parse_int_list(const std::string& key, const std::string& value) {
    std::vector<std::int64_t> out;
    for (const auto& item : split_list(value)) out.push_back(parse_int(key, item));
    if (out.empty()) throw gesme::ConfigError("key '" + key + "' needs at least one integer");
    return out;
}

void load_config_file(const std::string& path, Settings& settings) {
    std::ifstream in(path);
    if (!in) throw gesme::IoError("cannot open config file '" + path + "'");
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        line_no += 1;
        const auto text = trim(line);
        if (text.empty() || text[0] == '#') continue;
        const auto eq = text.find('=');
        if (eq == std::string::npos)
            throw gesme::ConfigError("config file '" + path + "' line " +
                                     std::to_string(line_no) + ": expected key = value");
        settings.put(trim(text.substr(0, eq)), trim(text.substr(eq + 1)));
    }
}

// Presets pin published scenario settings; model hyperparameters default to
// the tuned values already, so `table1` adds nothing on top.
void apply_preset(const std::string& name, Settings& settings) {
    if (name == "table1") return;
    if (name == "scenario-synth") {
        // Fast self-contained smoke scenario on the synthetic generator; the
        // short epoch budget keeps a bare `train` run in the tens of seconds.
        settings.put("mode", "demand_gap");
        settings.put("tasks", "original_demand,gap");
        settings.put("max_epochs", "12");
        return;
    }
    if (name == "scenario1") {
        // Single-city demand and gap: 20 days of 10-minute slots from
        // 2016-01-01, six-slot lookback.
        settings.put("mode", "demand_gap");
        settings.put("tasks", "original_demand,gap");
        settings.put("interval_minutes", "10");
        settings.put("days", "20");
        settings.put("start_ts", "1451606400");
        settings.put("lookback", "6");
        return;
    }
    if (name == "scenario2") {
        // Two-city demand: 61 days of 15-minute slots from 2016-10-01 on a
        // 10x10 grid, nine-slot lookback.
        settings.put("mode", "two_city");
        settings.put("tasks", "demand_chengdu,demand_xian");
        settings.put("interval_minutes", "15");
        settings.put("days", "61");
        settings.put("start_ts", "1475280000");
        settings.put("zones", "100");
        settings.put("lookback", "9");
        return;
    }
    throw gesme::ConfigError("unknown preset '" + name + "'");
}

// ---------------------------------------------------------------------------
// Settings -> configs
// ---------------------------------------------------------------------------

struct Resolved {
    gesme::VariantKind variant = gesme::VariantKind::GESME;
    gesme::ModelConfig model;
    gesme::TrainConfig train;
    gesme::SynthConfig synth;
};

void apply_key(Resolved& r, const std::string& key, const std::string& value) {
    if (key == "variant") {
        r.variant = gesme::variant_from_name(value);
    } else if (key == "tasks") {
        r.model.tasks = split_list(value);
    } else if (key == "ablation") {
        auto blocks = split_list(value);
        r.model.ablation_mask = std::set<std::string>(blocks.begin(), blocks.end());
    } else if (key == "lookback") {
        r.model.lookback = parse_int(key, value);
    } else if (key == "layers_per_block") {
        r.model.layers_per_block = parse_int(key, value);
    } else if (key == "experts_per_layer") {
        r.model.experts_per_layer = parse_int(key, value);
    } else if (key == "conv_filters") {
        r.model.conv_filters = parse_int_list(key, value);
    } else if (key == "conv_filter_len") {
        r.model.conv_filter_len = parse_int(key, value);
    } else if (key == "convrnn_filters") {
        r.model.convrnn_filters = parse_int_list(key, value);
    } else if (key == "convrnn_filter_len") {
        r.model.convrnn_filter_len = parse_int(key, value);
    } else if (key == "gru_hidden") {
        r.model.gru_hidden = parse_int(key, value);
    } else if (key == "gate_hidden") {
        r.model.gate_hidden = parse_int(key, value);
    } else if (key == "gate_filters") {
        r.model.gate_filters = parse_int(key, value);
    } else if (key == "alpha") {
        r.model.alpha = parse_double(key, value);
        r.train.alpha = r.model.alpha;
    } else if (key == "beta") {
        r.model.beta = parse_double(key, value);
        r.train.beta = r.model.beta;
    } else if (key == "gamma") {
        r.model.gamma = parse_double(key, value);
    } else if (key == "weighting_activation") {
        r.model.weighting_activation = gesme::activation_from_name(value);
    } else if (key == "seed") {
        const auto seed = parse_u64(key, value);
        r.model.seed = seed;
        r.train.seed = seed;
        r.synth.seed = seed;
    } else if (key == "lr") {
        r.train.lr = parse_double(key, value);
    } else if (key == "batch_size") {
        r.train.batch_size = parse_int(key, value);
    } else if (key == "patience") {
        r.train.patience = parse_int(key, value);
    } else if (key == "max_epochs") {
        r.train.max_epochs = parse_int(key, value);
    } else if (key == "adam_beta1") {
        r.train.adam_beta1 = parse_double(key, value);
    } else if (key == "adam_beta2") {
        r.train.adam_beta2 = parse_double(key, value);
    } else if (key == "adam_eps") {
        r.train.adam_eps = parse_double(key, value);
    } else if (key == "target_train_loss") {
        r.train.target_train_loss = parse_double(key, value);
    } else if (key == "mode") {
        r.synth.mode = value;
    } else if (key == "zones") {
        r.synth.n_zones = parse_int(key, value);
    } else if (key == "days") {
        r.synth.days = parse_int(key, value);
    } else if (key == "interval_minutes") {
        r.synth.interval_minutes = parse_int(key, value);
    } else if (key == "start_ts") {
        r.synth.start_ts = parse_int(key, value);
    } else if (key == "base_min") {
        r.synth.base_min = parse_double(key, value);
    } else if (key == "base_max") {
        r.synth.base_max = parse_double(key, value);
    } else if (key == "weekend_factor") {
        r.synth.weekend_factor = parse_double(key, value);
    } else if (key == "noise") {
        r.synth.noise = parse_double(key, value);
    } else if (key == "gap_min") {
        r.synth.gap_min = parse_double(key, value);
    } else if (key == "gap_max") {
        r.synth.gap_max = parse_double(key, value);
    } else if (key == "noise_field") {
        r.synth.add_noise_field = parse_bool(key, value);
    } else {
        throw gesme::ConfigError("unknown config key '" + key + "'");
    }
}

Resolved resolve(const Settings& settings) {
    Resolved r;
    for (const auto& [key, value] : settings.entries) apply_key(r, key, value);
    return r;
}

// The exact configuration a run used, defaults expanded.
json config_echo(const Resolved& r, const gesme::ModelConfig& cfg) {
    json j;
    j["variant"] = gesme::variant_name(r.variant);
    j["tasks"] = cfg.tasks;
    j["ablation"] =
        std::vector<std::string>(cfg.ablation_mask.begin(), cfg.ablation_mask.end());
    j["n_zones"] = cfg.n_zones;
    j["lookback"] = cfg.lookback;
    j["layers_per_block"] = cfg.layers_per_block;
    j["experts_per_layer"] = cfg.experts_per_layer;
    j["conv_filters"] = cfg.conv_filters;
    j["conv_filter_len"] = cfg.conv_filter_len;
    j["convrnn_filters"] = cfg.convrnn_filters;
    j["convrnn_filter_len"] = cfg.convrnn_filter_len;
    j["gru_hidden"] = cfg.gru_hidden;
    j["gate_hidden"] = cfg.gate_hidden;
    j["gate_filters"] = cfg.gate_filters;
    j["gate_sharing"] = gesme::gate_sharing_name(cfg.gate_sharing);
    j["alpha"] = r.train.alpha;
    j["beta"] = r.train.beta;
    j["gamma"] = cfg.gamma;
    j["weighting_activation"] = gesme::activation_name(cfg.weighting_activation);
    j["seed"] = cfg.seed;
    j["lr"] = r.train.lr;
    j["batch_size"] = r.train.batch_size;
    j["patience"] = r.train.patience;
    j["max_epochs"] = r.train.max_epochs;
    j["adam_beta1"] = r.train.adam_beta1;
    j["adam_beta2"] = r.train.adam_beta2;
    j["adam_eps"] = r.train.adam_eps;
    j["target_train_loss"] = r.train.target_train_loss;
    j["mode"] = r.synth.mode;
    j["zones"] = r.synth.n_zones;
    j["days"] = r.synth.days;
    j["interval_minutes"] = r.synth.interval_minutes;
    j["start_ts"] = r.synth.start_ts;
    j["base_min"] = r.synth.base_min;
    j["base_max"] = r.synth.base_max;
    j["weekend_factor"] = r.synth.weekend_factor;
    j["noise"] = r.synth.noise;
    j["gap_min"] = r.synth.gap_min;
    j["gap_max"] = r.synth.gap_max;
    j["noise_field"] = r.synth.add_noise_field;
    return j;
}

// ---------------------------------------------------------------------------
// Dataset plumbing
// ---------------------------------------------------------------------------

gesme::Dataset<Real> synthesize_dataset(const Resolved& r) {
    auto data = gesme::synth_generate(r.synth);
    const auto splits = gesme::default_splits(data.axis.n_slots);
    const auto weather = gesme::encode_weather(data.weather, data.axis, splits.train_end);
    auto ds = gesme::make_samples<Real>(data.fields, data.poi, weather, data.axis, data.tasks,
                                        r.model.lookback, splits);
    ds.counters.weather_slots_filled = weather.slots_filled;
    ds.counters.weather_unseen_categories = weather.unseen_categories;
    return ds;
}

struct DataSource {
    gesme::Dataset<Real> ds;
    json info;
};

DataSource obtain_dataset(const std::string& data_dir, const Resolved& r) {
    DataSource src;
    if (!data_dir.empty()) {
        src.ds = gesme::load_dataset<Real>(data_dir);
        src.info["source"] = data_dir;
    } else {
        src.ds = synthesize_dataset(r);
        src.info["source"] = "synth";
    }
    src.info["zones"] = src.ds.n_zones();
    src.info["slots"] = src.ds.axis.n_slots;
    src.info["tasks"] = src.ds.tasks;
    src.info["train_samples"] = src.ds.train.X_st.defined() ? src.ds.train.size() : 0;
    src.info["val_samples"] = src.ds.val.X_st.defined() ? src.ds.val.size() : 0;
    src.info["test_samples"] = src.ds.test.X_st.defined() ? src.ds.test.size() : 0;
    return src;
}

// Zone count, lookback, and the default task list come from the data.
gesme::ModelConfig finalize_model(const Resolved& r, const Settings& settings,
                                  const gesme::Dataset<Real>& ds, bool data_loaded) {
    auto cfg = r.model;
    cfg.n_zones = ds.n_zones();
    if (data_loaded) {
        const auto data_lookback = ds.train.X_st.dim(3);
        if (settings.has("lookback") && cfg.lookback != data_lookback)
            throw gesme::ConfigError("lookback " + std::to_string(cfg.lookback) +
                                     " does not match the dataset's window of " +
                                     std::to_string(data_lookback));
        cfg.lookback = data_lookback;
    }
    if (cfg.tasks.empty()) cfg.tasks = ds.tasks;
    for (const auto& task : cfg.tasks)
        if (ds.train.targets.count(task) == 0)
            throw gesme::ConfigError("task '" + task + "' has no targets in the dataset");
    return gesme::apply_variant(r.variant, cfg);
}

fs::path resolve_out(const std::string& out) {
    fs::path p(out);
    if (p.is_absolute()) return p;
    if (const char* root = std::getenv("GESME_OUTPUT_ROOT")) return fs::path(root) / p;
    return p;
}

void write_run_report(const fs::path& dir, const json& report) {
    const auto path = dir / "run.json";
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw gesme::IoError("cannot write '" + path.string() + "'");
    out << report.dump(2) << "\n";
    if (!out) throw gesme::IoError("failed writing '" + path.string() + "'");
}

json metrics_json(const std::map<std::string, gesme::TaskMetrics>& rows) {
    json j;
    for (const auto& [task, m] : rows)
        j[task] = {{"mae", m.mae}, {"rmse", m.rmse}, {"smape", m.smape}, {"time_s", m.time_s}};
    return j;
}

const gesme::SampleBatch<Real>& pick_split(const gesme::Dataset<Real>& ds,
                                           const std::string& split) {
    if (split == "train") return ds.train;
    if (split == "val") return ds.val;
    if (split == "test") return ds.test;
    throw gesme::ConfigError("unknown split '" + split + "' (want train, val, or test)");
}

void require_samples(const gesme::SampleBatch<Real>& batch, const std::string& split) {
    if (!batch.X_st.defined() || batch.size() < 1)
        throw gesme::ConfigError("dataset has no " + split + " samples");
}

// ---------------------------------------------------------------------------
// Shared command-line surface
// ---------------------------------------------------------------------------

struct Args {
    std::string preset;
    std::string config_file;
    std::vector<std::string> sets;  // KEY=VALUE pairs
    std::string variant;
    std::vector<std::string> tasks;
    std::string ablation;
    std::string seed;
    std::string epochs;
    std::string lr;
    std::string batch;
    std::string lookback;
    std::string data_dir;
    std::string out_dir = "run";
    std::string checkpoint;
    std::string split = "test";

    // preprocess inputs
    std::string orders_csv;
    std::string traj_csv;
    std::string weather_csv;
    std::string poi_csv;
    std::int64_t zones = 0;
    std::vector<double> grid;  // lat0 lon0 lat1 lon1 rows cols

    // sweep grids
    std::string grid_layers;
    std::string grid_filters;
    std::string grid_filter_len;
    std::string grid_gru_hidden;
};

Settings gather_settings(const Args& a) {
    Settings s;
    if (!a.preset.empty()) apply_preset(a.preset, s);
    if (!a.config_file.empty()) load_config_file(a.config_file, s);
    for (const auto& pair : a.sets) {
        const auto eq = pair.find('=');
        if (eq == std::string::npos)
            throw gesme::ConfigError("--set needs KEY=VALUE, got '" + pair + "'");
        s.put(trim(pair.substr(0, eq)), trim(pair.substr(eq + 1)));
    }
    if (!a.variant.empty()) s.put("variant", a.variant);
    if (!a.tasks.empty()) s.put("tasks", join(a.tasks));
    if (!a.ablation.empty()) s.put("ablation", a.ablation);
    if (!a.seed.empty()) s.put("seed", a.seed);
    if (!a.epochs.empty()) s.put("max_epochs", a.epochs);
    if (!a.lr.empty()) s.put("lr", a.lr);
    if (!a.batch.empty()) s.put("batch_size", a.batch);
    if (!a.lookback.empty()) s.put("lookback", a.lookback);
    return s;
}

void add_config_options(CLI::App* cmd, Args& a) {
    cmd->add_option("--preset", a.preset,
                    "named preset: table1, scenario1, scenario2, scenario-synth");
    cmd->add_option("--config", a.config_file, "flat key = value config file");
    cmd->add_option("--set", a.sets, "override a config key, KEY=VALUE (repeatable)");
    cmd->add_option("--seed", a.seed, "seed for init, shuffling, and synthesis");
}

void add_model_options(CLI::App* cmd, Args& a) {
    cmd->add_option("--variant", a.variant, "model variant: gesme, sesme, sbsm, sm");
    cmd->add_option("--task", a.tasks, "task to train (repeatable; default: all in the data)");
    cmd->add_option("--ablation", a.ablation, "comma list of blocks to remove");
    cmd->add_option("--epochs", a.epochs, "epoch limit");
    cmd->add_option("--lr", a.lr, "learning rate");
    cmd->add_option("--batch", a.batch, "minibatch size");
    cmd->add_option("--lookback", a.lookback, "history window length");
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int cmd_synth(const Args& a) {
    const auto settings = gather_settings(a);
    const auto r = resolve(settings);
    auto ds = synthesize_dataset(r);
    const auto out = resolve_out(a.out_dir);
    gesme::save_dataset(ds, out);
    std::cout << "wrote dataset to " << out.string() << ": " << ds.n_zones() << " zones, "
              << ds.axis.n_slots << " slots, tasks [" << join(ds.tasks) << "]\n";
    return 0;
}

int cmd_preprocess(const Args& a) {
    const auto settings = gather_settings(a);
    const auto r = resolve(settings);
    if (a.orders_csv.empty() && a.traj_csv.empty())
        throw gesme::ConfigError("preprocess needs --orders and/or --trajectories");

    const auto axis =
        gesme::partition_time(r.synth.start_ts, r.synth.days, r.synth.interval_minutes);

    gesme::GridSpec grid;
    bool have_grid = !a.grid.empty();
    if (have_grid) {
        grid.lat0 = a.grid[0];
        grid.lon0 = a.grid[1];
        grid.lat1 = a.grid[2];
        grid.lon1 = a.grid[3];
        grid.rows = static_cast<std::int64_t>(a.grid[4]);
        grid.cols = static_cast<std::int64_t>(a.grid[5]);
    }

    std::int64_t n_zones = a.zones;
    if (have_grid) {
        if (n_zones > 0 && n_zones != grid.n_zones())
            throw gesme::ConfigError("--zones disagrees with the grid's " +
                                     std::to_string(grid.n_zones()) + " cells");
        n_zones = grid.n_zones();
    }
    if (n_zones < 1) throw gesme::ConfigError("preprocess needs --zones or --grid");

    std::vector<gesme::ZoneSlotField> fields;
    gesme::IngestCounters counters;

    if (!a.orders_csv.empty()) {
        const auto orders = gesme::read_orders_csv(a.orders_csv);
        auto agg = gesme::aggregate_orders(orders, axis, n_zones);
        counters.orders_total = agg.counters.orders_total;
        counters.orders_outside_axis = agg.counters.orders_outside_axis;
        counters.orders_unanswered = agg.counters.orders_unanswered;
        fields.push_back(std::move(agg.demand));
        fields.push_back(std::move(agg.answered));
        fields.push_back(std::move(agg.gap));
    }
    if (!a.traj_csv.empty()) {
        if (!have_grid)
            throw gesme::ConfigError("--trajectories needs --grid LAT0 LON0 LAT1 LON1 ROWS COLS");
        const auto points = gesme::read_trajectory_csv(a.traj_csv);
        auto agg = gesme::aggregate_trajectories(points, axis, grid);
        counters.trips_total = agg.counters.trips_total;
        counters.traj_points_total = agg.counters.traj_points_total;
        counters.traj_points_out_of_grid = agg.counters.traj_points_out_of_grid;
        counters.traj_points_outside_axis = agg.counters.traj_points_outside_axis;
        counters.cells_without_speed = agg.counters.cells_without_speed;
        fields.push_back(std::move(agg.supply));
        fields.push_back(std::move(agg.speed));
        fields.push_back(std::move(agg.starts));
    }

    const auto splits = gesme::default_splits(axis.n_slots);

    gesme::WeatherEncoding weather;
    if (!a.weather_csv.empty()) {
        weather = gesme::encode_weather(gesme::read_weather_csv(a.weather_csv), axis,
                                        splits.train_end);
        counters.weather_slots_filled = weather.slots_filled;
        counters.weather_unseen_categories = weather.unseen_categories;
    }

    std::vector<double> poi(static_cast<std::size_t>(n_zones), 0.0);
    if (!a.poi_csv.empty()) poi = gesme::read_poi_csv(a.poi_csv, n_zones);

    std::vector<std::string> tasks = r.model.tasks;
    if (tasks.empty())
        tasks = a.orders_csv.empty() ? std::vector<std::string>{"starts"}
                                     : std::vector<std::string>{"original_demand", "gap"};

    auto ds = gesme::make_samples<Real>(fields, poi, weather, axis, tasks, r.model.lookback,
                                        splits);
    ds.counters = counters;

    const auto out = resolve_out(a.out_dir);
    gesme::save_dataset(ds, out);

    std::cout << "orders: total=" << counters.orders_total
              << " outside_axis=" << counters.orders_outside_axis
              << " unanswered=" << counters.orders_unanswered << "\n";
    std::cout << "trajectories: trips=" << counters.trips_total
              << " points=" << counters.traj_points_total
              << " out_of_grid=" << counters.traj_points_out_of_grid
              << " outside_axis=" << counters.traj_points_outside_axis
              << " cells_without_speed=" << counters.cells_without_speed << "\n";
    std::cout << "weather: slots_filled=" << counters.weather_slots_filled
              << " unseen_categories=" << counters.weather_unseen_categories << "\n";
    std::cout << "wrote dataset to " << out.string() << ": " << ds.n_zones() << " zones, "
              << axis.n_slots << " slots, tasks [" << join(ds.tasks) << "]\n";
    return 0;
}

int cmd_train(const Args& a) {
    const auto settings = gather_settings(a);
    const auto r = resolve(settings);
    auto src = obtain_dataset(a.data_dir, r);
    const auto cfg = finalize_model(r, settings, src.ds, !a.data_dir.empty());
    auto model = gesme::build<Real>(cfg, src.ds.roster);

    const auto out = resolve_out(a.out_dir);
    fs::create_directories(out);
    const auto ckpt = (out / "checkpoint").string();

    gesme::FitResult<Real> fit_result;
    try {
        fit_result = gesme::fit(model, src.ds.train, src.ds.val, r.train);
    } catch (const gesme::NumericError& e) {
        // fit already restored the best snapshot; keep it reachable.
        gesme::save_checkpoint(model, ckpt);
        std::cerr << "gesme: " << e.what() << "\n";
        std::cerr << "gesme: best checkpoint retained at " << ckpt << "\n";
        return 3;
    }
    gesme::save_checkpoint(model, ckpt);
    gesme::write_loss_curve((out / "loss_curve.csv").string(), fit_result, cfg.tasks);

    require_samples(src.ds.test, "test");
    const auto timed = gesme::evaluate(model, src.ds.test, src.ds.norm);
    auto rows = timed;
    // The metrics artifact stays byte-stable across runs; wall time goes to
    // the run report instead.
    for (auto& [task, m] : rows) m.time_s = 0.0;
    gesme::write_metrics_csv((out / "metrics.csv").string(), rows);

    json outputs;
    outputs["checkpoint"] = ckpt;
    outputs["loss_curve"] = (out / "loss_curve.csv").string();
    outputs["metrics"] = (out / "metrics.csv").string();
    if (model.has_weighting) {
        const auto report = gesme::importance_report(model, src.ds.test);
        gesme::write_temporal_csv((out / "temporal.csv").string(), report);
        gesme::write_spatial_csv((out / "spatial.csv").string(), report);
        outputs["temporal"] = (out / "temporal.csv").string();
        outputs["spatial"] = (out / "spatial.csv").string();
    }

    json report;
    report["command"] = "train";
    report["version"] = kVersion;
    report["config"] = config_echo(r, cfg);
    report["dataset"] = src.info;
    report["fit"] = {{"epochs_run", fit_result.epochs_run},
                     {"best_epoch", fit_result.best_epoch},
                     {"best_val", fit_result.best_val},
                     {"wall_seconds", fit_result.wall_seconds}};
    report["metrics"] = metrics_json(timed);
    report["outputs"] = outputs;
    write_run_report(out, report);

    std::cout << "trained " << gesme::variant_name(r.variant) << " for " << fit_result.epochs_run
              << " epochs (best " << fit_result.best_epoch << ", val "
              << fit_result.best_val << "); outputs in " << out.string() << "\n";
    return 0;
}

int cmd_evaluate(const Args& a) {
    auto model = gesme::load_checkpoint<Real>(a.checkpoint);
    const auto ds = gesme::load_dataset<Real>(a.data_dir);
    if (model.roster.st_fields != ds.roster.st_fields ||
        model.roster.weather_fields != ds.roster.weather_fields)
        throw gesme::ConfigError("checkpoint feature roster does not match the dataset");

    const auto& batch = pick_split(ds, a.split);
    require_samples(batch, a.split);
    const auto rows = gesme::evaluate(model, batch, ds.norm);

    const auto out = resolve_out(a.out_dir);
    fs::create_directories(out);
    gesme::write_metrics_csv((out / "metrics.csv").string(), rows);

    json report;
    report["command"] = "evaluate";
    report["version"] = kVersion;
    report["checkpoint"] = a.checkpoint;
    report["dataset"] = a.data_dir;
    report["split"] = a.split;
    report["config"] = gesme::config_to_json(model.config);
    report["metrics"] = metrics_json(rows);
    report["outputs"] = {{"metrics", (out / "metrics.csv").string()}};
    write_run_report(out, report);

    for (const auto& [task, m] : rows)
        std::cout << task << ": mae=" << m.mae << " rmse=" << m.rmse << " smape=" << m.smape
                  << "\n";
    return 0;
}

int cmd_explain(const Args& a) {
    auto model = gesme::load_checkpoint<Real>(a.checkpoint);
    const auto ds = gesme::load_dataset<Real>(a.data_dir);
    const auto& batch = pick_split(ds, a.split);
    require_samples(batch, a.split);
    const auto report = gesme::importance_report(model, batch);

    const auto out = resolve_out(a.out_dir);
    fs::create_directories(out);
    gesme::write_temporal_csv((out / "temporal.csv").string(), report);
    gesme::write_spatial_csv((out / "spatial.csv").string(), report);

    json run;
    run["command"] = "explain";
    run["version"] = kVersion;
    run["checkpoint"] = a.checkpoint;
    run["dataset"] = a.data_dir;
    run["split"] = a.split;
    run["config"] = gesme::config_to_json(model.config);
    run["outputs"] = {{"temporal", (out / "temporal.csv").string()},
                      {"spatial", (out / "spatial.csv").string()}};
    write_run_report(out, run);

    std::cout << "wrote importance tables for " << report.temporal_fields.size()
              << " temporal and " << report.spatial_fields.size() << " spatial columns to "
              << out.string() << "\n";
    return 0;
}

int cmd_ablate(const Args& a) {
    const auto settings = gather_settings(a);
    const auto r = resolve(settings);
    auto src = obtain_dataset(a.data_dir, r);
    const auto base = finalize_model(r, settings, src.ds, !a.data_dir.empty());
    require_samples(src.ds.test, "test");

    const auto out = resolve_out(a.out_dir);
    fs::create_directories(out);

    const std::vector<std::string> removals = {"",        "weighting",       "convrnn_me",
                                               "conv_me", "zonedist_gru_me", "gru_me"};
    struct Row {
        std::string removed;
        std::map<std::string, gesme::TaskMetrics> metrics;
        double time_s = 0;
        std::int64_t tower_width = 0;
    };
    std::vector<Row> rows;

    for (const auto& block : removals) {
        auto cfg = base;
        if (!block.empty()) cfg.ablation_mask.insert(block);
        const auto label = block.empty() ? std::string("none") : block;
        const auto subdir = out / (block.empty() ? std::string("full") : "no_" + block);
        fs::create_directories(subdir);
        const auto ckpt = (subdir / "checkpoint").string();

        auto model = gesme::build<Real>(cfg, src.ds.roster);
        gesme::FitResult<Real> fit_result;
        try {
            fit_result = gesme::fit(model, src.ds.train, src.ds.val, r.train);
        } catch (const gesme::NumericError& e) {
            gesme::save_checkpoint(model, ckpt);
            std::cerr << "gesme: " << e.what() << " (removed: " << label << ")\n";
            std::cerr << "gesme: best checkpoint retained at " << ckpt << "\n";
            return 3;
        }
        gesme::save_checkpoint(model, ckpt);

        Row row;
        row.removed = label;
        row.metrics = gesme::evaluate(model, src.ds.test, src.ds.norm);
        for (auto& [task, m] : row.metrics) m.time_s = 0.0;
        row.time_s = fit_result.wall_seconds;
        row.tower_width = model.tower_width;
        gesme::write_metrics_csv((subdir / "metrics.csv").string(), row.metrics);
        if (model.has_weighting) {
            const auto imp = gesme::importance_report(model, src.ds.test);
            gesme::write_temporal_csv((subdir / "temporal.csv").string(), imp);
            gesme::write_spatial_csv((subdir / "spatial.csv").string(), imp);
        }
        rows.push_back(std::move(row));
    }

    const auto table_path = out / "ablation.csv";
    std::ofstream table(table_path, std::ios::trunc);
    if (!table) throw gesme::IoError("cannot write '" + table_path.string() + "'");
    table << "removed";
    for (const auto& task : base.tasks)
        table << "," << task << "_mae," << task << "_rmse," << task << "_smape";
    table << ",time_s,tower_width\n";
    table.precision(10);
    for (const auto& row : rows) {
        table << row.removed;
        for (const auto& task : base.tasks) {
            const auto& m = row.metrics.at(task);
            table << "," << m.mae << "," << m.rmse << "," << m.smape;
        }
        table << "," << row.time_s << "," << row.tower_width << "\n";
    }
    if (!table) throw gesme::IoError("failed writing '" + table_path.string() + "'");

    json report;
    report["command"] = "ablate";
    report["version"] = kVersion;
    report["config"] = config_echo(r, base);
    report["dataset"] = src.info;
    json jrows = json::array();
    for (const auto& row : rows)
        jrows.push_back({{"removed", row.removed},
                         {"metrics", metrics_json(row.metrics)},
                         {"time_s", row.time_s},
                         {"tower_width", row.tower_width}});
    report["rows"] = jrows;
    report["outputs"] = {{"table", table_path.string()}};
    write_run_report(out, report);

    for (const auto& row : rows)
        std::cout << "removed=" << row.removed << " tower_width=" << row.tower_width
                  << " time_s=" << row.time_s << "\n";
    std::cout << "wrote ablation table to " << table_path.string() << "\n";
    return 0;
}

int cmd_sweep(const Args& a) {
    const auto settings = gather_settings(a);
    const auto r = resolve(settings);

    const auto layers = a.grid_layers.empty() ? std::vector<std::int64_t>{}
                                              : parse_int_list("--grid-layers", a.grid_layers);
    const auto filters = a.grid_filters.empty() ? std::vector<std::int64_t>{}
                                                : parse_int_list("--grid-filters", a.grid_filters);
    const auto lens = a.grid_filter_len.empty()
                          ? std::vector<std::int64_t>{}
                          : parse_int_list("--grid-filter-len", a.grid_filter_len);
    const auto hiddens = a.grid_gru_hidden.empty()
                             ? std::vector<std::int64_t>{}
                             : parse_int_list("--grid-gru-hidden", a.grid_gru_hidden);
    if (layers.empty() && filters.empty() && lens.empty() && hiddens.empty())
        throw gesme::ConfigError("sweep grid is empty; pass at least one --grid-* axis");

    auto src = obtain_dataset(a.data_dir, r);
    const auto base = finalize_model(r, settings, src.ds, !a.data_dir.empty());

    const auto out = resolve_out(a.out_dir);
    fs::create_directories(out);
    const auto csv_path = out / "sweep.csv";
    std::ofstream csv(csv_path, std::ios::trunc);
    if (!csv) throw gesme::IoError("cannot write '" + csv_path.string() + "'");
    csv << "point,layers,filters,filter_len,gru_hidden,final_loss,epochs\n";
    csv.precision(10);

    // An axis left off the grid keeps the base configuration's value.
    auto axis_or = [](const std::vector<std::int64_t>& axis, std::int64_t base_value) {
        return axis.empty() ? std::vector<std::int64_t>{base_value} : axis;
    };
    const auto base_filters =
        gesme::detail::filters_at(base.conv_filters, base.layers_per_block - 1);

    json jpoints = json::array();
    std::int64_t point = 0;
    for (const auto L : axis_or(layers, base.layers_per_block))
        for (const auto F : axis_or(filters, base_filters))
            for (const auto K : axis_or(lens, base.conv_filter_len))
                for (const auto H : axis_or(hiddens, base.gru_hidden)) {
                    auto cfg = base;
                    cfg.layers_per_block = L;
                    if (!filters.empty()) {
                        cfg.conv_filters = {F};
                        cfg.convrnn_filters = {F};
                    }
                    if (!lens.empty()) {
                        cfg.conv_filter_len = K;
                        cfg.convrnn_filter_len = K;
                    }
                    cfg.gru_hidden = H;

                    auto model = gesme::build<Real>(cfg, src.ds.roster);
                    const auto fit_result = gesme::fit(model, src.ds.train, src.ds.val, r.train);
                    double best = std::numeric_limits<double>::infinity();
                    for (const auto& row : fit_result.history)
                        best = std::min(best, static_cast<double>(row.train_loss));

                    csv << point << "," << L << "," << F << "," << K << "," << H << "," << best
                        << "," << fit_result.epochs_run << "\n";
                    jpoints.push_back({{"point", point},
                                       {"layers", L},
                                       {"filters", F},
                                       {"filter_len", K},
                                       {"gru_hidden", H},
                                       {"final_loss", best},
                                       {"epochs", fit_result.epochs_run}});
                    std::cout << "point " << point << ": layers=" << L << " filters=" << F
                              << " filter_len=" << K << " gru_hidden=" << H << " loss=" << best
                              << " epochs=" << fit_result.epochs_run << "\n";
                    point += 1;
                }
    if (!csv) throw gesme::IoError("failed writing '" + csv_path.string() + "'");

    json report;
    report["command"] = "sweep";
    report["version"] = kVersion;
    report["config"] = config_echo(r, base);
    report["dataset"] = src.info;
    report["points"] = jpoints;
    report["outputs"] = {{"table", csv_path.string()}};
    write_run_report(out, report);

    std::cout << "wrote " << point << " sweep points to " << csv_path.string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"spatio-temporal forecasting with a gated ensemble of mixtures of experts"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    int rc = 0;

    Args synth_args;
    auto* synth = app.add_subcommand("synth", "generate a synthetic benchmark dataset");
    add_config_options(synth, synth_args);
    synth->add_option("--lookback", synth_args.lookback, "history window length");
    synth->add_option("--out", synth_args.out_dir, "dataset directory")->required();
    synth->callback([&] { rc = cmd_synth(synth_args); });

    Args pre_args;
    auto* pre = app.add_subcommand("preprocess", "ingest CSVs into a dataset directory");
    add_config_options(pre, pre_args);
    pre->add_option("--orders", pre_args.orders_csv, "orders CSV: order_id,driver_id,ts,zone_id");
    pre->add_option("--trajectories", pre_args.traj_csv,
                    "trajectory CSV: trip_id,ts,lat,lon");
    pre->add_option("--weather", pre_args.weather_csv, "weather CSV: ts,category,7 readings");
    pre->add_option("--poi", pre_args.poi_csv, "POI CSV: zone_id,count");
    pre->add_option("--zones", pre_args.zones, "zone count for order ingest");
    pre->add_option("--grid", pre_args.grid, "trajectory grid: LAT0 LON0 LAT1 LON1 ROWS COLS")
        ->expected(6);
    pre->add_option("--lookback", pre_args.lookback, "history window length");
    pre->add_option("--task", pre_args.tasks, "target field (repeatable)");
    pre->add_option("--out", pre_args.out_dir, "dataset directory")->required();
    pre->callback([&] { rc = cmd_preprocess(pre_args); });

    Args train_args;
    auto* train = app.add_subcommand("train", "train a variant and write its artifacts");
    add_config_options(train, train_args);
    add_model_options(train, train_args);
    train->add_option("--data", train_args.data_dir,
                      "dataset directory (default: synthesize from the scenario keys)");
    train->add_option("--out", train_args.out_dir, "output directory");
    train->callback([&] { rc = cmd_train(train_args); });

    Args eval_args;
    auto* eval = app.add_subcommand("evaluate", "score a checkpoint on a dataset split");
    eval->add_option("--checkpoint", eval_args.checkpoint, "checkpoint prefix")->required();
    eval->add_option("--data", eval_args.data_dir, "dataset directory")->required();
    eval->add_option("--split", eval_args.split, "train, val, or test (default test)");
    eval->add_option("--out", eval_args.out_dir, "output directory");
    eval->callback([&] { rc = cmd_evaluate(eval_args); });

    Args ablate_args;
    auto* ablate = app.add_subcommand("ablate", "train the full model and the five removals");
    add_config_options(ablate, ablate_args);
    add_model_options(ablate, ablate_args);
    ablate->add_option("--data", ablate_args.data_dir,
                       "dataset directory (default: synthesize from the scenario keys)");
    ablate->add_option("--out", ablate_args.out_dir, "output directory");
    ablate->callback([&] { rc = cmd_ablate(ablate_args); });

    Args sweep_args;
    auto* sweep = app.add_subcommand("sweep", "grid-search hyperparameters, one fit per point");
    add_config_options(sweep, sweep_args);
    add_model_options(sweep, sweep_args);
    sweep->add_option("--data", sweep_args.data_dir,
                      "dataset directory (default: synthesize from the scenario keys)");
    sweep->add_option("--out", sweep_args.out_dir, "output directory");
    sweep->add_option("--grid-layers", sweep_args.grid_layers, "comma list of layer counts");
    sweep->add_option("--grid-filters", sweep_args.grid_filters, "comma list of filter counts");
    sweep->add_option("--grid-filter-len", sweep_args.grid_filter_len,
                      "comma list of filter lengths");
    sweep->add_option("--grid-gru-hidden", sweep_args.grid_gru_hidden,
                      "comma list of GRU hidden sizes");
    sweep->callback([&] { rc = cmd_sweep(sweep_args); });

    Args explain_args;
    auto* explain = app.add_subcommand("explain", "write feature-importance tables");
    explain->add_option("--checkpoint", explain_args.checkpoint, "checkpoint prefix")->required();
    explain->add_option("--data", explain_args.data_dir, "dataset directory")->required();
    explain->add_option("--split", explain_args.split, "train, val, or test (default test)");
    explain->add_option("--out", explain_args.out_dir, "output directory");
    explain->callback([&] { rc = cmd_explain(explain_args); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const gesme::NumericError& e) {
        std::cerr << "gesme: " << e.what() << "\n";
        return 3;
    } catch (const gesme::Error& e) {
        std::cerr << "gesme: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "gesme: " << e.what() << "\n";
        return 2;
    }
    return rc;
}
