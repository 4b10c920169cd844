#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "gesme/checkpoint.hpp"
#include "gesme/model.hpp"
#include "oracles.hpp"
#include "testutil.hpp"

using namespace gesme;
using testutil::bitwise_equal;
using testutil::micro_config;
using testutil::micro_roster;
using testutil::random_batch;
using testutil::randomize_params;
using testutil::sample_slice;
using testutil::temp_prefix;

namespace {

const std::vector<std::string> kTasks{"demand", "gap"};

}  // namespace

TEST_CASE("default config builds with the documented tower width") {
    ModelConfig cfg;
    cfg.tasks = kTasks;
    cfg.n_zones = 10;
    cfg.lookback = 6;
    FeatureRoster roster{{"orders", "gap", "speed"}, {"t0", "t1", "t2", "t3", "t4"}};

    auto model = build<double>(cfg, roster);
    // ConvRNN 100 + Conv 50 + zone GRU 4 + weather GRU 4 + one-hot 3 + weekend 1.
    CHECK(model.tower_width == 162);
    CHECK(tower_input_width(cfg) == 162);
    CHECK(model.parameter_count() > 0);
    CHECK(audit_partition(model) == model.parameter_count());
    CHECK(model.towers.size() == 2);
    CHECK(model.convrnn_me.size() == 2);
    CHECK(model.conv_me.size() == 2);
    CHECK(model.zonedist_gru_me.size() == 2);
    CHECK(model.gru_me.size() == 2);
}

TEST_CASE("config validation") {
    auto roster = micro_roster();

    SECTION("no tasks") {
        auto cfg = micro_config();
        cfg.tasks.clear();
        CHECK_THROWS_AS(build<double>(cfg, roster), ConfigError);
    }
    SECTION("duplicate tasks") {
        auto cfg = micro_config();
        cfg.tasks = {"demand", "demand"};
        CHECK_THROWS_AS(build<double>(cfg, roster), ConfigError);
    }
    SECTION("unknown ablation block") {
        auto cfg = micro_config();
        cfg.ablation_mask = {"towers"};
        CHECK_THROWS_AS(build<double>(cfg, roster), ConfigError);
    }
    SECTION("mask may not remove every representation block") {
        auto cfg = micro_config();
        cfg.ablation_mask = {"convrnn_me", "conv_me", "zonedist_gru_me", "gru_me"};
        CHECK_THROWS_AS(build<double>(cfg, roster), ConfigError);
    }
    SECTION("gate sharing none needs a single expert") {
        auto cfg = micro_config();
        cfg.gate_sharing = GateSharingMode::None;
        CHECK_THROWS_AS(build<double>(cfg, roster), ConfigError);
        cfg.experts_per_layer = 1;
        CHECK_NOTHROW(build<double>(cfg, roster));
    }
    SECTION("bad scalar fields") {
        auto cfg = micro_config();
        cfg.n_zones = 0;
        CHECK_THROWS_AS(build<double>(cfg, roster), ConfigError);
        cfg = micro_config();
        cfg.gamma = 0.0;
        CHECK_THROWS_AS(build<double>(cfg, roster), ConfigError);
        cfg = micro_config();
        cfg.alpha = -0.1;
        CHECK_THROWS_AS(build<double>(cfg, roster), ConfigError);
    }
}

TEST_CASE("ablation removes exactly the named block's width") {
    auto cfg = micro_config();
    auto roster = micro_roster();
    const auto full = tower_input_width(cfg);
    CHECK(full == 3 + 4 + 2 + 2 + 4);  // convrnn K2 + conv K2 + 2 GRU hiddens + contexts

    struct Case {
        const char* block;
        std::int64_t width;
    };
    for (const auto& c : {Case{"convrnn_me", 3}, Case{"conv_me", 4}, Case{"zonedist_gru_me", 2},
                          Case{"gru_me", 2}}) {
        auto masked = cfg;
        masked.ablation_mask = {c.block};
        CHECK(tower_input_width(masked) == full - c.width);
        auto model = build<double>(masked, roster);
        CHECK(model.tower_width == full - c.width);
        auto batch = random_batch<double>(masked, roster, 2, 3);
        CHECK(forward_features(model, batch, "demand").dim(2) == full - c.width);
    }

    SECTION("weighting ablation keeps the width but drops the W_FI partition") {
        auto masked = cfg;
        masked.ablation_mask = {"weighting"};
        CHECK(tower_input_width(masked) == full);
        auto model = build<double>(masked, roster);
        CHECK_FALSE(model.has_weighting);
        CHECK(model.weighting_params().empty());
        CHECK_FALSE(model.network_params().empty());
    }
}

TEST_CASE("build is deterministic per seed") {
    auto cfg = micro_config();
    auto roster = micro_roster();

    auto a = build<double>(cfg, roster);
    auto b = build<double>(cfg, roster);
    auto pa = a.params();
    auto pb = b.params();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].first == pb[i].first);
        CHECK(bitwise_equal(pa[i].second, pb[i].second));
    }

    cfg.seed = 12;
    auto c = build<double>(cfg, roster);
    auto pc = c.params();
    bool any_diff = false;
    for (std::size_t i = 0; i < pa.size(); ++i)
        if (!bitwise_equal(pa[i].second, pc[i].second)) any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("all-zero inputs with fresh biases predict exactly zero") {
    auto cfg = micro_config();
    auto roster = micro_roster();
    auto model = build<double>(cfg, roster);

    SampleBatch<double> batch;
    const std::int64_t S = 2;
    batch.X_st = Tensor<double>({S, cfg.n_zones, roster.st_width(), cfg.lookback});
    batch.X_w = Tensor<double>({S, cfg.lookback, roster.weather_width()});
    batch.CD = Tensor<double>({S, cfg.n_zones, 3});
    batch.CW = Tensor<double>({S, cfg.n_zones});
    batch.CP = Tensor<double>({S, cfg.n_zones});

    for (const auto& task : kTasks) {
        auto out = forward(model, batch, task);
        REQUIRE(out.shape() == Shape{S, cfg.n_zones});
        for (double v : out.values()) CHECK(v == 0.0);
    }
}

TEST_CASE("forward matches the straight-line oracle") {
    auto cfg = micro_config();
    auto roster = micro_roster();
    auto model = build<double>(cfg, roster);
    randomize_params(model, 21);

    const std::int64_t S = 3;
    auto batch = random_batch<double>(cfg, roster, S, 5);

    for (const auto& task : kTasks) {
        auto out = forward(model, batch, task);
        REQUIRE(out.shape() == Shape{S, cfg.n_zones});
        for (std::int64_t s = 0; s < S; ++s) {
            auto want = oracle::full_forward_oracle<double>(
                model, task, sample_slice(batch.X_st, s), sample_slice(batch.X_w, s),
                sample_slice(batch.CD, s), sample_slice(batch.CW, s),
                sample_slice(batch.CP, s));
            REQUIRE(want.size() == static_cast<std::size_t>(cfg.n_zones));
            for (std::int64_t z = 0; z < cfg.n_zones; ++z) {
                INFO("task " << task << " sample " << s << " zone " << z);
                CHECK(out.values()[static_cast<std::size_t>(s * cfg.n_zones + z)] ==
                      Catch::Approx(want[static_cast<std::size_t>(z)]).margin(1e-9));
            }
        }
    }
}

TEST_CASE("forward matches the oracle with blocks ablated") {
    auto roster = micro_roster();
    for (const char* block : {"weighting", "convrnn_me", "conv_me", "zonedist_gru_me", "gru_me"}) {
        auto cfg = micro_config();
        cfg.ablation_mask = {block};
        auto model = build<double>(cfg, roster);
        randomize_params(model, 31);
        auto batch = random_batch<double>(cfg, roster, 2, 9);
        auto out = forward(model, batch, "gap");
        for (std::int64_t s = 0; s < 2; ++s) {
            auto want = oracle::full_forward_oracle<double>(
                model, "gap", sample_slice(batch.X_st, s), sample_slice(batch.X_w, s),
                sample_slice(batch.CD, s), sample_slice(batch.CW, s),
                sample_slice(batch.CP, s));
            for (std::int64_t z = 0; z < cfg.n_zones; ++z) {
                INFO("block " << block << " sample " << s << " zone " << z);
                CHECK(out.values()[static_cast<std::size_t>(s * cfg.n_zones + z)] ==
                      Catch::Approx(want[static_cast<std::size_t>(z)]).margin(1e-9));
            }
        }
    }
}

TEST_CASE("forward is pure and repeatable") {
    auto cfg = micro_config();
    auto roster = micro_roster();
    auto model = build<double>(cfg, roster);
    randomize_params(model, 2);
    auto batch = random_batch<double>(cfg, roster, 2, 2);

    auto before = model.params();
    std::vector<Tensor<double>> snapshot;
    for (const auto& [name, t] : before) snapshot.push_back(t.clone_values());

    auto a = forward(model, batch, "demand");
    auto b = forward(model, batch, "demand");
    CHECK(bitwise_equal(a, b));

    auto after = model.params();
    for (std::size_t i = 0; i < after.size(); ++i)
        CHECK(bitwise_equal(after[i].second, snapshot[i]));
}

TEST_CASE("batch and task validation") {
    auto cfg = micro_config();
    auto roster = micro_roster();
    auto model = build<double>(cfg, roster);
    auto batch = random_batch<double>(cfg, roster, 2, 4);

    CHECK_THROWS_AS(forward(model, batch, "unknown"), UsageError);

    auto bad = batch;
    bad.X_st = Tensor<double>({2, cfg.n_zones + 1, roster.st_width(), cfg.lookback});
    CHECK_THROWS_AS(forward(model, bad, "demand"), DimensionError);

    bad = batch;
    bad.CD = Tensor<double>({2, cfg.n_zones, 4});
    CHECK_THROWS_AS(forward(model, bad, "demand"), DimensionError);
}

TEST_CASE("variant presets") {
    auto cfg = micro_config();

    SECTION("sm demands a single task") {
        CHECK_THROWS_AS(apply_variant(VariantKind::SM, cfg), ConfigError);
        auto single = cfg;
        single.tasks = {"demand"};
        auto out = apply_variant(VariantKind::SM, single);
        CHECK(out.experts_per_layer == 1);
        CHECK(out.gate_sharing == GateSharingMode::None);
    }
    SECTION("sbsm keeps the tasks but drops gates") {
        auto out = apply_variant(VariantKind::SBSM, cfg);
        CHECK(out.tasks == kTasks);
        CHECK(out.experts_per_layer == 1);
        CHECK(out.gate_sharing == GateSharingMode::None);
    }
    SECTION("sesme shares one gate, gesme gates per task") {
        CHECK(apply_variant(VariantKind::SESME, cfg).gate_sharing == GateSharingMode::Shared);
        CHECK(apply_variant(VariantKind::GESME, cfg).gate_sharing == GateSharingMode::Multi);
    }
    SECTION("names round-trip") {
        for (auto v : {VariantKind::SM, VariantKind::SBSM, VariantKind::SESME, VariantKind::GESME})
            CHECK(variant_from_name(variant_name(v)) == v);
        CHECK_THROWS_AS(variant_from_name("mmoe"), ConfigError);
    }
}

TEST_CASE("single-expert gated model equals the shared-bottom model feature for feature") {
    auto cfg = micro_config();
    cfg.experts_per_layer = 1;
    auto roster = micro_roster();

    auto gated = build_variant<double>(VariantKind::GESME, cfg, roster);
    auto shared = build_variant<double>(VariantKind::SBSM, cfg, roster);
    auto batch = random_batch<double>(cfg, roster, 3, 8);

    for (const auto& task : kTasks) {
        auto a = forward_features(gated, batch, task);
        auto b = forward_features(shared, batch, task);
        CHECK(bitwise_equal(a, b));
    }
    // The shared-bottom features must not depend on the task at all.
    CHECK(bitwise_equal(forward_features(shared, batch, "demand"),
                        forward_features(shared, batch, "gap")));
}

TEST_CASE("cloning gates across tasks reduces the multi-gate model to the shared-gate one") {
    auto cfg = micro_config();
    auto roster = micro_roster();

    auto sesme = build_variant<double>(VariantKind::SESME, cfg, roster);
    auto gesme = build_variant<double>(VariantKind::GESME, cfg, roster);

    auto clone_gates = [](std::vector<MixtureLayer<double>>& stack) {
        for (auto& layer : stack)
            for (std::size_t g = 1; g < layer.gates.size(); ++g) {
                auto src = layer.gates[0].params();
                auto dst = layer.gates[g].params();
                REQUIRE(src.size() == dst.size());
                for (std::size_t i = 0; i < src.size(); ++i) {
                    auto from = src[i].second.values();
                    auto to = dst[i].second.values();
                    std::copy(from.begin(), from.end(), to.begin());
                }
            }
    };
    clone_gates(gesme.convrnn_me);
    clone_gates(gesme.conv_me);
    clone_gates(gesme.zonedist_gru_me);
    clone_gates(gesme.gru_me);

    auto batch = random_batch<double>(cfg, roster, 3, 13);
    for (const auto& task : kTasks) {
        auto a = forward(gesme, batch, task);
        auto b = forward(sesme, batch, task);
        REQUIRE(a.shape() == b.shape());
        for (std::int64_t i = 0; i < a.size(); ++i)
            CHECK(a.values()[static_cast<std::size_t>(i)] ==
                  Catch::Approx(b.values()[static_cast<std::size_t>(i)]).margin(1e-6));
    }
}

TEST_CASE("checkpoints round-trip bitwise at binary32") {
    auto cfg = micro_config();
    auto roster = micro_roster();
    auto model = build<float>(cfg, roster);
    randomize_params(model, 17);

    auto prefix = temp_prefix("roundtrip");
    save_checkpoint(model, prefix);
    auto loaded = load_checkpoint<float>(prefix);

    auto pa = model.params();
    auto pb = loaded.params();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].first == pb[i].first);
        CHECK(bitwise_equal(pa[i].second, pb[i].second));
    }

    auto batch = random_batch<float>(cfg, roster, 2, 6);
    CHECK(bitwise_equal(forward(model, batch, "demand"), forward(loaded, batch, "demand")));

    SECTION("saving the loaded model reproduces the blob byte for byte") {
        auto second = temp_prefix("roundtrip2");
        save_checkpoint(loaded, second);
        std::ifstream a(prefix + ".params", std::ios::binary);
        std::ifstream b(second + ".params", std::ios::binary);
        std::string ba((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
        std::string bb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
        CHECK(ba == bb);
        CHECK_FALSE(ba.empty());
    }
}

TEST_CASE("checkpoint loading rejects damage and foreign configs") {
    auto cfg = micro_config();
    auto roster = micro_roster();
    auto model = build<float>(cfg, roster);

    SECTION("truncated blob") {
        auto prefix = temp_prefix("truncated");
        save_checkpoint(model, prefix);
        auto blob_path = prefix + ".params";
        auto size = std::filesystem::file_size(blob_path);
        std::filesystem::resize_file(blob_path, size - 4);
        CHECK_THROWS_AS(load_checkpoint<float>(prefix), IoError);
    }
    SECTION("missing files") {
        CHECK_THROWS_AS(load_checkpoint<float>(temp_prefix("nonexistent")), IoError);
    }
    SECTION("config echo mismatch") {
        auto prefix = temp_prefix("mismatch");
        save_checkpoint(model, prefix);
        auto other = cfg;
        other.gru_hidden = 3;
        CHECK_THROWS_AS(load_checkpoint<float>(prefix, other), ConfigError);
        CHECK_NOTHROW(load_checkpoint<float>(prefix, cfg));
    }
    SECTION("widening to double is exact") {
        auto prefix = temp_prefix("widen");
        save_checkpoint(model, prefix);
        auto wide = load_checkpoint<double>(prefix);
        auto pa = model.params();
        auto pb = wide.params();
        REQUIRE(pa.size() == pb.size());
        for (std::size_t i = 0; i < pa.size(); ++i) {
            auto fa = pa[i].second.values();
            auto fb = pb[i].second.values();
            for (std::size_t k = 0; k < fa.size(); ++k)
                CHECK(static_cast<double>(fa[k]) == fb[k]);
        }
    }
}

TEST_CASE("parameter partition is disjoint and exhaustive") {
    auto cfg = micro_config();
    auto roster = micro_roster();
    auto model = build<double>(cfg, roster);

    auto fi = model.weighting_params();
    auto net = model.network_params();
    CHECK_FALSE(fi.empty());
    CHECK_FALSE(net.empty());

    // Every parameter that influences the forward pass shows up in exactly
    // one partition: nudging any listed tensor must change some output.
    CHECK(audit_partition(model) == model.parameter_count());

    std::int64_t listed = 0;
    for (const auto& [name, t] : fi) listed += t.size();
    for (const auto& [name, t] : net) listed += t.size();
    CHECK(listed == model.parameter_count());
}
