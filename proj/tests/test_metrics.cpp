#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "gesme/metrics.hpp"
#include "testutil.hpp"

using namespace gesme;
using Catch::Approx;
using testutil::micro_config;
using testutil::micro_roster;
using testutil::random_batch;
using testutil::randomize_params;
using testutil::temp_prefix;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("error metrics match hand-computed values", "[metrics]") {
    const std::vector<double> pred{1.0, 2.0};
    const std::vector<double> actual{2.0, 4.0};
    CHECK(mae(pred, actual) == Approx(1.5));
    CHECK(rmse(std::vector<double>{3.0, 0.0}, std::vector<double>{0.0, 4.0}) ==
          Approx(std::sqrt(12.5)));
    CHECK(smape(std::vector<double>{3.0}, std::vector<double>{1.0}) == Approx(0.4));
    CHECK(smape(pred, pred) == 0.0);
    CHECK(mae(pred, pred) == 0.0);
    CHECK(rmse(pred, pred) == 0.0);

    SECTION("tensor overloads score the flattened values") {
        Tensor<double> a({2, 2});
        Tensor<double> b({2, 2});
        auto av = a.values();
        auto bv = b.values();
        for (std::size_t i = 0; i < 4; ++i) {
            av[i] = static_cast<double>(i);
            bv[i] = static_cast<double>(i) + 2.0;
        }
        CHECK(mae(a, b) == Approx(2.0));
        CHECK(rmse(a, b) == Approx(2.0));
    }

    SECTION("degenerate inputs are rejected") {
        const std::vector<double> empty;
        CHECK_THROWS_AS(mae(empty, empty), UsageError);
        CHECK_THROWS_AS(rmse(empty, empty), UsageError);
        CHECK_THROWS_AS(smape(empty, empty), UsageError);
        CHECK_THROWS_AS(mae(pred, std::vector<double>{1.0}), DimensionError);
    }
}

TEST_CASE("error metrics obey their defining inequalities", "[metrics]") {
    auto rng = make_rng(17, "test.metrics");
    const std::size_t n = 100;
    for (int round = 0; round < 100; ++round) {
        std::vector<double> p(n), a(n);
        for (std::size_t i = 0; i < n; ++i) {
            p[i] = uniform_draw(rng, -50.0, 50.0);
            a[i] = uniform_draw(rng, -50.0, 50.0);
        }
        const double m = mae(p, a);
        const double r = rmse(p, a);
        const double s = smape(p, a);
        CHECK(r >= m);               // Jensen
        CHECK(s >= 0.0);
        CHECK(s < 1.0);              // the +1 keeps the ratio under one
        CHECK(s == Approx(smape(a, p)));  // symmetric in its arguments
        CHECK(m == Approx(mae(a, p)));
    }
}

TEST_CASE("evaluate scores every task in original units", "[metrics]") {
    auto cfg = micro_config();
    const auto roster = micro_roster();
    auto model = build<double>(cfg, roster);
    randomize_params(model, 3);
    const auto batch = random_batch<double>(cfg, roster, 4, 5, 0.0, 1.0);

    Normalization norm;
    norm.st.emplace_back("demand", FieldStats{0.0, 25.0});
    norm.st.emplace_back("gap", FieldStats{1.0, 9.0});

    const auto scores = evaluate(model, batch, norm);
    REQUIRE(scores.size() == 2);

    for (const auto& task : cfg.tasks) {
        const auto& stats = norm.field(task);
        const auto pred = forward(model, batch, task);
        std::vector<double> p, a;
        for (double v : pred.values()) p.push_back(denormalize_value(v, stats));
        for (double v : batch.target(task).values()) a.push_back(denormalize_value(v, stats));
        const auto& got = scores.at(task);
        CHECK(got.mae == Approx(mae(p, a)));
        CHECK(got.rmse == Approx(rmse(p, a)));
        CHECK(got.smape == Approx(smape(p, a)));
        CHECK(got.time_s >= 0.0);
    }
    CHECK(scores.at("demand").time_s == Approx(scores.at("gap").time_s));

    SECTION("denormalization changes the scores when the scale is not unit") {
        Normalization unit;
        unit.st.emplace_back("demand", FieldStats{0.0, 1.0});
        unit.st.emplace_back("gap", FieldStats{0.0, 1.0});
        const auto raw = evaluate(model, batch, unit);
        CHECK(raw.at("demand").mae != Approx(scores.at("demand").mae));
        // MAE and RMSE scale linearly with the span.
        CHECK(scores.at("demand").mae == Approx(raw.at("demand").mae * 25.0));
        CHECK(scores.at("demand").rmse == Approx(raw.at("demand").rmse * 25.0));
    }

    SECTION("a task without normalization statistics is an error") {
        Normalization partial;
        partial.st.emplace_back("demand", FieldStats{0.0, 25.0});
        CHECK_THROWS_AS(evaluate(model, batch, partial), UsageError);
    }
}

TEST_CASE("importance summarizes the weighted inputs", "[metrics]") {
    auto cfg = micro_config();
    const auto roster = micro_roster();
    auto model = build<double>(cfg, roster);
    const auto batch = random_batch<double>(cfg, roster, 3, 9);
    const auto F = roster.st_width();

    SECTION("identity weights reproduce the averaged absolute inputs") {
        for (auto& w : model.w_st.W.values()) w = 1.0;
        for (auto& w : model.w_weather.W.values()) w = 1.0;
        const auto report = importance_report(model, batch);
        auto all_fields = roster.st_fields;
        all_fields.insert(all_fields.end(), roster.weather_fields.begin(),
                          roster.weather_fields.end());
        REQUIRE(report.temporal_fields == all_fields);
        REQUIRE(report.spatial_fields == roster.st_fields);
        REQUIRE(report.n_zones == cfg.n_zones);
        REQUIRE(report.lookback == cfg.lookback);

        auto x = batch.X_st.values();
        const auto S = batch.size();
        for (std::int64_t l = 0; l < cfg.lookback; ++l)
            for (std::int64_t f = 0; f < F; ++f) {
                double want = 0;
                for (std::int64_t s = 0; s < S; ++s)
                    for (std::int64_t z = 0; z < cfg.n_zones; ++z)
                        want += std::abs(
                            x[static_cast<std::size_t>(((s * cfg.n_zones + z) * F + f) * cfg.lookback + l)]);
                want /= static_cast<double>(S * cfg.n_zones);
                CHECK(report.temporal_at(l, f) == Approx(want));
            }
        auto xw = batch.X_w.values();
        const auto Fw = roster.weather_width();
        for (std::int64_t l = 0; l < cfg.lookback; ++l)
            for (std::int64_t j = 0; j < Fw; ++j) {
                double want = 0;
                for (std::int64_t s = 0; s < S; ++s)
                    want += std::abs(xw[static_cast<std::size_t>((s * cfg.lookback + l) * Fw + j)]);
                want /= static_cast<double>(S);
                CHECK(report.temporal_at(l, F + j) == Approx(want));
            }
        for (std::int64_t z = 0; z < cfg.n_zones; ++z)
            for (std::int64_t f = 0; f < F; ++f) {
                double want = 0;
                for (std::int64_t s = 0; s < S; ++s)
                    for (std::int64_t l = 0; l < cfg.lookback; ++l)
                        want += std::abs(
                            x[static_cast<std::size_t>(((s * cfg.n_zones + z) * F + f) * cfg.lookback + l)]);
                want /= static_cast<double>(S * cfg.lookback);
                CHECK(report.spatial_at(z, f) == Approx(want));
            }
    }

    SECTION("weights scale their feature's column") {
        randomize_params(model, 31);
        const auto report = importance_report(model, batch);
        // Recompute one lag/field cell from the raw definition.
        auto x = batch.X_st.values();
        auto w = model.w_st.W.values();
        const auto S = batch.size();
        const std::int64_t l = 1, f = 1, B = cfg.lookback;
        double want = 0;
        for (std::int64_t s = 0; s < S; ++s)
            for (std::int64_t z = 0; z < cfg.n_zones; ++z) {
                const auto idx = static_cast<std::size_t>(((s * cfg.n_zones + z) * F + f) * B + l);
                const auto widx = static_cast<std::size_t>((z * F + f) * B + l);
                want += std::abs(x[idx] * w[widx]);
            }
        CHECK(report.temporal_at(l, f) == Approx(want / static_cast<double>(S * cfg.n_zones)));
    }

    SECTION("the sigmoid preset squashes the weights before use") {
        auto squashed = cfg;
        squashed.weighting_activation = Activation::Sigmoid;
        auto sig = build<double>(squashed, roster);
        for (auto& w : sig.w_st.W.values()) w = 0.0;  // sigmoid(0) = 0.5
        const auto report = importance_report(sig, batch);
        for (auto& w : sig.w_st.W.values()) w = 1.0;
        sig.w_st.activation = Activation::Linear;
        const auto raw = importance_report(sig, batch);
        for (std::int64_t l = 0; l < cfg.lookback; ++l)
            for (std::int64_t f = 0; f < F; ++f)
                CHECK(report.temporal_at(l, f) == Approx(0.5 * raw.temporal_at(l, f)));
    }

    SECTION("a model without the weighting block cannot explain features") {
        auto ablated = cfg;
        ablated.ablation_mask = {"weighting"};
        const auto plain = build<double>(ablated, roster);
        CHECK_THROWS_AS(importance_report(plain, batch), UsageError);
    }

    SECTION("the batch must match the model") {
        auto wrong = cfg;
        wrong.n_zones = 4;
        const auto thin = random_batch<double>(wrong, roster, 3, 9);
        CHECK_THROWS_AS(importance_report(model, thin), DimensionError);
    }
}

TEST_CASE("metric and importance tables serialize as CSV", "[metrics]") {
    SECTION("per-task metrics") {
        std::map<std::string, TaskMetrics> rows;
        rows["demand"] = {1.5, 2.0, 0.4, 0.25};
        rows["gap"] = {0.5, 1.0, 0.2, 0.25};
        const auto path = temp_prefix("metrics.csv");
        write_metrics_csv(path, rows);
        const auto text = slurp(path);
        CHECK(text.rfind("task,mae,rmse,smape,time_s\n", 0) == 0);
        CHECK(text.find("demand,1.5,2,0.4,0.25\n") != std::string::npos);
        CHECK(text.find("gap,0.5,1,0.2,0.25\n") != std::string::npos);
    }

    SECTION("importance tables") {
        ImportanceReport report;
        report.temporal_fields = {"orders", "gap", "temp"};
        report.spatial_fields = {"orders", "gap"};
        report.n_zones = 2;
        report.lookback = 2;
        report.temporal = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
        report.spatial = {1.0, 2.0, 3.0, 4.0};

        const auto tpath = temp_prefix("temporal.csv");
        write_temporal_csv(tpath, report);
        const auto ttext = slurp(tpath);
        CHECK(ttext == "lag,orders,gap,temp\n0,0.1,0.2,0.3\n1,0.4,0.5,0.6\n");

        const auto spath = temp_prefix("spatial.csv");
        write_spatial_csv(spath, report);
        CHECK(slurp(spath) == "zone,orders,gap\n0,1,2\n1,3,4\n");
    }
}
