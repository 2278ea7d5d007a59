#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "kte/cli.hpp"
#include "kte/experiments.hpp"

using namespace kte;

namespace {
struct TempDir {
    std::string path;
    explicit TempDir(const std::string& name) : path("/tmp/kte_exp_" + name) {
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

bool same_modulo_runtime(const ResultTable& a, const ResultTable& b) {
    if (a.rows.size() != b.rows.size()) return false;
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        const ResultRow& x = a.rows[i];
        const ResultRow& y = b.rows[i];
        if (x.suite != y.suite || x.statistic != y.statistic || x.grid != y.grid ||
            x.replicate != y.replicate || x.value != y.value)
            return false;
    }
    return true;
}
}  // namespace

TEST_CASE("fit convergence emits one row per estimator", "[experiments]") {
    FitConvergenceConfig config;
    config.dgp.family = DgpFamily::dgp_a_confounded;
    config.n_grid = {100};
    config.replicates = 1;
    config.oracle_size = 400;
    config.seed = 3;
    const ResultTable table = run_fit_convergence(config);
    CHECK(table.rows.size() == 6);
    for (const ResultRow& r : table.rows) {
        CHECK(r.suite == "fit_convergence");
        CHECK(r.grid == 100.0);
        CHECK(r.value >= 0.0);
        CHECK(std::isfinite(r.value));
    }
    const ResultTable again = run_fit_convergence(config);
    CHECK(same_modulo_runtime(table, again));
}

TEST_CASE("power curve rows are p-values on the permutation grid", "[experiments]") {
    PowerCurveConfig config;
    config.dgp.family = DgpFamily::dgp_effect;
    config.dgp.z_mode = ZMode::bernoulli;
    config.beta_grid = {0.0, 2.0};
    config.n = 140;
    config.replicates = 2;
    config.plan.kinds = {StatisticKind::date, StatisticKind::dr_date, StatisticKind::dett,
                         StatisticKind::dr_dett, StatisticKind::mean_dr_baseline};
    config.perm.N = 1;
    config.perm.m = 9;
    config.seed = 11;
    const ResultTable table = run_power_curve(config);
    CHECK(table.rows.size() == 2 * 2 * 5);
    for (const ResultRow& r : table.rows) {
        bool on_grid = false;
        for (int j = 0; j <= config.perm.m; ++j)
            if (r.value == static_cast<double>(1 + j) / (config.perm.m + 1)) on_grid = true;
        CHECK(on_grid);
    }
    const ResultTable again = run_power_curve(config);
    CHECK(same_modulo_runtime(table, again));
}

TEST_CASE("summaries reproduce exactly from re-read tables", "[experiments]") {
    PowerCurveConfig config;
    config.dgp.family = DgpFamily::dgp_effect;
    config.beta_grid = {0.0};
    config.n = 120;
    config.replicates = 3;
    config.plan.kinds = {StatisticKind::date};
    config.perm.N = 1;
    config.perm.m = 9;
    config.seed = 13;
    const ResultTable table = run_power_curve(config);

    TempDir dir("summary");
    const std::string path = dir.path + "/power.csv";
    table.write_csv(path);
    const ResultTable back = ResultTable::read_csv(path);
    REQUIRE(back.rows.size() == table.rows.size());
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        CHECK(back.rows[i].value == table.rows[i].value);
        CHECK(back.rows[i].runtime_s == table.rows[i].runtime_s);
        CHECK(back.rows[i].statistic == table.rows[i].statistic);
    }

    const auto summary = summarize_rejections(back, 0.2);
    REQUIRE(summary.size() == 1);
    double flags = 0.0;
    for (const ResultRow& r : back.rows) flags += (r.value <= 0.2) ? 1.0 : 0.0;
    CHECK(summary[0].mean == (flags / static_cast<double>(back.rows.size())));
    CHECK(summary[0].count == 3);
}

TEST_CASE("calibration is identical under both hypotheses when y1 equals y0", "[experiments]") {
    DgpSpec spec;
    spec.family = DgpFamily::dgp_effect;
    spec.beta = 0.0;  // Y1 == Y0 by construction
    spec.n = 150;
    spec.seed = 17;
    const Dataset d = generate(spec);
    TempDir dir("calibration");
    const std::string csv = dir.path + "/fixture.csv";
    save_dataset_csv(d, csv);

    CalibrationConfig config;
    config.csv_path = csv;
    config.schema.treatment = "t";
    config.schema.outcomes = {"y1"};
    config.schema.y0_columns = {"y0_1"};
    config.schema.y1_columns = {"y1_1"};
    config.schema.exclude = {"e_true"};
    config.plan.kinds = {StatisticKind::date, StatisticKind::dr_date};
    config.perm.N = 1;
    config.perm.m = 9;
    config.replicates = 2;
    config.seed = 19;
    const ResultTable table = run_calibration_csv(config);
    CHECK(table.rows.size() == 2 * 2 * 2);

    std::map<std::pair<std::string, int>, double> h0, h1;
    for (const ResultRow& r : table.rows)
        (r.suite == "calibration_h0" ? h0 : h1)[{r.statistic, r.replicate}] = r.value;
    REQUIRE(h0.size() == h1.size());
    for (const auto& [key, value] : h0) CHECK(h1.at(key) == value);

    const ResultTable again = run_calibration_csv(config);
    CHECK(same_modulo_runtime(table, again));
}

TEST_CASE("cli gen is deterministic and test prints a grid p-value", "[experiments]") {
    TempDir dir("cli");
    const std::string a = dir.path + "/a.csv";
    const std::string b = dir.path + "/b.csv";
    std::ostringstream out, err;
    CHECK(cli_main({"gen", "--dgp", "effect", "--n", "80", "--seed", "1", "--out", a}, out, err) == 0);
    CHECK(cli_main({"gen", "--dgp", "effect", "--n", "80", "--seed", "1", "--out", b}, out, err) == 0);
    CHECK(slurp(a) == slurp(b));

    std::ostringstream test_out;
    const int rc = cli_main({"test", "--csv", a, "--y0-cols", "y0_1", "--y1-cols", "y1_1",
                             "--exclude-cols", "e_true", "--stat", "dr-date", "-m", "99", "--seed", "7"},
                            test_out, err);
    REQUIRE(rc == 0);
    const std::string text = test_out.str();
    CHECK(text.find("statistic=dr_date") != std::string::npos);
    const auto pos = text.find("p_value=");
    REQUIRE(pos != std::string::npos);
    const double p = std::stod(text.substr(pos + 8));
    bool on_grid = false;
    for (int j = 0; j <= 99; ++j)
        if (std::abs(p - static_cast<double>(1 + j) / 100.0) < 1e-12) on_grid = true;
    CHECK(on_grid);
}

TEST_CASE("cli error paths", "[experiments]") {
    std::ostringstream out, err;
    CHECK(cli_main({"test", "--bogus-flag"}, out, err) == 1);
    const bool has_usage =
        err.str().find("Usage") != std::string::npos || err.str().find("error") != std::string::npos;
    CHECK(has_usage);
    CHECK(cli_main({"frobnicate"}, out, err) == 1);
    CHECK(cli_main({"--help"}, out, err) == 0);
    // config errors inside a valid parse: missing csv columns
    std::ostringstream err2;
    CHECK(cli_main({"calibrate", "--csv", "/nonexistent.csv"}, out, err2) == 1);
}

TEST_CASE("cli calibrate writes table and summary files", "[experiments]") {
    TempDir dir("clical");
    const std::string csv = dir.path + "/null.csv";
    std::ostringstream out, err;
    REQUIRE(cli_main({"gen", "--dgp", "effect", "--beta", "0", "--n", "120", "--seed", "3", "--out", csv},
                     out, err) == 0);
    const int rc = cli_main({"calibrate", "--csv", csv, "--y0-cols", "y0_1", "--y1-cols", "y1_1",
                             "--exclude-cols", "e_true", "--stats", "date,dr-date", "--reps", "2", "-m", "9",
                             "-N", "1", "--hypothesis", "h0", "--out-dir", dir.path},
                            out, err);
    REQUIRE(rc == 0);
    const ResultTable table = ResultTable::read_csv(dir.path + "/calibration.csv");
    CHECK(table.rows.size() == 4);
    CHECK(slurp(dir.path + "/calibration_summary.csv").find("rejection_rate") != std::string::npos);
}
