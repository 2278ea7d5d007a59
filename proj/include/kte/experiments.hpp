#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "kte/datagen.hpp"
#include "kte/parallel.hpp"
#include "kte/permutation.hpp"
#include "kte/rng.hpp"
#include "kte/statistics.hpp"

namespace kte {

/// One measurement: embedding error for the fit suite, p-value for the
/// testing suites. Runtime is the wall time of the replicate that
/// produced the row and is excluded from determinism comparisons.
struct ResultRow {
    std::string suite;
    std::string statistic;
    double grid = 0.0;
    int replicate = 0;
    double value = 0.0;
    double runtime_s = 0.0;
};

struct ResultTable {
    std::vector<ResultRow> rows;

    void sort() {
        std::stable_sort(rows.begin(), rows.end(), [](const ResultRow& a, const ResultRow& b) {
            return std::tie(a.suite, a.grid, a.replicate, a.statistic) <
                   std::tie(b.suite, b.grid, b.replicate, b.statistic);
        });
    }

    void write_csv(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("results: cannot write " + path);
        out << std::setprecision(17);
        out << "suite,statistic,grid,replicate,value,runtime_s\n";
        for (const ResultRow& r : rows)
            out << r.suite << "," << r.statistic << "," << r.grid << "," << r.replicate << "," << r.value
                << "," << r.runtime_s << "\n";
    }

    static ResultTable read_csv(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("results: cannot open " + path);
        std::string line;
        if (!std::getline(in, line) || detail::trim_ws(line) != "suite,statistic,grid,replicate,value,runtime_s")
            throw std::runtime_error("results: unexpected header in " + path);
        ResultTable table;
        int row = 0;
        while (std::getline(in, line)) {
            if (detail::trim_ws(line).empty()) continue;
            ++row;
            const auto cells = detail::split_csv_line(line);
            if (cells.size() != 6) throw std::runtime_error("results: malformed row " + std::to_string(row));
            ResultRow r;
            r.suite = cells[0];
            r.statistic = cells[1];
            r.grid = detail::parse_number(cells[2], row, "grid");
            r.replicate = static_cast<int>(detail::parse_number(cells[3], row, "replicate"));
            r.value = detail::parse_number(cells[4], row, "value");
            r.runtime_s = detail::parse_number(cells[5], row, "runtime_s");
            table.rows.push_back(std::move(r));
        }
        return table;
    }
};

struct SummaryRow {
    std::string suite;
    std::string statistic;
    double grid = 0.0;
    std::string metric;
    double mean = 0.0;
    double std_error = 0.0;
    int count = 0;
};

namespace detail {
inline std::map<std::tuple<std::string, std::string, double>, std::vector<double>> group_values(
    const ResultTable& table) {
    std::map<std::tuple<std::string, std::string, double>, std::vector<double>> groups;
    for (const ResultRow& r : table.rows) groups[{r.suite, r.statistic, r.grid}].push_back(r.value);
    return groups;
}
}  // namespace detail

/// Mean and standard error of the raw values per (suite, statistic, grid).
inline std::vector<SummaryRow> summarize_values(const ResultTable& table) {
    std::vector<SummaryRow> out;
    for (const auto& [key, vals] : detail::group_values(table)) {
        SummaryRow s;
        std::tie(s.suite, s.statistic, s.grid) = key;
        s.metric = "value_mean";
        s.count = static_cast<int>(vals.size());
        s.mean = std::accumulate(vals.begin(), vals.end(), 0.0) / s.count;
        double var = 0.0;
        for (double v : vals) var += (v - s.mean) * (v - s.mean);
        s.std_error = (s.count > 1) ? std::sqrt(var / (s.count - 1) / s.count) : 0.0;
        out.push_back(std::move(s));
    }
    return out;
}

/// Rejection rate at level alpha, with its binomial standard error; equals
/// the exact mean of the per-row rejection flags 1{p <= alpha}.
inline std::vector<SummaryRow> summarize_rejections(const ResultTable& table, double alpha) {
    std::vector<SummaryRow> out;
    for (const auto& [key, vals] : detail::group_values(table)) {
        SummaryRow s;
        std::tie(s.suite, s.statistic, s.grid) = key;
        s.metric = "rejection_rate";
        s.count = static_cast<int>(vals.size());
        double hits = 0.0;
        for (double v : vals) hits += (v <= alpha) ? 1.0 : 0.0;
        s.mean = hits / s.count;
        s.std_error = std::sqrt(std::max(0.0, s.mean * (1.0 - s.mean) / s.count));
        out.push_back(std::move(s));
    }
    return out;
}

inline void write_summary_csv(const std::vector<SummaryRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("results: cannot write " + path);
    out << std::setprecision(17);
    out << "suite,statistic,grid,metric,mean,std_error,count\n";
    for (const SummaryRow& s : rows)
        out << s.suite << "," << s.statistic << "," << s.grid << "," << s.metric << "," << s.mean << ","
            << s.std_error << "," << s.count << "\n";
}

// ---------------------------------------------------------------------------
// Fit-convergence suite
// ---------------------------------------------------------------------------

struct FitConvergenceConfig {
    DgpSpec dgp;  // family with counterfactual support
    std::vector<int> n_grid = {100, 200, 400, 800, 1600};
    int replicates = 10;
    int oracle_size = 100000;
    double train_ratio = 0.5;
    ModelsConfig models;
    int dett_t = 0;
    int dett_t_prime = 1;
    std::uint64_t seed = 0;
};

/// RKHS distance of each estimated embedding to a large-sample oracle
/// embedding, per grid size and replicate. The propensity model is the
/// (misspecified where the family demands it) linear logistic fit.
inline ResultTable run_fit_convergence(const FitConvergenceConfig& config) {
    if (config.n_grid.empty() || config.replicates < 1)
        throw std::invalid_argument("fit_convergence: empty grid or no replicates");

    // one oracle per target, shared across the whole run
    const Eigen::MatrixXd oracle0 = oracle_embedding_sample(config.dgp, 0, config.oracle_size);
    const Eigen::MatrixXd oracle1 = oracle_embedding_sample(config.dgp, 1, config.oracle_size);
    const Eigen::MatrixXd oracle_ett =
        oracle_embedding_sample(config.dgp, config.dett_t, config.oracle_size, config.dett_t_prime);

    // outcome kernel chosen once from a pilot draw so that every grid size
    // and replicate shares one error metric
    DgpSpec pilot = config.dgp;
    pilot.n = 2000;
    pilot.seed = substream_seed(config.seed, Stream::oracle, 777);
    const KernelSpec yk = KernelSpec::gaussian(median_heuristic(generate(pilot).Y));
    const double self0 = mean_gram_value(yk, oracle0);
    const double self1 = mean_gram_value(yk, oracle1);
    const double self_ett = mean_gram_value(yk, oracle_ett);

    struct Task {
        int grid_index;
        int replicate;
    };
    std::vector<Task> tasks;
    for (int g = 0; g < static_cast<int>(config.n_grid.size()); ++g)
        for (int r = 0; r < config.replicates; ++r) tasks.push_back({g, r});

    const std::vector<std::string> names = {"date_ipw_t0", "date_ipw_t1", "date_dr_t0",
                                            "date_dr_t1",  "dett_cme",    "dett_dr"};
    std::vector<std::vector<ResultRow>> slots(tasks.size());
    parallel_for(static_cast<int>(tasks.size()), [&](int ti) {
        const auto t_start = std::chrono::steady_clock::now();
        const Task task = tasks[static_cast<std::size_t>(ti)];
        const int n = config.n_grid[static_cast<std::size_t>(task.grid_index)];
        DgpSpec spec = config.dgp;
        spec.n = n;
        spec.seed = substream_seed(config.seed, Stream::replicate,
                                   static_cast<std::uint64_t>(task.grid_index) * 1000003ULL +
                                       static_cast<std::uint64_t>(task.replicate));
        const Dataset data = generate(spec);

        // plain random half split; matched sets are a permutation-test device
        std::vector<int> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        auto rng = substream_rng(spec.seed, Stream::fold_split);
        std::shuffle(order.begin(), order.end(), rng);
        const int n_train = static_cast<int>(std::ceil(config.train_ratio * n));
        const std::vector<int> train_rows(order.begin(), order.begin() + n_train);
        const std::vector<int> test_rows(order.begin() + n_train, order.end());
        const Dataset train = data.rows(train_rows);
        const Dataset test = data.rows(test_rows);

        LogisticFitConfig lcfg;
        lcfg.ridge = config.models.logistic_ridge;
        lcfg.clip_delta = config.models.clip_delta;
        const PropensityModel prop = fit_logistic(train.X, train.T, lcfg);
        const Standardizer st = Standardizer::fit(train.X);
        Eigen::MatrixXd pooled(train.n() + test.n(), train.dim());
        pooled << st.apply(train.X), st.apply(test.X);
        const KernelSpec xk = KernelSpec::gaussian(median_heuristic(pooled));
        const CmeModel cme0 = fit_cme(train, 0, xk, config.models.cme_lambda, st);
        const CmeModel cme1 = fit_cme(train, 1, xk, config.models.cme_lambda, st);
        const OutcomeBank bank{&train.Y, &test.Y};
        const CmeModel& cme_t = (config.dett_t == 0) ? cme0 : cme1;

        const auto error_to = [&](const WeightedEmbedding& emb, const Eigen::MatrixXd& oracle, double self) {
            return std::sqrt(std::max(0.0, embedding_error_sq(yk, emb, bank, oracle, self)));
        };
        std::vector<double> values = {
            error_to(ipw_embedding(test, prop, 0), oracle0, self0),
            error_to(ipw_embedding(test, prop, 1), oracle1, self1),
            error_to(dr_embedding(test, prop, cme0, 0), oracle0, self0),
            error_to(dr_embedding(test, prop, cme1, 1), oracle1, self1),
            error_to(dett_embedding_cme(test, cme_t, config.dett_t, config.dett_t_prime), oracle_ett,
                     self_ett),
            error_to(dr_ett_embedding(test, prop, cme_t, config.dett_t, config.dett_t_prime), oracle_ett,
                     self_ett),
        };
        const double seconds =
            std::chrono::duration_cast<std::chrono::duration<double>>(std::chrono::steady_clock::now() -
                                                                      t_start)
                .count();
        for (std::size_t k = 0; k < names.size(); ++k)
            slots[static_cast<std::size_t>(ti)].push_back(
                {"fit_convergence", names[k], static_cast<double>(n), task.replicate, values[k], seconds});
    });

    ResultTable table;
    for (const auto& slot : slots) table.rows.insert(table.rows.end(), slot.begin(), slot.end());
    table.sort();
    return table;
}

// ---------------------------------------------------------------------------
// Power-curve suite
// ---------------------------------------------------------------------------

struct PowerCurveConfig {
    DgpSpec dgp;  // family dgp_effect
    std::vector<double> beta_grid = {0.0, 1.0, 2.0, 3.0};
    int n = 500;
    int replicates = 50;
    StatisticPlan plan;
    PermutationPlanConfig perm;
    ModelsConfig models;
    double alpha = 0.05;
    std::uint64_t seed = 0;
};

/// One permutation test per (beta, replicate); rows carry p-values and the
/// rejection summary is derived exactly from them.
inline ResultTable run_power_curve(const PowerCurveConfig& config) {
    if (config.beta_grid.empty() || config.replicates < 1)
        throw std::invalid_argument("power_curve: empty grid or no replicates");
    if (config.dgp.family != DgpFamily::dgp_effect)
        throw std::invalid_argument("power_curve: needs the distributional-effect family");

    struct Task {
        int grid_index;
        int replicate;
    };
    std::vector<Task> tasks;
    for (int g = 0; g < static_cast<int>(config.beta_grid.size()); ++g)
        for (int r = 0; r < config.replicates; ++r) tasks.push_back({g, r});

    std::vector<std::vector<ResultRow>> slots(tasks.size());
    parallel_for(static_cast<int>(tasks.size()), [&](int ti) {
        const auto t_start = std::chrono::steady_clock::now();
        const Task task = tasks[static_cast<std::size_t>(ti)];
        DgpSpec spec = config.dgp;
        spec.n = config.n;
        spec.beta = config.beta_grid[static_cast<std::size_t>(task.grid_index)];
        spec.seed = substream_seed(config.seed, Stream::replicate,
                                   static_cast<std::uint64_t>(task.grid_index) * 1000003ULL +
                                       static_cast<std::uint64_t>(task.replicate));
        const Dataset data = generate(spec);
        PermutationPlanConfig pc = config.perm;
        pc.seed = substream_seed(spec.seed, Stream::fold_split, 1);
        const auto results = run_permutation_test_multi(data, config.plan, pc, config.models);
        const double seconds =
            std::chrono::duration_cast<std::chrono::duration<double>>(std::chrono::steady_clock::now() -
                                                                      t_start)
                .count();
        for (const TestResult& r : results)
            slots[static_cast<std::size_t>(ti)].push_back(
                {"power", statistic_name(r.kind), spec.beta, task.replicate, r.p_value, seconds});
    });

    ResultTable table;
    for (const auto& slot : slots) table.rows.insert(table.rows.end(), slot.begin(), slot.end());
    table.sort();
    return table;
}

// ---------------------------------------------------------------------------
// Semi-synthetic calibration suite
// ---------------------------------------------------------------------------

enum class Hypothesis { h0, h1 };

struct CalibrationConfig {
    std::string csv_path;
    CsvSchema schema;  // must name counterfactual columns
    std::vector<Hypothesis> hypotheses = {Hypothesis::h0, Hypothesis::h1};
    StatisticPlan plan;
    PermutationPlanConfig perm;
    ModelsConfig models;
    int replicates = 20;
    double alpha = 0.05;
    std::uint64_t seed = 0;
};

/// Null worlds replace both observed and treated-arm outcomes by the
/// control counterfactual, so Y(1) = Y(0) holds sharply; the alternative
/// keeps the file as given. Replicates rerun matching, folding and
/// permutation under fresh seeds.
inline ResultTable run_calibration_csv(const CalibrationConfig& config) {
    if (config.replicates < 1) throw std::invalid_argument("calibration: no replicates");
    if (config.schema.y0_columns.empty() || config.schema.y1_columns.empty())
        throw std::invalid_argument("calibration: counterfactual columns required");
    const Dataset base = load_counterfactual_csv(config.csv_path, config.schema);
    if (!base.Y0 || !base.Y1) throw std::invalid_argument("calibration: counterfactuals missing after load");

    ResultTable table;
    for (Hypothesis hyp : config.hypotheses) {
        Dataset world = base;
        if (hyp == Hypothesis::h0) {
            world.Y = *base.Y0;
            world.Y1 = *base.Y0;
        }
        const std::string suite = (hyp == Hypothesis::h0) ? "calibration_h0" : "calibration_h1";
        std::vector<std::vector<ResultRow>> slots(static_cast<std::size_t>(config.replicates));
        parallel_for(config.replicates, [&](int rep) {
            const auto t_start = std::chrono::steady_clock::now();
            // same replicate seeds under both hypotheses: the comparison is
            // paired, and identical counterfactual worlds run identically
            PermutationPlanConfig pc = config.perm;
            pc.seed = substream_seed(config.seed, Stream::replicate, static_cast<std::uint64_t>(rep));
            const auto results = run_permutation_test_multi(world, config.plan, pc, config.models);
            const double seconds =
                std::chrono::duration_cast<std::chrono::duration<double>>(std::chrono::steady_clock::now() -
                                                                          t_start)
                    .count();
            for (const TestResult& r : results)
                slots[static_cast<std::size_t>(rep)].push_back(
                    {suite, statistic_name(r.kind), 0.0, rep, r.p_value, seconds});
        });
        for (const auto& slot : slots) table.rows.insert(table.rows.end(), slot.begin(), slot.end());
    }
    table.sort();
    return table;
}

}  // namespace kte
