#pragma once

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "kte/experiments.hpp"

namespace kte {

namespace cli_detail {

inline StatisticKind kind_from_name(const std::string& name) {
    static const std::map<std::string, StatisticKind> table = {
        {"date", StatisticKind::date},       {"dr-date", StatisticKind::dr_date},
        {"dett", StatisticKind::dett},       {"dr-dett", StatisticKind::dr_dett},
        {"dr-mean", StatisticKind::mean_dr_baseline},
    };
    auto it = table.find(name);
    if (it == table.end()) throw CLI::ValidationError("--stats", "unknown statistic " + name);
    return it->second;
}

struct CsvFlags {
    std::string path;
    std::string t_col = "t";
    std::vector<std::string> y_cols = {"y1"};
    std::vector<std::string> y0_cols, y1_cols, x_cols, exclude_cols;
    std::string e_col;
    bool trim = false;

    CsvSchema schema() const {
        CsvSchema s;
        s.treatment = t_col;
        s.outcomes = y_cols;
        s.y0_columns = y0_cols;
        s.y1_columns = y1_cols;
        s.covariates = x_cols;
        s.exclude = exclude_cols;
        s.propensity = e_col;
        s.trim = trim;
        return s;
    }
};

inline void add_csv_options(CLI::App* cmd, CsvFlags& flags, bool required) {
    auto* opt = cmd->add_option("--csv", flags.path, "input CSV file (header row required)");
    if (required) opt->required();
    cmd->add_option("--t-col", flags.t_col, "treatment column")->capture_default_str();
    cmd->add_option("--y-cols", flags.y_cols, "outcome columns")->delimiter(',')->capture_default_str();
    cmd->add_option("--y0-cols", flags.y0_cols, "control counterfactual columns")->delimiter(',');
    cmd->add_option("--y1-cols", flags.y1_cols, "treated counterfactual columns")->delimiter(',');
    cmd->add_option("--x-cols", flags.x_cols, "covariate columns (default: all remaining)")->delimiter(',');
    cmd->add_option("--exclude-cols", flags.exclude_cols, "columns ignored entirely")->delimiter(',');
    cmd->add_option("--e-col", flags.e_col, "stated propensity column");
    cmd->add_flag("--trim", flags.trim, "drop rows with stated propensity outside [0.03, 0.97]");
}

struct DgpFlags {
    std::string family = "effect";
    int n = 500;
    double beta = 3.0;
    double sigma = 0.2;
    double alpha = 0.3;
    double sigma_prime = 0.2;
    double rate = 0.5;
    std::string z_mode = "one";
    std::uint64_t seed = 0;

    DgpSpec spec() const {
        DgpSpec s;
        if (family == "a") s.family = DgpFamily::dgp_a_confounded;
        else if (family == "b") s.family = DgpFamily::dgp_b_randomized;
        else if (family == "effect") s.family = DgpFamily::dgp_effect;
        else throw CLI::ValidationError("--dgp", "unknown family " + family);
        s.n = n;
        s.beta = beta;
        s.sigma = sigma;
        s.alpha = alpha;
        s.sigma_prime = sigma_prime;
        s.bernoulli_rate = rate;
        if (z_mode == "one") s.z_mode = ZMode::one;
        else if (z_mode == "bernoulli") s.z_mode = ZMode::bernoulli;
        else if (z_mode == "uniform") s.z_mode = ZMode::uniform;
        else throw CLI::ValidationError("--z-mode", "unknown mode " + z_mode);
        s.seed = seed;
        return s;
    }
};

inline void add_dgp_options(CLI::App* cmd, DgpFlags& flags) {
    cmd->add_option("--dgp", flags.family, "generator family: a | b | effect")->capture_default_str();
    cmd->add_option("--n", flags.n, "sample size")->capture_default_str();
    cmd->add_option("--beta", flags.beta, "effect size")->capture_default_str();
    cmd->add_option("--sigma", flags.sigma, "outcome noise")->capture_default_str();
    cmd->add_option("--dgp-alpha", flags.alpha, "variance inflation (family b)")->capture_default_str();
    cmd->add_option("--sigma-prime", flags.sigma_prime, "outcome noise (family b)")->capture_default_str();
    cmd->add_option("--rate", flags.rate, "treatment rate (family b)")->capture_default_str();
    cmd->add_option("--z-mode", flags.z_mode, "effect multiplier: one | bernoulli | uniform")
        ->capture_default_str();
}

struct TestFlags {
    std::vector<std::string> stats = {"dr-date"};
    std::string dett_estimator = "weighted";
    std::string dett_normalize = "count";
    int dett_t = 0;
    int dett_t_prime = 1;
    int N = 20;
    int m = 200;
    double ratio = 0.5;
    std::uint64_t seed = 0;
    double clip = 0.03;
    double caliper = -1.0;
    bool no_caliper = false;
    int controls = 1;
    double lambda = -1.0;
    double x_bandwidth = -1.0;
    double y_bandwidth = -1.0;

    StatisticPlan plan() const {
        StatisticPlan p;
        p.kinds.clear();
        for (const std::string& s : stats) p.kinds.push_back(kind_from_name(s));
        if (dett_estimator == "weighted") p.dett_estimator = DettEstimator::weighted;
        else if (dett_estimator == "cme") p.dett_estimator = DettEstimator::cme;
        else throw CLI::ValidationError("--dett-estimator", "unknown estimator " + dett_estimator);
        if (dett_normalize == "count") p.dett_normalize = NormalizeMode::count;
        else if (dett_normalize == "self") p.dett_normalize = NormalizeMode::self;
        else throw CLI::ValidationError("--dett-normalize", "unknown normalization " + dett_normalize);
        if (dett_t == dett_t_prime) throw CLI::ValidationError("--dett-t", "target arms must differ");
        p.dett_t = dett_t;
        p.dett_t_prime = dett_t_prime;
        return p;
    }
    PermutationPlanConfig perm() const {
        PermutationPlanConfig pc;
        pc.N = N;
        pc.m = m;
        pc.train_ratio = ratio;
        pc.seed = seed;
        return pc;
    }
    ModelsConfig models() const {
        ModelsConfig mc;
        mc.clip_delta = clip;
        mc.caliper = no_caliper ? std::numeric_limits<double>::infinity() : caliper;
        mc.controls_per_set = controls;
        if (lambda >= 0.0) mc.cme_lambda = lambda;
        if (x_bandwidth > 0.0) mc.covariate_kernel = KernelSpec::gaussian(x_bandwidth);
        if (y_bandwidth > 0.0) mc.outcome_kernel = KernelSpec::gaussian(y_bandwidth);
        return mc;
    }
};

inline void add_test_options(CLI::App* cmd, TestFlags& flags) {
    cmd->add_option("--stats,--stat", flags.stats,
                    "statistics: date | dr-date | dett | dr-dett | dr-mean")
        ->delimiter(',')
        ->capture_default_str();
    cmd->add_option("--dett-estimator", flags.dett_estimator, "dett plug-in: weighted | cme")
        ->capture_default_str();
    cmd->add_option("--dett-normalize", flags.dett_normalize, "weighted dett scaling: count | self")
        ->capture_default_str();
    cmd->add_option("--dett-t", flags.dett_t, "counterfactual arm of the dett target")->capture_default_str();
    cmd->add_option("--dett-t-prime", flags.dett_t_prime, "conditioning arm of the dett target")
        ->capture_default_str();
    cmd->add_option("-N,--train-perms", flags.N, "cached train-side permutations")->capture_default_str();
    cmd->add_option("-m,--perms", flags.m, "permutation draws")->capture_default_str();
    cmd->add_option("--ratio", flags.ratio, "train fold fraction of matched sets")->capture_default_str();
    cmd->add_option("--seed", flags.seed, "master seed")->capture_default_str();
    cmd->add_option("--clip", flags.clip, "propensity clipping delta")->capture_default_str();
    cmd->add_option("--caliper", flags.caliper, "matching caliper in logit units (default 0.2 sd)");
    cmd->add_flag("--no-caliper", flags.no_caliper, "disable the caliper");
    cmd->add_option("--controls", flags.controls, "controls per matched set")->capture_default_str();
    cmd->add_option("--lambda", flags.lambda, "CME ridge (default scales with arm size)");
    cmd->add_option("--x-bandwidth", flags.x_bandwidth, "covariate kernel bandwidth (default median heuristic)");
    cmd->add_option("--y-bandwidth", flags.y_bandwidth, "outcome kernel bandwidth (default median heuristic)");
}

inline void print_result(std::ostream& out, const TestResult& r) {
    out << "statistic=" << statistic_name(r.kind) << "\n";
    out << "observed=" << r.observed.mmd << "\n";
    out << "observed_squared=" << r.observed.mmd_squared << "\n";
    out << "p_value=" << r.p_value << "\n";
    out << "permutations=" << r.m << "\n";
    out << "model_fits=" << r.diagnostics.model_fits << "\n";
    out << "matched_sets=" << r.diagnostics.n_sets << "\n";
    out << "unmatched=" << r.diagnostics.n_unmatched << "\n";
    out << "caliper=" << r.diagnostics.caliper << "\n";
    out << "n_train=" << r.diagnostics.n_train << "\n";
    out << "n_test=" << r.diagnostics.n_test << "\n";
    out << "covariate_bandwidth=" << r.diagnostics.covariate_bandwidth << "\n";
    out << "outcome_bandwidth=" << r.diagnostics.outcome_bandwidth << "\n";
    out << "suspicious_negatives=" << r.diagnostics.suspicious_negatives << "\n";
    out << "seconds=" << r.diagnostics.seconds << "\n";
}

}  // namespace cli_detail

/// CLI entry point. Returns 0 on success, 1 on configuration errors and 2
/// on runtime failures.
inline int cli_main(const std::vector<std::string>& args, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
    using namespace cli_detail;
    CLI::App app{"distributional treatment-effect testing with doubly robust kernel embeddings"};
    app.require_subcommand(1);
    app.set_config("--config", "", "config file mirroring the flags");

    // gen
    auto* gen = app.add_subcommand("gen", "draw a synthetic dataset and write it as CSV");
    DgpFlags gen_dgp;
    add_dgp_options(gen, gen_dgp);
    std::uint64_t gen_seed = 0;
    std::string gen_out = "dataset.csv";
    gen->add_option("--seed", gen_seed, "generator seed")->capture_default_str();
    gen->add_option("--out", gen_out, "output CSV path")->capture_default_str();

    // test
    auto* test = app.add_subcommand("test", "run one permutation test and print the result");
    CsvFlags test_csv;
    add_csv_options(test, test_csv, false);
    DgpFlags test_dgp;
    add_dgp_options(test, test_dgp);
    std::uint64_t test_dgp_seed = 0;
    test->add_option("--dgp-seed", test_dgp_seed, "generator seed when no CSV is given")
        ->capture_default_str();
    TestFlags test_flags;
    add_test_options(test, test_flags);

    // fit-convergence
    auto* fitc = app.add_subcommand("fit-convergence", "embedding error against a large oracle draw");
    DgpFlags fitc_dgp;
    fitc_dgp.family = "a";
    add_dgp_options(fitc, fitc_dgp);
    std::vector<int> fitc_grid = {100, 200, 400, 800, 1600};
    int fitc_reps = 10;
    int fitc_oracle = 100000;
    std::uint64_t fitc_seed = 0;
    std::string fitc_dir = "results";
    fitc->add_option("--n-grid", fitc_grid, "sample sizes")->delimiter(',')->capture_default_str();
    fitc->add_option("--reps", fitc_reps, "replicates per size")->capture_default_str();
    fitc->add_option("--oracle-size", fitc_oracle, "oracle draw size")->capture_default_str();
    fitc->add_option("--seed", fitc_seed, "master seed")->capture_default_str();
    fitc->add_option("--out-dir", fitc_dir, "output directory")->capture_default_str();

    // power
    auto* power = app.add_subcommand("power", "rejection rates over an effect-size grid");
    DgpFlags power_dgp;
    add_dgp_options(power, power_dgp);
    std::vector<double> power_grid = {0.0, 1.0, 2.0, 3.0};
    int power_reps = 50;
    double power_alpha = 0.05;
    std::string power_dir = "results";
    TestFlags power_flags;
    power_flags.stats = {"date", "dr-date", "dett", "dr-dett"};
    add_test_options(power, power_flags);
    power->add_option("--beta-grid", power_grid, "effect sizes")->delimiter(',')->capture_default_str();
    power->add_option("--reps", power_reps, "replicates per effect size")->capture_default_str();
    power->add_option("--alpha", power_alpha, "rejection level")->capture_default_str();
    power->add_option("--out-dir", power_dir, "output directory")->capture_default_str();

    // calibrate
    auto* cal = app.add_subcommand("calibrate", "null and alternative rejection rates on a CSV");
    CsvFlags cal_csv;
    add_csv_options(cal, cal_csv, true);
    std::string cal_hyp = "both";
    int cal_reps = 20;
    double cal_alpha = 0.05;
    std::string cal_dir = "results";
    TestFlags cal_flags;
    cal_flags.stats = {"date", "dr-date", "dett", "dr-dett"};
    add_test_options(cal, cal_flags);
    cal->add_option("--hypothesis", cal_hyp, "h0 | h1 | both")->capture_default_str();
    cal->add_option("--reps", cal_reps, "replicates (fresh folds and permutations)")->capture_default_str();
    cal->add_option("--alpha", cal_alpha, "rejection level")->capture_default_str();
    cal->add_option("--out-dir", cal_dir, "output directory")->capture_default_str();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            return 0;
        }
        err << "error: " << e.what() << "\n" << app.help();
        return 1;
    }

    try {
        if (gen->parsed()) {
            DgpSpec spec = gen_dgp.spec();
            spec.seed = gen_seed;
            const Dataset data = generate(spec);
            save_dataset_csv(data, gen_out);
            out << "wrote " << gen_out << " n=" << data.n() << " d=" << data.dim()
                << " clamp_rate=" << data.clamp_rate << "\n";
            return 0;
        }
        if (test->parsed()) {
            Dataset data;
            if (!test_csv.path.empty()) {
                CsvLoadReport report;
                data = load_counterfactual_csv(test_csv.path, test_csv.schema(), &report);
                if (!report.rejected_rows.empty())
                    err << "rejected " << report.rejected_rows.size() << " non-finite rows\n";
                if (!report.trimmed_rows.empty())
                    err << "trimmed " << report.trimmed_rows.size() << " extreme-propensity rows\n";
            } else {
                DgpSpec spec = test_dgp.spec();
                spec.seed = test_dgp_seed;
                data = generate(spec);
            }
            const auto results =
                run_permutation_test_multi(data, test_flags.plan(), test_flags.perm(), test_flags.models());
            for (std::size_t k = 0; k < results.size(); ++k) {
                if (k > 0) out << "\n";
                print_result(out, results[k]);
            }
            return 0;
        }
        if (fitc->parsed()) {
            FitConvergenceConfig config;
            config.dgp = fitc_dgp.spec();
            config.n_grid = fitc_grid;
            config.replicates = fitc_reps;
            config.oracle_size = fitc_oracle;
            config.seed = fitc_seed;
            const ResultTable table = run_fit_convergence(config);
            std::filesystem::create_directories(fitc_dir);
            const std::string path = fitc_dir + "/fit_convergence.csv";
            table.write_csv(path);
            write_summary_csv(summarize_values(table), fitc_dir + "/fit_convergence_summary.csv");
            out << "wrote " << path << " (" << table.rows.size() << " rows)\n";
            return 0;
        }
        if (power->parsed()) {
            PowerCurveConfig config;
            config.dgp = power_dgp.spec();
            config.beta_grid = power_grid;
            config.n = power_dgp.n;
            config.replicates = power_reps;
            config.plan = power_flags.plan();
            config.perm = power_flags.perm();
            config.models = power_flags.models();
            config.alpha = power_alpha;
            config.seed = power_flags.seed;
            const ResultTable table = run_power_curve(config);
            std::filesystem::create_directories(power_dir);
            const std::string path = power_dir + "/power.csv";
            table.write_csv(path);
            write_summary_csv(summarize_rejections(table, config.alpha), power_dir + "/power_summary.csv");
            out << "wrote " << path << " (" << table.rows.size() << " rows)\n";
            return 0;
        }
        if (cal->parsed()) {
            CalibrationConfig config;
            config.csv_path = cal_csv.path;
            config.schema = cal_csv.schema();
            if (cal_hyp == "h0") config.hypotheses = {Hypothesis::h0};
            else if (cal_hyp == "h1") config.hypotheses = {Hypothesis::h1};
            else if (cal_hyp == "both") config.hypotheses = {Hypothesis::h0, Hypothesis::h1};
            else throw CLI::ValidationError("--hypothesis", "unknown value " + cal_hyp);
            config.plan = cal_flags.plan();
            config.perm = cal_flags.perm();
            config.models = cal_flags.models();
            config.replicates = cal_reps;
            config.alpha = cal_alpha;
            config.seed = cal_flags.seed;
            const ResultTable table = run_calibration_csv(config);
            std::filesystem::create_directories(cal_dir);
            const std::string path = cal_dir + "/calibration.csv";
            table.write_csv(path);
            write_summary_csv(summarize_rejections(table, config.alpha), cal_dir + "/calibration_summary.csv");
            out << "wrote " << path << " (" << table.rows.size() << " rows)\n";
            return 0;
        }
    } catch (const CLI::ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "failed: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

inline int cli_main(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return cli_main(args, out, err);
}

}  // namespace kte
