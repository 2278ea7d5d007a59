#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "kte/dataset.hpp"
#include "kte/kernels.hpp"
#include "kte/matching.hpp"
#include "kte/parallel.hpp"
#include "kte/rng.hpp"
#include "kte/statistics.hpp"

namespace kte {

/// Uniform within-set shuffle, identity outside all sets. Returned as a
/// source map: permuted[i] = original[perm[i]].
inline std::vector<int> sample_within_set_permutation(const std::vector<std::vector<int>>& sets, int n,
                                                      std::mt19937_64& rng) {
    if (sets.empty()) throw std::invalid_argument("within-set permutation: no sets");
    std::vector<int> perm(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
    for (const auto& set : sets) {
        std::vector<int> shuffled = set;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        for (std::size_t j = 0; j < set.size(); ++j)
            perm[static_cast<std::size_t>(set[j])] = shuffled[j];
    }
    return perm;
}

inline Eigen::VectorXi apply_permutation(const std::vector<int>& perm, const Eigen::VectorXi& labels) {
    Eigen::VectorXi out(labels.size());
    for (Eigen::Index i = 0; i < labels.size(); ++i) out[i] = labels[perm[static_cast<std::size_t>(i)]];
    return out;
}

struct EngineResult {
    std::vector<double> observed;                // one entry per statistic
    std::vector<std::vector<double>> permuted;   // [statistic][draw]
    std::vector<double> p_values;
    int fit_count = 0;
};

/// Core of the amortized permutation scheme. N train-side within-set
/// permutations (plus identity) each trigger one model-fit bundle; every
/// one of the m draws composes a uniformly chosen cached bundle with a
/// fresh test-side within-set permutation. Exactly N + 1 fits happen no
/// matter how large m is.
///
/// fit : (train labels) -> Bundle
/// eval: (bundle, test labels, draw index 0..m) -> std::vector<double>,
///       draw 0 being the observed identity labeling.
template <class FitFn, class EvalFn>
inline EngineResult run_matched_permutation_engine(const std::vector<std::vector<int>>& train_sets,
                                                   const std::vector<std::vector<int>>& test_sets,
                                                   const Eigen::VectorXi& train_labels,
                                                   const Eigen::VectorXi& test_labels, int N, int m,
                                                   std::uint64_t seed, FitFn&& fit, EvalFn&& eval) {
    if (N < 0) throw std::invalid_argument("permutation engine: N must be >= 0");
    if (m < 1) throw std::invalid_argument("permutation engine: m must be >= 1");
    using Bundle = decltype(fit(train_labels));

    // Train labelings are drawn sequentially up front so that fitting in
    // parallel cannot change the draws.
    std::vector<Eigen::VectorXi> labelings;
    labelings.reserve(static_cast<std::size_t>(N) + 1);
    labelings.push_back(train_labels);
    {
        auto rng = substream_rng(seed, Stream::train_perm);
        for (int j = 0; j < N; ++j) {
            const auto perm = sample_within_set_permutation(train_sets, static_cast<int>(train_labels.size()), rng);
            labelings.push_back(apply_permutation(perm, train_labels));
        }
    }

    std::vector<Bundle> bundles(labelings.size());
    std::atomic<int> fit_count{0};
    parallel_for(static_cast<int>(labelings.size()), [&](int j) {
        bundles[static_cast<std::size_t>(j)] = fit(labelings[static_cast<std::size_t>(j)]);
        fit_count.fetch_add(1);
    });

    EngineResult result;
    result.fit_count = fit_count.load();
    result.observed = eval(bundles[0], test_labels, 0);
    const std::size_t n_stats = result.observed.size();
    std::vector<std::vector<double>> draws(static_cast<std::size_t>(m));

    parallel_for(m, [&](int i) {
        const int draw = i + 1;
        auto sigma_rng = substream_rng(seed, Stream::sigma_choice, static_cast<std::uint64_t>(draw));
        const int sigma = std::uniform_int_distribution<int>(0, N)(sigma_rng);
        auto pi_rng = substream_rng(seed, Stream::test_perm, static_cast<std::uint64_t>(draw));
        const auto pi = sample_within_set_permutation(test_sets, static_cast<int>(test_labels.size()), pi_rng);
        try {
            draws[static_cast<std::size_t>(i)] =
                eval(bundles[static_cast<std::size_t>(sigma)], apply_permutation(pi, test_labels), draw);
        } catch (const std::exception& e) {
            std::ostringstream os;
            os << "permutation test: statistic evaluation failed at draw " << draw << " (sigma index " << sigma
               << "): " << e.what();
            throw std::runtime_error(os.str());
        }
        if (draws[static_cast<std::size_t>(i)].size() != n_stats)
            throw std::runtime_error("permutation test: statistic count changed across draws");
    });

    result.permuted.assign(n_stats, std::vector<double>(static_cast<std::size_t>(m)));
    for (int i = 0; i < m; ++i)
        for (std::size_t s = 0; s < n_stats; ++s)
            result.permuted[s][static_cast<std::size_t>(i)] = draws[static_cast<std::size_t>(i)][s];

    result.p_values.resize(n_stats);
    for (std::size_t s = 0; s < n_stats; ++s) {
        int geq = 0;
        for (double v : result.permuted[s])
            if (v >= result.observed[s]) ++geq;
        result.p_values[s] = static_cast<double>(1 + geq) / static_cast<double>(m + 1);
    }
    return result;
}

struct PermutationPlanConfig {
    int N = 20;
    int m = 200;
    double train_ratio = 0.5;
    std::uint64_t seed = 0;
};

struct TestDiagnostics {
    int model_fits = 0;
    int n_sets = 0;
    int n_unmatched = 0;
    double caliper = 0.0;
    int n_train = 0;
    int n_test = 0;
    std::uint64_t covariate_kernel_fingerprint = 0;
    std::uint64_t outcome_kernel_fingerprint = 0;
    double covariate_bandwidth = 0.0;
    double outcome_bandwidth = 0.0;
    int suspicious_negatives = 0;
    double seconds = 0.0;
};

struct TestResult {
    StatisticKind kind = StatisticKind::dr_date;
    StatisticValue observed;
    std::vector<StatisticValue> permuted;
    int m = 0;
    double p_value = 1.0;
    TestDiagnostics diagnostics;
};

namespace detail {
inline Eigen::MatrixXd vstack(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    Eigen::MatrixXd out(a.rows() + b.rows(), a.cols());
    out.topRows(a.rows()) = a;
    out.bottomRows(b.rows()) = b;
    return out;
}
}  // namespace detail

/// Full matched-set permutation test: fit a matching propensity on the
/// whole sample, form matched sets, split them whole into train/test
/// folds, pick kernels once on the pooled folds, then run the amortized
/// engine with all planned statistics sharing the N + 1 fitted bundles.
inline std::vector<TestResult> run_permutation_test_multi(const Dataset& data, const StatisticPlan& plan,
                                                          const PermutationPlanConfig& pc,
                                                          const ModelsConfig& mc = {}) {
    const auto t_start = std::chrono::steady_clock::now();
    if (plan.kinds.empty()) throw std::invalid_argument("permutation test: no statistics requested");
    data.validate();

    LogisticFitConfig lcfg;
    lcfg.max_iter = mc.logistic_max_iter;
    lcfg.tol = mc.logistic_tol;
    lcfg.ridge = mc.logistic_ridge;
    lcfg.clip_delta = mc.clip_delta;

    const PropensityModel matching_prop = fit_logistic(data.X, data.T, lcfg);
    const Eigen::VectorXd logits = logit_scores(data, matching_prop);
    const double caliper = (mc.caliper < 0.0) ? default_caliper(logits) : mc.caliper;
    const MatchedSets sets = build_matched_sets_on_scores(logits, data.T, caliper, mc.controls_per_set);
    const FoldAssignment fold = split_sets(sets, pc.train_ratio, pc.seed);

    std::vector<int> train_rows, test_rows;
    std::vector<std::vector<int>> train_sets_local, test_sets_local;
    for (int si : fold.train_sets) {
        std::vector<int> local;
        for (int gi : sets.sets[static_cast<std::size_t>(si)]) {
            local.push_back(static_cast<int>(train_rows.size()));
            train_rows.push_back(gi);
        }
        train_sets_local.push_back(std::move(local));
    }
    for (int si : fold.test_sets) {
        std::vector<int> local;
        for (int gi : sets.sets[static_cast<std::size_t>(si)]) {
            local.push_back(static_cast<int>(test_rows.size()));
            test_rows.push_back(gi);
        }
        test_sets_local.push_back(std::move(local));
    }
    const Dataset train_fold = data.rows(train_rows);
    const Dataset test_fold = data.rows(test_rows);

    // One kernel per variable role for the entire run; chosen before any
    // permutation so every draw shares it.
    const Standardizer st = Standardizer::fit(train_fold.X);
    KernelSpec xk = KernelSpec::gaussian(1.0);
    if (mc.covariate_kernel) {
        xk = *mc.covariate_kernel;
    } else if (plan.needs_cme()) {
        xk = KernelSpec::gaussian(median_heuristic(detail::vstack(st.apply(train_fold.X), st.apply(test_fold.X))));
    }
    const KernelSpec yk = mc.outcome_kernel
                              ? *mc.outcome_kernel
                              : KernelSpec::gaussian(median_heuristic(detail::vstack(train_fold.Y, test_fold.Y)));

    const SharedBlocks shared = make_shared_blocks(train_fold, test_fold, xk, yk, plan.needs_cme());

    const auto fit = [&](const Eigen::VectorXi& labels) {
        return make_sigma_bundle(shared, train_fold, labels, plan, mc);
    };
    std::vector<std::vector<StatisticValue>> store(static_cast<std::size_t>(pc.m) + 1);
    const auto eval = [&](const SigmaBundle& bundle, const Eigen::VectorXi& labels, int draw) {
        auto values = evaluate_bundle(shared, bundle, plan, labels);
        std::vector<double> cmp;
        cmp.reserve(values.size());
        for (const auto& v : values) cmp.push_back(v.mmd);
        store[static_cast<std::size_t>(draw)] = std::move(values);
        return cmp;
    };

    const EngineResult engine = run_matched_permutation_engine(train_sets_local, test_sets_local, train_fold.T,
                                                               test_fold.T, pc.N, pc.m, pc.seed, fit, eval);

    const double seconds =
        std::chrono::duration_cast<std::chrono::duration<double>>(std::chrono::steady_clock::now() - t_start)
            .count();

    std::vector<TestResult> results;
    for (std::size_t s = 0; s < plan.kinds.size(); ++s) {
        TestResult r;
        r.kind = plan.kinds[s];
        r.observed = store[0][s];
        r.permuted.reserve(static_cast<std::size_t>(pc.m));
        for (int i = 1; i <= pc.m; ++i) r.permuted.push_back(store[static_cast<std::size_t>(i)][s]);
        r.m = pc.m;
        r.p_value = engine.p_values[s];
        r.diagnostics.model_fits = engine.fit_count;
        r.diagnostics.n_sets = static_cast<int>(sets.sets.size());
        r.diagnostics.n_unmatched = static_cast<int>(sets.unmatched.size());
        r.diagnostics.caliper = caliper;
        r.diagnostics.n_train = static_cast<int>(train_fold.n());
        r.diagnostics.n_test = static_cast<int>(test_fold.n());
        r.diagnostics.covariate_kernel_fingerprint = xk.fingerprint();
        r.diagnostics.outcome_kernel_fingerprint = yk.fingerprint();
        r.diagnostics.covariate_bandwidth = xk.bandwidth;
        r.diagnostics.outcome_bandwidth = yk.bandwidth;
        int susp = 0;
        for (const auto& store_draw : store)
            if (store_draw[s].suspicious_negative) ++susp;
        r.diagnostics.suspicious_negatives = susp;
        r.diagnostics.seconds = seconds;
        results.push_back(std::move(r));
    }
    return results;
}

inline TestResult run_permutation_test(const Dataset& data, StatisticKind kind, const PermutationPlanConfig& pc,
                                       const ModelsConfig& mc = {}, int dett_t = 0, int dett_t_prime = 1,
                                       DettEstimator dett_estimator = DettEstimator::weighted,
                                       NormalizeMode dett_normalize = NormalizeMode::count) {
    StatisticPlan plan;
    plan.kinds = {kind};
    plan.dett_t = dett_t;
    plan.dett_t_prime = dett_t_prime;
    plan.dett_estimator = dett_estimator;
    plan.dett_normalize = dett_normalize;
    return run_permutation_test_multi(data, plan, pc, mc).front();
}

}  // namespace kte
