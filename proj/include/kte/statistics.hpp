#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "kte/cme.hpp"
#include "kte/dataset.hpp"
#include "kte/kernels.hpp"
#include "kte/propensity.hpp"
#include "kte/standardize.hpp"

namespace kte {

enum class StatisticKind { date, dr_date, dett, dr_dett, mean_dr_baseline };
enum class DettEstimator { weighted, cme };
enum class NormalizeMode { count, self };
enum class SampleRef { train, test };

inline const char* statistic_name(StatisticKind k) {
    switch (k) {
        case StatisticKind::date: return "date";
        case StatisticKind::dr_date: return "dr_date";
        case StatisticKind::dett: return "dett";
        case StatisticKind::dr_dett: return "dr_dett";
        case StatisticKind::mean_dr_baseline: return "dr_mean";
    }
    return "?";
}

/// RKHS mean-embedding estimate as coefficients over concrete outcome
/// points, referenced by fold and row index.
struct Atom {
    SampleRef ref;
    int index;
    double coeff;
};

struct WeightedEmbedding {
    std::vector<Atom> atoms;
};

/// Resolves atom references. `train` may be null when no atom uses it.
struct OutcomeBank {
    const Eigen::MatrixXd* train = nullptr;
    const Eigen::MatrixXd* test = nullptr;
};

struct StatisticValue {
    double mmd_squared = 0.0;      // clamped at 0
    double mmd = 0.0;
    StatisticKind kind = StatisticKind::date;
    double raw_mmd_squared = 0.0;  // pre-clamp value, diagnostics
    bool suspicious_negative = false;
};

/// Clamp tiny negative squared norms; flag ones beyond roundoff scale.
inline StatisticValue make_statistic_value(double raw, StatisticKind kind, double trace_scale = 1.0) {
    StatisticValue v;
    v.kind = kind;
    v.raw_mmd_squared = raw;
    v.mmd_squared = std::max(raw, 0.0);
    v.mmd = std::sqrt(v.mmd_squared);
    v.suspicious_negative = raw < -1e-8 * std::max(trace_scale, 1e-30);
    return v;
}

// ---------------------------------------------------------------------------
// Doubly robust weights
// ---------------------------------------------------------------------------

/// alpha_i = (t_i - e_i) / (e_i (1 - e_i)) with e_i = e(x_i, 1).
/// A zero numerator yields exactly 0 regardless of the denominator, which
/// keeps injected degenerate propensities (e = t) well defined.
inline Eigen::VectorXd date_alpha(const Eigen::VectorXd& e1, const Eigen::VectorXi& T) {
    if (e1.size() != T.size()) throw std::invalid_argument("date_alpha: size mismatch");
    Eigen::VectorXd a(T.size());
    for (Eigen::Index i = 0; i < T.size(); ++i) {
        const double diff = static_cast<double>(T[i]) - e1[i];
        a[i] = (diff == 0.0) ? 0.0 : diff / (e1[i] * (1.0 - e1[i]));
    }
    return a;
}

/// beta_i = (1{t_i = t} - e(x_i, t)) / e(x_i, t); the t = 1 case is the
/// classic (t_i - e_i) / e_i.
inline Eigen::VectorXd dett_beta(const Eigen::VectorXd& e1, const Eigen::VectorXi& T, int t) {
    if (e1.size() != T.size()) throw std::invalid_argument("dett_beta: size mismatch");
    Eigen::VectorXd b(T.size());
    for (Eigen::Index i = 0; i < T.size(); ++i) {
        const double et = (t == 1) ? e1[i] : 1.0 - e1[i];
        const double diff = (T[i] == t ? 1.0 : 0.0) - et;
        b[i] = (diff == 0.0) ? 0.0 : diff / et;
    }
    return b;
}

struct DrWeights {
    Eigen::VectorXd alpha;
    Eigen::VectorXd beta;  // t = 1 orientation
};

inline DrWeights dr_weights(const Eigen::VectorXd& e1, const Eigen::VectorXi& T) {
    return {date_alpha(e1, T), dett_beta(e1, T, 1)};
}

// ---------------------------------------------------------------------------
// Embedding constructions
// ---------------------------------------------------------------------------

namespace detail {
inline void push_nonzero(WeightedEmbedding& emb, SampleRef ref, int index, double coeff) {
    if (coeff != 0.0) emb.atoms.push_back({ref, index, coeff});
}
}  // namespace detail

/// Empirical embedding of the test outcomes in one arm: uniform 1/n_arm
/// coefficients.
inline WeightedEmbedding empirical_embedding(const Eigen::VectorXi& T, int arm) {
    int n_arm = 0;
    for (Eigen::Index i = 0; i < T.size(); ++i) n_arm += (T[i] == arm);
    if (n_arm == 0) throw std::invalid_argument("empirical_embedding: empty arm");
    WeightedEmbedding emb;
    for (Eigen::Index i = 0; i < T.size(); ++i)
        if (T[i] == arm) emb.atoms.push_back({SampleRef::test, static_cast<int>(i), 1.0 / n_arm});
    return emb;
}

/// Inverse-probability-weighted embedding of Y(t): coefficient
/// 1{t_i = t} / (n e(x_i, t)) on test outcomes. `e_t` holds e(x_i, t).
inline WeightedEmbedding ipw_embedding_with(const Eigen::VectorXd& e_t, const Eigen::VectorXi& T, int t) {
    const auto n = T.size();
    if (n == 0) throw std::invalid_argument("ipw_embedding: empty test set");
    WeightedEmbedding emb;
    for (Eigen::Index i = 0; i < n; ++i)
        if (T[i] == t) detail::push_nonzero(emb, SampleRef::test, static_cast<int>(i), 1.0 / (static_cast<double>(n) * e_t[i]));
    return emb;
}

inline WeightedEmbedding ipw_embedding(const Dataset& test, const PropensityModel& prop, int t) {
    return ipw_embedding_with(predict_e_all(prop, test.X, t), test.T, t);
}

/// Doubly robust embedding of Y(t): IPW-corrected test outcomes plus the
/// conditional-mean-embedding term averaged over the test set. `V` holds
/// the CME weight columns for the test points (arm size x n_test).
inline WeightedEmbedding dr_embedding_with(const Eigen::VectorXd& e_t, const Eigen::VectorXi& T,
                                           const Eigen::MatrixXd& V, const std::vector<int>& train_arm_rows,
                                           int t) {
    const auto n = T.size();
    if (n == 0) throw std::invalid_argument("dr_embedding: empty test set");
    if (V.cols() != n) throw std::invalid_argument("dr_embedding: weight matrix column mismatch");
    WeightedEmbedding emb;
    Eigen::VectorXd test_scale(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double ind_over_e = (T[i] == t) ? 1.0 / e_t[i] : 0.0;
        if (T[i] == t)
            detail::push_nonzero(emb, SampleRef::test, static_cast<int>(i),
                                 1.0 / (static_cast<double>(n) * e_t[i]));  // same expression as the ipw path
        test_scale[i] = 1.0 - ind_over_e;
    }
    const Eigen::VectorXd train_coeff = V * test_scale / static_cast<double>(n);
    for (Eigen::Index j = 0; j < train_coeff.size(); ++j)
        detail::push_nonzero(emb, SampleRef::train, train_arm_rows[static_cast<std::size_t>(j)], train_coeff[j]);
    return emb;
}

inline WeightedEmbedding dr_embedding(const Dataset& test, const PropensityModel& prop, const CmeModel& cme_t,
                                      int t) {
    if (cme_t.arm != t) throw std::invalid_argument("dr_embedding: CME arm mismatch");
    return dr_embedding_with(predict_e_all(prop, test.X, t), test.T, cme_weight_matrix(cme_t, test.X),
                             cme_t.train_indices, t);
}

/// Plug-in estimate of mu_{Y(t) | T = t'} by averaging CME weights over
/// the test samples in arm t'.
inline WeightedEmbedding dett_embedding_cme(const Dataset& test, const CmeModel& cme_t, int t, int t_prime) {
    if (t == t_prime) throw std::invalid_argument("dett_embedding_cme: t and t' must differ");
    if (cme_t.arm != t) throw std::invalid_argument("dett_embedding_cme: CME arm mismatch");
    const std::vector<int> rows = test.arm_indices(t_prime);
    if (rows.empty()) throw std::invalid_argument("dett_embedding_cme: no test samples in arm t'");
    const Eigen::MatrixXd V = cme_weight_matrix(cme_t, test.X);
    Eigen::VectorXd coeff = Eigen::VectorXd::Zero(V.rows());
    for (int i : rows) coeff += V.col(i);
    coeff /= static_cast<double>(rows.size());
    WeightedEmbedding emb;
    for (Eigen::Index j = 0; j < coeff.size(); ++j)
        detail::push_nonzero(emb, SampleRef::train, cme_t.train_indices[static_cast<std::size_t>(j)], coeff[j]);
    return emb;
}

/// Weighted plug-in estimate of mu_{Y(t) | T = t'}: arm-t test outcomes
/// weighted by the inverse propensity odds w(x, t), normalized either by
/// the arm-t' count or by the weight total (Hajek).
inline WeightedEmbedding dett_embedding_weighted(const Dataset& test, const PropensityModel& prop, int t,
                                                 int t_prime, NormalizeMode normalize) {
    if (t == t_prime) throw std::invalid_argument("dett_embedding_weighted: t and t' must differ");
    const Eigen::VectorXd e_t = predict_e_all(prop, test.X, t);
    double z = 0.0;
    if (normalize == NormalizeMode::count) {
        z = static_cast<double>(test.arm_count(t_prime));
    } else {
        for (Eigen::Index i = 0; i < test.n(); ++i)
            if (test.T[i] == t) z += (1.0 - e_t[i]) / e_t[i];
    }
    if (z == 0.0) throw std::invalid_argument("dett_embedding_weighted: zero normalization");
    WeightedEmbedding emb;
    for (Eigen::Index i = 0; i < test.n(); ++i)
        if (test.T[i] == t)
            detail::push_nonzero(emb, SampleRef::test, static_cast<int>(i), (1.0 - e_t[i]) / e_t[i] / z);
    return emb;
}

/// Doubly robust estimate of mu_{Y(t) | T = t'}.
inline WeightedEmbedding dr_ett_embedding_with(const Eigen::VectorXd& e_t, const Eigen::VectorXi& T,
                                               const Eigen::MatrixXd& V, const std::vector<int>& train_arm_rows,
                                               int t, int t_prime) {
    int n_tp = 0;
    for (Eigen::Index i = 0; i < T.size(); ++i) n_tp += (T[i] == t_prime);
    if (n_tp == 0) throw std::invalid_argument("dr_ett_embedding: no test samples in arm t'");
    WeightedEmbedding emb;
    Eigen::VectorXd cme_scale(T.size());
    for (Eigen::Index i = 0; i < T.size(); ++i) {
        const double w = (1.0 - e_t[i]) / e_t[i];
        if (T[i] == t)
            detail::push_nonzero(emb, SampleRef::test, static_cast<int>(i), w / static_cast<double>(n_tp));
        cme_scale[i] = (T[i] == t_prime ? 1.0 : 0.0) - (T[i] == t ? w : 0.0);
    }
    const Eigen::VectorXd train_coeff = V * cme_scale / static_cast<double>(n_tp);
    for (Eigen::Index j = 0; j < train_coeff.size(); ++j)
        detail::push_nonzero(emb, SampleRef::train, train_arm_rows[static_cast<std::size_t>(j)], train_coeff[j]);
    return emb;
}

inline WeightedEmbedding dr_ett_embedding(const Dataset& test, const PropensityModel& prop, const CmeModel& cme_t,
                                          int t, int t_prime) {
    if (t == t_prime) throw std::invalid_argument("dr_ett_embedding: t and t' must differ");
    if (cme_t.arm != t) throw std::invalid_argument("dr_ett_embedding: CME arm mismatch");
    return dr_ett_embedding_with(predict_e_all(prop, test.X, t), test.T, cme_weight_matrix(cme_t, test.X),
                                 cme_t.train_indices, t, t_prime);
}

// ---------------------------------------------------------------------------
// Generic MMD between coefficient embeddings
// ---------------------------------------------------------------------------

/// Coalesced signed coefficients over the union of referenced outcome rows.
inline std::pair<Eigen::MatrixXd, Eigen::VectorXd> materialize_difference(const WeightedEmbedding& a,
                                                                          const WeightedEmbedding& b,
                                                                          const OutcomeBank& bank) {
    std::map<std::pair<int, int>, double> coeffs;  // (ref, row) -> signed coefficient
    const auto add = [&](const WeightedEmbedding& e, double sign) {
        for (const Atom& at : e.atoms)
            coeffs[{static_cast<int>(at.ref), at.index}] += sign * at.coeff;
    };
    add(a, 1.0);
    add(b, -1.0);
    Eigen::Index p = 0;
    if (bank.test) p = bank.test->cols();
    else if (bank.train) p = bank.train->cols();
    Eigen::MatrixXd points(static_cast<Eigen::Index>(coeffs.size()), p);
    Eigen::VectorXd c(static_cast<Eigen::Index>(coeffs.size()));
    Eigen::Index r = 0;
    for (const auto& [key, value] : coeffs) {
        const Eigen::MatrixXd* src = (key.first == static_cast<int>(SampleRef::train)) ? bank.train : bank.test;
        if (src == nullptr || key.second < 0 || key.second >= src->rows())
            throw std::invalid_argument("mmd_between: unresolvable atom reference");
        points.row(r) = src->row(key.second);
        c[r] = value;
        ++r;
    }
    return {std::move(points), std::move(c)};
}

/// Squared MMD as c^T L c over the coalesced difference coefficients.
inline StatisticValue mmd_between(const WeightedEmbedding& a, const WeightedEmbedding& b,
                                  const KernelSpec& outcome_kernel, const OutcomeBank& bank,
                                  StatisticKind kind = StatisticKind::date) {
    auto [points, c] = materialize_difference(a, b, bank);
    if (points.rows() == 0) return make_statistic_value(0.0, kind);
    const Eigen::MatrixXd L = gram(outcome_kernel, points, points);
    const double raw = c.dot(L * c);
    const double scale = (c.array().square() * L.diagonal().array()).sum();
    return make_statistic_value(raw, kind, scale);
}

inline double embedding_norm_sq(const WeightedEmbedding& e, const KernelSpec& outcome_kernel,
                                const OutcomeBank& bank) {
    return mmd_between(e, WeightedEmbedding{}, outcome_kernel, bank).raw_mmd_squared;
}

// ---------------------------------------------------------------------------
// Closed-form quadratic statistics
// ---------------------------------------------------------------------------

namespace detail {
inline Eigen::MatrixXd rows_of(const Eigen::MatrixXd& M, const std::vector<int>& idx) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), M.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = M.row(idx[r]);
    return out;
}
}  // namespace detail

/// DR-DATE squared statistic evaluated directly as a quadratic form in
/// alpha, without constructing atom lists:
///   m^2 mmd^2 = a' L_te a - 2 a' L(te,0) u0 - 2 a' L(te,1) u1
///             + u0' L00 u0 + u1' L11 u1 + 2 u0' L01 u1,
/// where u_t collects the e-scaled CME weight averages. Must agree with
/// the embedding route to floating-point accuracy.
inline StatisticValue dr_date_statistic_closed_form(const Dataset& test, const Dataset& train,
                                                    const PropensityModel& prop, const CmeModel& cme0,
                                                    const CmeModel& cme1, const KernelSpec& outcome_kernel) {
    if (cme0.arm != 0 || cme1.arm != 1) throw std::invalid_argument("dr_date closed form: CME arms must be 0 and 1");
    const auto m = test.n();
    const Eigen::VectorXd e1 = predict_e_all(prop, test.X, 1);
    const Eigen::VectorXd alpha = date_alpha(e1, test.T);

    const Eigen::MatrixXd V0 = cme_weight_matrix(cme0, test.X);
    const Eigen::MatrixXd V1 = cme_weight_matrix(cme1, test.X);
    const Eigen::VectorXd u0 = V0 * (e1.array() * alpha.array()).matrix();
    const Eigen::VectorXd u1 = V1 * ((1.0 - e1.array()) * alpha.array()).matrix();

    const Eigen::MatrixXd Y0 = detail::rows_of(train.Y, cme0.train_indices);
    const Eigen::MatrixXd Y1 = detail::rows_of(train.Y, cme1.train_indices);
    const Eigen::MatrixXd L_te = gram(outcome_kernel, test.Y, test.Y);
    const Eigen::MatrixXd L_t0 = gram(outcome_kernel, test.Y, Y0);
    const Eigen::MatrixXd L_t1 = gram(outcome_kernel, test.Y, Y1);
    const Eigen::MatrixXd L00 = gram(outcome_kernel, Y0, Y0);
    const Eigen::MatrixXd L11 = gram(outcome_kernel, Y1, Y1);
    const Eigen::MatrixXd L01 = gram(outcome_kernel, Y0, Y1);

    const double quad = alpha.dot(L_te * alpha) - 2.0 * alpha.dot(L_t0 * u0) - 2.0 * alpha.dot(L_t1 * u1) +
                        u0.dot(L00 * u0) + u1.dot(L11 * u1) + 2.0 * u0.dot(L01 * u1);
    const double scale = std::abs(alpha.dot(L_te * alpha));
    return make_statistic_value(quad / (static_cast<double>(m) * static_cast<double>(m)), StatisticKind::dr_date,
                                scale / (static_cast<double>(m) * static_cast<double>(m)));
}

/// DR-DETT squared statistic:
///   n_t'^2 mmd^2 = b' (L_te - 2 L(te,t) V - (V' L(t,te))'... ) b
/// expressed through u = V b:
///   b' L_te b - 2 b' L(te,t) u + u' L_tt u.
inline StatisticValue dr_dett_statistic_closed_form(const Dataset& test, const Dataset& train,
                                                    const PropensityModel& prop, const CmeModel& cme_t,
                                                    const KernelSpec& outcome_kernel, int t, int t_prime) {
    if (t == t_prime) throw std::invalid_argument("dr_dett closed form: t and t' must differ");
    if (cme_t.arm != t) throw std::invalid_argument("dr_dett closed form: CME arm mismatch");
    const int n_tp = test.arm_count(t_prime);
    if (n_tp == 0) throw std::invalid_argument("dr_dett closed form: no test samples in arm t'");

    const Eigen::VectorXd e1 = predict_e_all(prop, test.X, 1);
    const Eigen::VectorXd beta = dett_beta(e1, test.T, t);
    const Eigen::MatrixXd V = cme_weight_matrix(cme_t, test.X);
    const Eigen::VectorXd u = V * beta;

    const Eigen::MatrixXd Yt = detail::rows_of(train.Y, cme_t.train_indices);
    const Eigen::MatrixXd L_te = gram(outcome_kernel, test.Y, test.Y);
    const Eigen::MatrixXd L_tt = gram(outcome_kernel, test.Y, Yt);
    const Eigen::MatrixXd L_aa = gram(outcome_kernel, Yt, Yt);

    const double quad = beta.dot(L_te * beta) - 2.0 * beta.dot(L_tt * u) + u.dot(L_aa * u);
    const double denom = static_cast<double>(n_tp) * static_cast<double>(n_tp);
    return make_statistic_value(quad / denom, StatisticKind::dr_dett, std::abs(beta.dot(L_te * beta)) / denom);
}

/// Plug-in DATE: MMD between the two IPW embeddings.
inline StatisticValue plug_in_date_statistic(const Dataset& test, const PropensityModel& prop,
                                             const KernelSpec& outcome_kernel) {
    const OutcomeBank bank{nullptr, &test.Y};
    StatisticValue v = mmd_between(ipw_embedding(test, prop, 1), ipw_embedding(test, prop, 0), outcome_kernel,
                                   bank, StatisticKind::date);
    return v;
}

/// Plug-in DETT with the odds-weighted estimator.
inline StatisticValue plug_in_dett_statistic(const Dataset& test, const PropensityModel& prop,
                                             const KernelSpec& outcome_kernel, int t, int t_prime,
                                             NormalizeMode normalize = NormalizeMode::count) {
    const OutcomeBank bank{nullptr, &test.Y};
    StatisticValue v = mmd_between(dett_embedding_weighted(test, prop, t, t_prime, normalize),
                                   empirical_embedding(test.T, t_prime), outcome_kernel, bank,
                                   StatisticKind::dett);
    return v;
}

/// Plug-in DETT with the CME-averaged estimator.
inline StatisticValue plug_in_dett_statistic(const Dataset& test, const Dataset& train, const CmeModel& cme_t,
                                             const KernelSpec& outcome_kernel, int t, int t_prime) {
    const OutcomeBank bank{&train.Y, &test.Y};
    StatisticValue v = mmd_between(dett_embedding_cme(test, cme_t, t, t_prime),
                                   empirical_embedding(test.T, t_prime), outcome_kernel, bank,
                                   StatisticKind::dett);
    return v;
}

// ---------------------------------------------------------------------------
// Scalar AIPW mean-difference baseline
// ---------------------------------------------------------------------------

namespace detail {
/// Ridge solve on [X, 1] with the penalty applied to every coefficient,
/// including the intercept; this makes the regression coincide with a
/// linear-kernel CME on intercept-augmented covariates.
inline Eigen::VectorXd ridge_with_intercept(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double lambda) {
    const Eigen::Index d = X.cols();
    Eigen::MatrixXd Z(X.rows(), d + 1);
    Z.leftCols(d) = X;
    Z.col(d).setOnes();
    Eigen::MatrixXd A = Z.transpose() * Z;
    A.diagonal().array() += lambda;
    return A.ldlt().solve(Z.transpose() * y);
}

inline Eigen::VectorXd affine_predict(const Eigen::MatrixXd& X, const Eigen::VectorXd& theta) {
    return X * theta.head(X.cols()) + Eigen::VectorXd::Constant(X.rows(), theta[X.cols()]);
}
}  // namespace detail

/// |AIPW estimate of E[Y(1)] - E[Y(0)]| with per-arm linear ridge outcome
/// regressions fit on the training fold. Scalar outcomes only. Equals the
/// DR-DATE statistic under a linear outcome kernel and a linear-kernel CME
/// on intercept-augmented covariates with the same ridge.
inline double dr_mean_baseline(const Dataset& test, const Dataset& train, const PropensityModel& prop,
                               double lambda = 1e-6) {
    if (test.outcome_dim() != 1 || train.outcome_dim() != 1)
        throw std::invalid_argument("dr_mean_baseline: scalar outcome required");
    const std::vector<int> a0 = train.arm_indices(0);
    const std::vector<int> a1 = train.arm_indices(1);
    if (a0.empty() || a1.empty()) throw std::invalid_argument("dr_mean_baseline: both training arms required");
    const Eigen::VectorXd th0 =
        detail::ridge_with_intercept(detail::rows_of(train.X, a0), detail::rows_of(train.Y, a0).col(0), lambda);
    const Eigen::VectorXd th1 =
        detail::ridge_with_intercept(detail::rows_of(train.X, a1), detail::rows_of(train.Y, a1).col(0), lambda);
    const Eigen::VectorXd mu0 = detail::affine_predict(test.X, th0);
    const Eigen::VectorXd mu1 = detail::affine_predict(test.X, th1);
    const Eigen::VectorXd e1 = predict_e_all(prop, test.X, 1);
    const Eigen::VectorXd alpha = date_alpha(e1, test.T);
    const Eigen::ArrayXd resid =
        test.Y.col(0).array() - (1.0 - e1.array()) * mu1.array() - e1.array() * mu0.array();
    return std::abs((alpha.array() * resid).mean());
}

// ---------------------------------------------------------------------------
// Amortized evaluation for permutation testing
// ---------------------------------------------------------------------------

/// Which statistics to evaluate and how the DETT ones are oriented.
struct StatisticPlan {
    std::vector<StatisticKind> kinds = {StatisticKind::dr_date};
    int dett_t = 0;        // counterfactual arm of the DETT target
    int dett_t_prime = 1;  // conditioning arm (1: effect on the treated)
    DettEstimator dett_estimator = DettEstimator::weighted;
    NormalizeMode dett_normalize = NormalizeMode::count;

    bool has(StatisticKind k) const {
        return std::find(kinds.begin(), kinds.end(), k) != kinds.end();
    }
    bool needs_cme() const {
        return has(StatisticKind::dr_date) || has(StatisticKind::dr_dett) ||
               (has(StatisticKind::dett) && dett_estimator == DettEstimator::cme);
    }
    bool needs_cme_arm(int arm) const {
        if (has(StatisticKind::dr_date)) return true;
        const bool dett_cme = has(StatisticKind::dett) && dett_estimator == DettEstimator::cme;
        return (has(StatisticKind::dr_dett) || dett_cme) && arm == dett_t;
    }
};

struct ModelsConfig {
    double clip_delta = 0.03;
    double logistic_ridge = -1.0;  // < 0: 1e-6 * n
    int logistic_max_iter = 100;
    double logistic_tol = 1e-8;
    std::optional<double> cme_lambda;      // default: Gram-scaled n_t^{-1/2}
    double caliper = -1.0;                 // < 0: 0.2 sd of logit e; +inf: disabled
    int controls_per_set = 1;
    std::optional<KernelSpec> covariate_kernel;  // default: gaussian, pooled median heuristic
    std::optional<KernelSpec> outcome_kernel;
    double baseline_lambda = 1e-6;
};

/// Blocks that depend on neither the train labeling nor the test labels.
/// Outcome Grams span the full train fold so per-labeling arm blocks are
/// row/column subsets.
struct SharedBlocks {
    KernelSpec covariate_kernel, outcome_kernel;
    Standardizer standardizer;
    Eigen::MatrixXd Xtr_raw, Xte_raw;
    Eigen::MatrixXd Xtr_s, Xte_s;
    Eigen::MatrixXd Ytr, Yte;
    Eigen::MatrixXd L_te;     // n_te x n_te
    Eigen::MatrixXd L_te_tr;  // n_te x n_tr (empty unless train blocks requested)
    Eigen::MatrixXd L_tr;     // n_tr x n_tr (empty unless train blocks requested)
    Eigen::MatrixXd K_tr_te;  // n_tr x n_te (empty unless train blocks requested)
};

inline SharedBlocks make_shared_blocks(const Dataset& train, const Dataset& test, const KernelSpec& xk,
                                       const KernelSpec& yk, bool with_train_blocks) {
    SharedBlocks s;
    s.covariate_kernel = xk;
    s.outcome_kernel = yk;
    s.standardizer = Standardizer::fit(train.X);
    s.Xtr_raw = train.X;
    s.Xte_raw = test.X;
    s.Xtr_s = s.standardizer.apply(train.X);
    s.Xte_s = s.standardizer.apply(test.X);
    s.Ytr = train.Y;
    s.Yte = test.Y;
    s.L_te = gram(yk, test.Y, test.Y);
    if (with_train_blocks) {
        s.L_te_tr = gram(yk, test.Y, train.Y);
        s.L_tr = gram(yk, train.Y, train.Y);
        s.K_tr_te = gram(xk, s.Xtr_s, s.Xte_s);
    }
    return s;
}

/// Per-train-labeling fit products. Everything downstream of the permuted
/// test labels is recomputed per draw; everything here is reused.
struct SigmaBundle {
    PropensityModel prop;
    Eigen::VectorXd e_test;      // clipped e(x_i, 1) on the test fold
    std::vector<int> arm0, arm1; // train-fold rows per arm under this labeling
    Eigen::MatrixXd V0, V1;      // CME weights over test points; empty when unused
    Eigen::VectorXd mu0, mu1;    // baseline regression predictions, empty when unused
    double cme_lambda0 = 0.0, cme_lambda1 = 0.0;
    std::uint64_t xk_fingerprint = 0, yk_fingerprint = 0;
};

inline SigmaBundle make_sigma_bundle(const SharedBlocks& shared, const Dataset& train_fold,
                                     const Eigen::VectorXi& train_labels, const StatisticPlan& plan,
                                     const ModelsConfig& cfg) {
    SigmaBundle b;
    b.xk_fingerprint = shared.covariate_kernel.fingerprint();
    b.yk_fingerprint = shared.outcome_kernel.fingerprint();

    LogisticFitConfig lcfg;
    lcfg.max_iter = cfg.logistic_max_iter;
    lcfg.tol = cfg.logistic_tol;
    lcfg.ridge = cfg.logistic_ridge;
    lcfg.clip_delta = cfg.clip_delta;
    b.prop = fit_logistic(train_fold.X, train_labels, lcfg);
    b.e_test = predict_e_all(b.prop, shared.Xte_raw, 1);

    for (Eigen::Index i = 0; i < train_labels.size(); ++i)
        (train_labels[i] == 1 ? b.arm1 : b.arm0).push_back(static_cast<int>(i));

    Dataset relabeled = train_fold;
    relabeled.T = train_labels;

    for (int arm : {0, 1}) {
        if (!plan.needs_cme_arm(arm)) continue;
        CmeModel cme = fit_cme(relabeled, arm, shared.covariate_kernel, cfg.cme_lambda, shared.standardizer);
        const std::vector<int>& rows = (arm == 0) ? b.arm0 : b.arm1;
        Eigen::MatrixXd K_arm_te(static_cast<Eigen::Index>(rows.size()), shared.K_tr_te.cols());
        for (std::size_t r = 0; r < rows.size(); ++r)
            K_arm_te.row(static_cast<Eigen::Index>(r)) = shared.K_tr_te.row(rows[r]);
        Eigen::MatrixXd V = cme.weight_matrix * K_arm_te;
        if (arm == 0) {
            b.V0 = std::move(V);
            b.cme_lambda0 = cme.lambda;
        } else {
            b.V1 = std::move(V);
            b.cme_lambda1 = cme.lambda;
        }
    }

    if (plan.has(StatisticKind::mean_dr_baseline)) {
        if (train_fold.outcome_dim() != 1)
            throw std::invalid_argument("mean_dr_baseline: scalar outcome required");
        const Eigen::VectorXd th0 = detail::ridge_with_intercept(
            detail::rows_of(train_fold.X, b.arm0), detail::rows_of(train_fold.Y, b.arm0).col(0),
            cfg.baseline_lambda);
        const Eigen::VectorXd th1 = detail::ridge_with_intercept(
            detail::rows_of(train_fold.X, b.arm1), detail::rows_of(train_fold.Y, b.arm1).col(0),
            cfg.baseline_lambda);
        b.mu0 = detail::affine_predict(shared.Xte_raw, th0);
        b.mu1 = detail::affine_predict(shared.Xte_raw, th1);
    }
    return b;
}

namespace detail {
/// Scatter an arm-local vector into a full train-fold vector.
inline Eigen::VectorXd scatter(const Eigen::VectorXd& v, const std::vector<int>& rows, Eigen::Index n) {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(n);
    for (std::size_t r = 0; r < rows.size(); ++r) out[rows[r]] += v[static_cast<Eigen::Index>(r)];
    return out;
}
}  // namespace detail

/// Evaluate every planned statistic for one test labeling against one
/// fitted bundle. Only the treatment labels vary across permutations.
inline std::vector<StatisticValue> evaluate_bundle(const SharedBlocks& shared, const SigmaBundle& bundle,
                                                   const StatisticPlan& plan, const Eigen::VectorXi& test_labels) {
    const auto m = shared.L_te.rows();
    if (test_labels.size() != m) throw std::invalid_argument("evaluate_bundle: label size mismatch");
    const double md = static_cast<double>(m);
    const Eigen::VectorXd& e = bundle.e_test;

    std::optional<Eigen::VectorXd> alpha;
    const auto get_alpha = [&]() -> const Eigen::VectorXd& {
        if (!alpha) alpha = date_alpha(e, test_labels);
        return *alpha;
    };

    const int t = plan.dett_t;
    const int tp = plan.dett_t_prime;
    int n_tp = 0;
    for (Eigen::Index i = 0; i < m; ++i) n_tp += (test_labels[i] == tp);

    std::vector<StatisticValue> out;
    out.reserve(plan.kinds.size());
    for (StatisticKind kind : plan.kinds) {
        switch (kind) {
            case StatisticKind::date: {
                const Eigen::VectorXd& a = get_alpha();
                const double raw = a.dot(shared.L_te * a) / (md * md);
                out.push_back(make_statistic_value(raw, kind, std::abs(raw)));
                break;
            }
            case StatisticKind::dr_date: {
                const Eigen::VectorXd& a = get_alpha();
                const Eigen::VectorXd u0 = bundle.V0 * (e.array() * a.array()).matrix();
                const Eigen::VectorXd u1 = bundle.V1 * ((1.0 - e.array()) * a.array()).matrix();
                const Eigen::VectorXd w = detail::scatter(u0, bundle.arm0, shared.L_tr.rows()) +
                                          detail::scatter(u1, bundle.arm1, shared.L_tr.rows());
                const double term_te = a.dot(shared.L_te * a);
                const double raw = term_te - 2.0 * a.dot(shared.L_te_tr * w) + w.dot(shared.L_tr * w);
                out.push_back(make_statistic_value(raw / (md * md), kind, std::abs(term_te) / (md * md)));
                break;
            }
            case StatisticKind::dett: {
                if (n_tp == 0) throw std::runtime_error("dett: no test samples in arm t'");
                Eigen::VectorXd c(m);
                if (plan.dett_estimator == DettEstimator::weighted) {
                    double z = static_cast<double>(n_tp);
                    if (plan.dett_normalize == NormalizeMode::self) {
                        z = 0.0;
                        for (Eigen::Index i = 0; i < m; ++i) {
                            const double et = (t == 1) ? e[i] : 1.0 - e[i];
                            if (test_labels[i] == t) z += (1.0 - et) / et;
                        }
                        if (z == 0.0) throw std::runtime_error("dett: zero self-normalization");
                    }
                    for (Eigen::Index i = 0; i < m; ++i) {
                        const double et = (t == 1) ? e[i] : 1.0 - e[i];
                        c[i] = (test_labels[i] == t ? (1.0 - et) / et / z : 0.0) -
                               (test_labels[i] == tp ? 1.0 / n_tp : 0.0);
                    }
                    const double raw = c.dot(shared.L_te * c);
                    out.push_back(make_statistic_value(raw, kind, std::abs(raw)));
                } else {
                    // CME-averaged plug-in against the empirical arm-t' embedding
                    Eigen::VectorXd mask = Eigen::VectorXd::Zero(m);
                    for (Eigen::Index i = 0; i < m; ++i) mask[i] = (test_labels[i] == tp) ? 1.0 : 0.0;
                    const Eigen::MatrixXd& V = (t == 0) ? bundle.V0 : bundle.V1;
                    const std::vector<int>& rows = (t == 0) ? bundle.arm0 : bundle.arm1;
                    const Eigen::VectorXd w = detail::scatter(V * mask, rows, shared.L_tr.rows());
                    c = -mask;
                    const double np = static_cast<double>(n_tp);
                    const double raw =
                        (c.dot(shared.L_te * c) + 2.0 * c.dot(shared.L_te_tr * w) + w.dot(shared.L_tr * w)) /
                        (np * np);
                    out.push_back(make_statistic_value(raw, kind, std::abs(raw)));
                }
                break;
            }
            case StatisticKind::dr_dett: {
                if (n_tp == 0) throw std::runtime_error("dr_dett: no test samples in arm t'");
                const Eigen::VectorXd beta = dett_beta(e, test_labels, t);
                const Eigen::MatrixXd& V = (t == 0) ? bundle.V0 : bundle.V1;
                const std::vector<int>& rows = (t == 0) ? bundle.arm0 : bundle.arm1;
                const Eigen::VectorXd w = detail::scatter(V * beta, rows, shared.L_tr.rows());
                const double np = static_cast<double>(n_tp);
                const double term_te = beta.dot(shared.L_te * beta);
                const double raw = term_te - 2.0 * beta.dot(shared.L_te_tr * w) + w.dot(shared.L_tr * w);
                out.push_back(make_statistic_value(raw / (np * np), kind, std::abs(term_te) / (np * np)));
                break;
            }
            case StatisticKind::mean_dr_baseline: {
                const Eigen::VectorXd& a = get_alpha();
                const Eigen::ArrayXd resid = shared.Yte.col(0).array() -
                                             (1.0 - e.array()) * bundle.mu1.array() -
                                             e.array() * bundle.mu0.array();
                const double psi = (a.array() * resid).mean();
                StatisticValue v;
                v.kind = kind;
                v.mmd = std::abs(psi);
                v.mmd_squared = psi * psi;
                v.raw_mmd_squared = psi * psi;
                out.push_back(v);
                break;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Embedding error against a large oracle sample
// ---------------------------------------------------------------------------

/// Mean Gram entry over all ordered pairs of rows, computed in tiles so a
/// 1e5-row oracle sample never materializes its full Gram.
inline double mean_gram_value(const KernelSpec& k, const Eigen::MatrixXd& A, Eigen::Index block = 2048) {
    const Eigen::Index n = A.rows();
    if (n == 0) throw std::invalid_argument("mean_gram_value: empty sample");
    long double total = 0.0L;
    for (Eigen::Index i0 = 0; i0 < n; i0 += block) {
        const Eigen::Index bi = std::min(block, n - i0);
        for (Eigen::Index j0 = 0; j0 < n; j0 += block) {
            const Eigen::Index bj = std::min(block, n - j0);
            total += gram(k, A.middleRows(i0, bi), A.middleRows(j0, bj)).sum();
        }
    }
    return static_cast<double>(total / (static_cast<long double>(n) * static_cast<long double>(n)));
}

/// Squared RKHS distance between the coefficient embedding (points, c) and
/// the empirical embedding of `oracle`. Pass a precomputed
/// mean_gram_value(k, oracle) to amortize the oracle self term.
inline double embedding_error_sq(const KernelSpec& k, const Eigen::MatrixXd& points, const Eigen::VectorXd& c,
                                 const Eigen::MatrixXd& oracle,
                                 std::optional<double> oracle_self = std::nullopt,
                                 Eigen::Index block = 2048) {
    if (points.rows() != c.size()) throw std::invalid_argument("embedding_error_sq: size mismatch");
    double self = 0.0;
    if (points.rows() > 0) {
        const Eigen::MatrixXd L = gram(k, points, points);
        self = c.dot(L * c);
    }
    long double cross = 0.0L;
    const Eigen::Index n = oracle.rows();
    if (points.rows() > 0) {
        for (Eigen::Index j0 = 0; j0 < n; j0 += block) {
            const Eigen::Index bj = std::min(block, n - j0);
            cross += (c.transpose() * gram(k, points, oracle.middleRows(j0, bj))).sum();
        }
    }
    const double oself = oracle_self ? *oracle_self : mean_gram_value(k, oracle, block);
    return self - 2.0 * static_cast<double>(cross / static_cast<long double>(n)) + oself;
}

/// Convenience overload resolving a WeightedEmbedding against its bank.
inline double embedding_error_sq(const KernelSpec& k, const WeightedEmbedding& emb, const OutcomeBank& bank,
                                 const Eigen::MatrixXd& oracle,
                                 std::optional<double> oracle_self = std::nullopt) {
    auto [points, c] = materialize_difference(emb, WeightedEmbedding{}, bank);
    return embedding_error_sq(k, points, c, oracle, oracle_self);
}

}  // namespace kte
