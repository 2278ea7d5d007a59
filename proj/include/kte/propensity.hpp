#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "kte/standardize.hpp"

namespace kte {

inline double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

/// Linear-logistic propensity model. `coefficients` has length d + 1 with
/// the intercept last and applies to raw (unstandardized) covariates.
/// Estimates are clipped into [clip_delta, 1 - clip_delta]; the bounds are
/// symmetric so e(x,0) = 1 - e(x,1) holds exactly before and after clipping.
struct PropensityModel {
    Eigen::VectorXd coefficients;
    double clip_delta = 0.03;
    bool converged = true;
    int iterations = 0;
    double grad_norm = 0.0;

    double linear_predictor(const Eigen::VectorXd& x) const {
        if (x.size() + 1 != coefficients.size())
            throw std::invalid_argument("propensity: dimension mismatch");
        return coefficients.head(x.size()).dot(x) + coefficients[coefficients.size() - 1];
    }
};

struct LogisticFitConfig {
    int max_iter = 100;
    double tol = 1e-8;    // infinity norm of the penalized gradient
    double ridge = -1.0;  // < 0: default 1e-6 * n, applied to slopes only
    double clip_delta = 0.03;
};

inline double predict_e_unclipped(const PropensityModel& m, const Eigen::VectorXd& x, int t) {
    const double p1 = sigmoid(m.linear_predictor(x));
    return (t == 1) ? p1 : 1.0 - p1;
}

inline double predict_e(const PropensityModel& m, const Eigen::VectorXd& x, int t) {
    // clip e(x,1) first, then complement, so e(x,0) == 1 - e(x,1) bit-exactly
    const double p1 = std::min(std::max(sigmoid(m.linear_predictor(x)), m.clip_delta), 1.0 - m.clip_delta);
    return (t == 1) ? p1 : 1.0 - p1;
}

/// Batch of clipped estimates e(x_i, t) over the rows of X.
inline Eigen::VectorXd predict_e_all(const PropensityModel& m, const Eigen::MatrixXd& X, int t) {
    Eigen::VectorXd out(X.rows());
    for (Eigen::Index i = 0; i < X.rows(); ++i) out[i] = predict_e(m, Eigen::VectorXd(X.row(i)), t);
    return out;
}

/// Inverse propensity odds w(x,t) = (1 - e(x,t)) / e(x,t) with clipped e.
inline double inverse_odds(const PropensityModel& m, const Eigen::VectorXd& x, int t) {
    const double e = predict_e(m, x, t);
    return (1.0 - e) / e;
}

/// Unpenalized Bernoulli log-likelihood of T given [X, 1] under raw-space
/// coefficients. Shared by the fit and by test-side reference optimizers.
inline double logistic_loglik(const Eigen::MatrixXd& X, const Eigen::VectorXi& T,
                              const Eigen::VectorXd& coefficients) {
    if (coefficients.size() != X.cols() + 1) throw std::invalid_argument("loglik: dimension mismatch");
    double ll = 0.0;
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        const double z = coefficients.head(X.cols()).dot(X.row(i)) + coefficients[X.cols()];
        // log sigmoid(z) = -log(1 + exp(-z)), stable on both tails
        const double logp = (z >= 0.0) ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
        const double log1mp = logp - z;
        ll += (T[i] == 1) ? logp : log1mp;
    }
    return ll;
}

/// Ridge-penalized logistic regression by iteratively reweighted least
/// squares with step halving. Covariates are standardized internally for
/// conditioning; returned coefficients live in raw-covariate space. The
/// ridge acts on standardized slopes only, never the intercept, so the
/// intercept-only model stays the exact Bernoulli MLE. Non-convergence
/// within max_iter returns the best iterate with converged = false.
inline PropensityModel fit_logistic(const Eigen::MatrixXd& X, const Eigen::VectorXi& T,
                                    const LogisticFitConfig& config = {}) {
    const Eigen::Index n = X.rows();
    const Eigen::Index d = X.cols();
    if (T.size() != n) throw std::invalid_argument("fit_logistic: X and T row mismatch");
    if (!X.allFinite()) throw std::invalid_argument("fit_logistic: non-finite covariates");
    int ones = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (T[i] != 0 && T[i] != 1) throw std::invalid_argument("fit_logistic: treatment must be 0 or 1");
        ones += T[i];
    }
    if (ones == 0 || ones == n) throw std::invalid_argument("fit_logistic: both treatment arms required");
    if (!(config.clip_delta > 0.0 && config.clip_delta < 0.5))
        throw std::invalid_argument("fit_logistic: clip_delta must lie in (0, 0.5)");

    const double ridge = (config.ridge >= 0.0) ? config.ridge : 1e-6 * static_cast<double>(n);
    const Standardizer st = Standardizer::fit(X);

    Eigen::MatrixXd Z(n, d + 1);
    Z.leftCols(d) = st.apply(X);
    Z.col(d).setOnes();
    Eigen::VectorXd y = T.cast<double>();

    Eigen::VectorXd reg = Eigen::VectorXd::Constant(d + 1, ridge);
    reg[d] = 0.0;  // intercept unpenalized

    const auto objective = [&](const Eigen::VectorXd& theta) {
        double ll = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double z = Z.row(i).dot(theta);
            const double logp = (z >= 0.0) ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
            ll += (T[i] == 1) ? logp : logp - z;
        }
        return ll - 0.5 * (reg.array() * theta.array().square()).sum();
    };

    Eigen::VectorXd theta = Eigen::VectorXd::Zero(d + 1);
    double obj = objective(theta);
    double gnorm = 0.0;
    bool converged = false;
    int iter = 0;
    for (; iter < config.max_iter; ++iter) {
        Eigen::VectorXd p(n);
        for (Eigen::Index i = 0; i < n; ++i) p[i] = sigmoid(Z.row(i).dot(theta));
        Eigen::VectorXd grad = Z.transpose() * (y - p) - (reg.array() * theta.array()).matrix();
        gnorm = grad.lpNorm<Eigen::Infinity>();
        if (gnorm <= config.tol) {
            converged = true;
            break;
        }
        Eigen::VectorXd w = (p.array() * (1.0 - p.array())).cwiseMax(1e-10);
        Eigen::MatrixXd H = Z.transpose() * w.asDiagonal() * Z;
        H.diagonal() += reg;
        Eigen::VectorXd step = H.ldlt().solve(grad);
        double scale = 1.0;
        Eigen::VectorXd cand = theta + step;
        double cand_obj = objective(cand);
        // Inside the quadratic region the predicted gain can fall below the
        // objective's floating-point resolution; backtracking on it would
        // stall, so take the plain Newton step there.
        if (0.5 * grad.dot(step) <= 64.0 * std::numeric_limits<double>::epsilon() * (1.0 + std::abs(obj))) {
            theta = cand;
            obj = std::max(obj, cand_obj);
            continue;
        }
        int halvings = 0;
        while (cand_obj < obj && halvings < 40) {
            scale *= 0.5;
            cand = theta + scale * step;
            cand_obj = objective(cand);
            ++halvings;
        }
        if (cand_obj < obj) {
            // objective at machine resolution; a small gradient counts as done
            converged = gnorm <= std::sqrt(config.tol);
            break;
        }
        theta = cand;
        obj = cand_obj;
    }

    PropensityModel model;
    model.clip_delta = config.clip_delta;
    model.converged = converged;
    model.iterations = iter;
    model.grad_norm = gnorm;
    // fold the standardization into raw-space coefficients
    model.coefficients.resize(d + 1);
    double intercept = theta[d];
    for (Eigen::Index j = 0; j < d; ++j) {
        model.coefficients[j] = theta[j] / st.scale[j];
        intercept -= theta[j] * st.mean[j] / st.scale[j];
    }
    model.coefficients[d] = intercept;
    return model;
}

}  // namespace kte
