#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "kte/propensity.hpp"
#include "kte/standardize.hpp"

using namespace kte;

namespace {
struct LogisticDraw {
    Eigen::MatrixXd X;
    Eigen::VectorXi T;
};

LogisticDraw draw_logistic(int n, const Eigen::VectorXd& slopes, double intercept, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    LogisticDraw d;
    d.X.resize(n, slopes.size());
    d.T.resize(n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < slopes.size(); ++j) d.X(i, j) = normal(rng);
        const double p = sigmoid(slopes.dot(d.X.row(i)) + intercept);
        d.T[i] = (uniform(rng) < p) ? 1 : 0;
    }
    return d;
}

// Reference optimizer for the same penalized objective: plain gradient
// ascent with backtracking in standardized coordinates.
Eigen::VectorXd gradient_ascent_fit(const Eigen::MatrixXd& X, const Eigen::VectorXi& T, double ridge) {
    const Eigen::Index n = X.rows();
    const Eigen::Index d = X.cols();
    const Standardizer st = Standardizer::fit(X);
    Eigen::MatrixXd Z(n, d + 1);
    Z.leftCols(d) = st.apply(X);
    Z.col(d).setOnes();
    Eigen::VectorXd reg = Eigen::VectorXd::Constant(d + 1, ridge);
    reg[d] = 0.0;
    const auto obj = [&](const Eigen::VectorXd& th) {
        double ll = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double z = Z.row(i).dot(th);
            const double logp = (z >= 0.0) ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
            ll += (T[i] == 1) ? logp : logp - z;
        }
        return ll - 0.5 * (reg.array() * th.array().square()).sum();
    };
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(d + 1);
    double best = obj(theta);
    double step = 0.1;
    for (int it = 0; it < 20000; ++it) {
        Eigen::VectorXd p(n);
        for (Eigen::Index i = 0; i < n; ++i) p[i] = sigmoid(Z.row(i).dot(theta));
        Eigen::VectorXd grad = Z.transpose() * (T.cast<double>() - p) - (reg.array() * theta.array()).matrix();
        Eigen::VectorXd cand = theta + step * grad;
        const double v = obj(cand);
        if (v > best) {
            theta = cand;
            best = v;
            step *= 1.1;
        } else {
            step *= 0.5;
            if (step < 1e-14) break;
        }
    }
    // back to raw space
    Eigen::VectorXd out(d + 1);
    double intercept = theta[d];
    for (Eigen::Index j = 0; j < d; ++j) {
        out[j] = theta[j] / st.scale[j];
        intercept -= theta[j] * st.mean[j] / st.scale[j];
    }
    out[d] = intercept;
    return out;
}
}  // namespace

TEST_CASE("intercept-only fit recovers the Bernoulli MLE", "[propensity]") {
    Eigen::MatrixXd X(100, 0);
    Eigen::VectorXi T = Eigen::VectorXi::Zero(100);
    for (int i = 0; i < 30; ++i) T[i] = 1;
    const PropensityModel m = fit_logistic(X, T);
    CHECK(m.converged);
    CHECK_THAT(predict_e_unclipped(m, Eigen::VectorXd(0), 1), Catch::Matchers::WithinAbs(0.3, 1e-9));
}

TEST_CASE("predict_e hand values", "[propensity]") {
    PropensityModel m;
    m.coefficients = Eigen::VectorXd::Zero(3);  // two slopes + intercept
    m.clip_delta = 0.03;
    Eigen::VectorXd x(2);
    x << 0.7, -1.2;
    CHECK(predict_e(m, x, 1) == 0.5);
    CHECK(predict_e(m, x, 0) == 0.5);

    m.coefficients[2] = std::log(3.0);
    Eigen::VectorXd zero = Eigen::VectorXd::Zero(2);
    CHECK_THAT(predict_e(m, zero, 1), Catch::Matchers::WithinAbs(0.75, 1e-12));

    m.coefficients[2] = 50.0;
    m.clip_delta = 0.01;
    CHECK(predict_e(m, zero, 1) == 0.99);
    CHECK(predict_e(m, zero, 0) == 1.0 - 0.99);
}

TEST_CASE("complement identity is exact", "[propensity]") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> normal(0.0, 3.0);
    PropensityModel m;
    m.coefficients = Eigen::VectorXd(3);
    for (int rep = 0; rep < 200; ++rep) {
        for (int j = 0; j < 3; ++j) m.coefficients[j] = normal(rng);
        Eigen::VectorXd x(2);
        x << normal(rng), normal(rng);
        const double e1 = predict_e(m, x, 1);
        const double e0 = predict_e(m, x, 0);
        CHECK(e0 == 1.0 - e1);
        CHECK(e0 + e1 == 1.0);
    }
}

TEST_CASE("inverse odds values and identity", "[propensity]") {
    PropensityModel m;
    m.coefficients = Eigen::VectorXd::Zero(2);
    Eigen::VectorXd x(1);
    x << 0.4;
    CHECK(inverse_odds(m, x, 1) == 1.0);

    m.coefficients[1] = std::log(3.0);
    Eigen::VectorXd zero = Eigen::VectorXd::Zero(1);
    CHECK_THAT(inverse_odds(m, zero, 1), Catch::Matchers::WithinAbs(1.0 / 3.0, 1e-12));

    std::mt19937_64 rng(5);
    std::normal_distribution<double> normal(0.0, 2.0);
    for (int rep = 0; rep < 100; ++rep) {
        m.coefficients << normal(rng), normal(rng);
        Eigen::VectorXd p(1);
        p << normal(rng);
        CHECK_THAT(inverse_odds(m, p, 0) * inverse_odds(m, p, 1), Catch::Matchers::WithinAbs(1.0, 1e-12));
    }
}

TEST_CASE("separable data stays finite under ridge", "[propensity]") {
    Eigen::MatrixXd X(20, 1);
    Eigen::VectorXi T(20);
    for (int i = 0; i < 20; ++i) {
        T[i] = (i < 10) ? 0 : 1;
        X(i, 0) = (i < 10) ? -1.0 : 1.0;
    }
    const PropensityModel m = fit_logistic(X, T);
    CHECK(m.coefficients.allFinite());
    Eigen::VectorXd x(1);
    x << 1.0;
    const double e = predict_e(m, x, 1);
    CHECK(e >= m.clip_delta);
    CHECK(e <= 1.0 - m.clip_delta);
}

TEST_CASE("monotone in a positive coordinate before clipping", "[propensity]") {
    PropensityModel m;
    m.coefficients = Eigen::VectorXd(3);
    m.coefficients << 0.8, -0.5, 0.1;
    Eigen::VectorXd x(2);
    x << -1.0, 0.3;
    double prev = -1.0;
    for (double v = -3.0; v <= 3.0; v += 0.25) {
        x[0] = v;
        const double e = predict_e_unclipped(m, x, 1);
        CHECK(e >= prev);
        prev = e;
    }
}

TEST_CASE("fit matches a reference optimizer in log-likelihood", "[propensity]") {
    Eigen::VectorXd slopes(2);
    slopes << 1.0, -1.0;
    const LogisticDraw d = draw_logistic(200, slopes, 0.3, 17);
    const PropensityModel m = fit_logistic(d.X, d.T);
    CHECK(m.converged);
    const double ridge = 1e-6 * 200;
    const Eigen::VectorXd ref = gradient_ascent_fit(d.X, d.T, ridge);
    const double ll_fit = logistic_loglik(d.X, d.T, m.coefficients);
    const double ll_ref = logistic_loglik(d.X, d.T, ref);
    CHECK(ll_fit >= ll_ref - 1e-6);
    CHECK_THAT(ll_fit, Catch::Matchers::WithinAbs(ll_ref, 1e-6));
}

TEST_CASE("antisymmetric design with shared labels zeroes the slopes", "[propensity]") {
    // every (x, t) appears together with (-x, t), so slope sign flips leave
    // the likelihood unchanged and the penalized optimum has zero slopes
    std::mt19937_64 rng(23);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    const int pairs = 100;
    Eigen::MatrixXd X(2 * pairs, 2);
    Eigen::VectorXi T(2 * pairs);
    for (int i = 0; i < pairs; ++i) {
        Eigen::Vector2d v(normal(rng), normal(rng));
        const int t = (uniform(rng) < 0.3) ? 1 : 0;
        X.row(2 * i) = v.transpose();
        X.row(2 * i + 1) = -v.transpose();
        T[2 * i] = t;
        T[2 * i + 1] = t;
    }
    const PropensityModel m = fit_logistic(X, T);
    CHECK(std::abs(m.coefficients[0]) < 1e-7);
    CHECK(std::abs(m.coefficients[1]) < 1e-7);
    const double rate = T.cast<double>().mean();
    Eigen::VectorXd probe(2);
    probe << 0.7, -0.2;
    CHECK_THAT(predict_e_unclipped(m, probe, 1), Catch::Matchers::WithinAbs(rate, 1e-6));
}

TEST_CASE("non-convergence returns the best iterate with a flag", "[propensity]") {
    Eigen::VectorXd slopes(3);
    slopes << 2.0, -1.0, 0.5;
    const LogisticDraw d = draw_logistic(150, slopes, 0.0, 5);
    LogisticFitConfig cfg;
    cfg.max_iter = 1;
    const PropensityModel m = fit_logistic(d.X, d.T, cfg);
    CHECK_FALSE(m.converged);
    CHECK(m.coefficients.allFinite());
}

TEST_CASE("input validation", "[propensity]") {
    Eigen::MatrixXd X(4, 1);
    X << 0.0, 1.0, 2.0, 3.0;
    Eigen::VectorXi all_ones = Eigen::VectorXi::Ones(4);
    CHECK_THROWS_AS(fit_logistic(X, all_ones), std::invalid_argument);

    Eigen::VectorXi bad(4);
    bad << 0, 1, 2, 0;
    CHECK_THROWS_AS(fit_logistic(X, bad), std::invalid_argument);

    Eigen::MatrixXd nanX = X;
    nanX(1, 0) = std::numeric_limits<double>::quiet_NaN();
    Eigen::VectorXi T(4);
    T << 0, 1, 0, 1;
    CHECK_THROWS_AS(fit_logistic(nanX, T), std::invalid_argument);
}
