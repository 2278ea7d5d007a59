#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "kte/kernels.hpp"

using namespace kte;

namespace {
Eigen::MatrixXd random_points(int n, int d, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::MatrixXd P(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) P(i, j) = normal(rng);
    return P;
}
}  // namespace

TEST_CASE("kernel_eval matches hand values", "[kernels]") {
    Eigen::VectorXd zero2 = Eigen::VectorXd::Zero(2);
    CHECK(kernel_eval(KernelSpec::gaussian(1.0), zero2, zero2) == 1.0);

    Eigen::VectorXd x(2), y(2);
    x << 1.0, 2.0;
    y << 3.0, 4.0;
    CHECK(kernel_eval(KernelSpec::linear(), x, y) == 11.0);

    Eigen::VectorXd a(1), b(1);
    a << 0.0;
    b << std::sqrt(2.0 * std::log(2.0));
    CHECK_THAT(kernel_eval(KernelSpec::gaussian(1.0), a, b), Catch::Matchers::WithinAbs(0.5, 1e-15));
}

TEST_CASE("kernel_eval rejects dimension mismatch", "[kernels]") {
    Eigen::VectorXd x(2), y(3);
    x.setZero();
    y.setZero();
    CHECK_THROWS_AS(kernel_eval(KernelSpec::gaussian(1.0), x, y), std::invalid_argument);
}

TEST_CASE("kernel symmetry and gaussian bounds", "[kernels]") {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> normal(0.0, 2.0);
    const KernelSpec g = KernelSpec::gaussian(1.7);
    const KernelSpec lin = KernelSpec::linear();
    for (int rep = 0; rep < 50; ++rep) {
        Eigen::VectorXd x(3), y(3);
        for (int j = 0; j < 3; ++j) {
            x[j] = normal(rng);
            y[j] = normal(rng);
        }
        CHECK(kernel_eval(g, x, y) == kernel_eval(g, y, x));
        CHECK(kernel_eval(lin, x, y) == kernel_eval(lin, y, x));
        const double k = kernel_eval(g, x, y);
        CHECK(k > 0.0);
        CHECK(k <= 1.0);
        CHECK((k == 1.0) == (x == y));
    }
}

TEST_CASE("gram single point", "[kernels]") {
    Eigen::MatrixXd A(1, 1);
    A << 0.0;
    const Eigen::MatrixXd G = gram(KernelSpec::gaussian(1.0), A, A);
    REQUIRE(G.rows() == 1);
    CHECK(G(0, 0) == 1.0);
}

TEST_CASE("gram rejects empty sets", "[kernels]") {
    Eigen::MatrixXd empty(0, 2), ok(2, 2);
    ok.setZero();
    CHECK_THROWS_AS(gram(KernelSpec::gaussian(1.0), empty, ok), std::invalid_argument);
    CHECK_THROWS_AS(gram(KernelSpec::linear(), ok, empty), std::invalid_argument);
}

TEST_CASE("gram equals entrywise kernel loop", "[kernels]") {
    const Eigen::MatrixXd A = random_points(10, 3, 11);
    const Eigen::MatrixXd B = random_points(7, 3, 12);
    for (const KernelSpec& spec : {KernelSpec::gaussian(0.8), KernelSpec::linear()}) {
        const Eigen::MatrixXd G = gram(spec, A, B);
        for (int i = 0; i < A.rows(); ++i)
            for (int j = 0; j < B.rows(); ++j)
                CHECK_THAT(G(i, j), Catch::Matchers::WithinAbs(
                                        kernel_eval(spec, A.row(i).transpose(), B.row(j).transpose()), 1e-12));
    }
}

TEST_CASE("square gram is symmetric positive semidefinite", "[kernels]") {
    for (unsigned seed : {1u, 2u, 3u, 4u, 5u}) {
        const int n = 5 + static_cast<int>(seed) * 9;  // up to 50
        const Eigen::MatrixXd A = random_points(n, 4, seed);
        for (const KernelSpec& spec : {KernelSpec::gaussian(1.3), KernelSpec::linear()}) {
            const Eigen::MatrixXd G = gram(spec, A, A);
            CHECK((G - G.transpose()).lpNorm<Eigen::Infinity>() < 1e-12);
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (G + G.transpose()));
            CHECK(eig.eigenvalues().minCoeff() >= -1e-8 * G.trace());
        }
    }
}

TEST_CASE("median_heuristic hand cases", "[kernels]") {
    Eigen::MatrixXd two(2, 1);
    two << 0.0, 2.0;
    CHECK(median_heuristic(two) == 2.0);

    Eigen::MatrixXd three(3, 1);
    three << 0.0, 1.0, 3.0;
    CHECK(median_heuristic(three) == 2.0);  // distances 1, 2, 3

    Eigen::MatrixXd same(2, 1);
    same << 5.0, 5.0;
    CHECK_THROWS_AS(median_heuristic(same), std::invalid_argument);

    Eigen::MatrixXd one(1, 2);
    one.setZero();
    CHECK_THROWS_AS(median_heuristic(one), std::invalid_argument);

    // duplicate points contribute zero distances, which are excluded
    Eigen::MatrixXd dup(3, 1);
    dup << 5.0, 5.0, 1.0;
    CHECK(median_heuristic(dup) == 4.0);
}

TEST_CASE("median_heuristic scales exactly with the points", "[kernels]") {
    const Eigen::MatrixXd P = random_points(20, 3, 99);
    const double base = median_heuristic(P);
    for (double c : {0.5, 2.0, 4.0}) {
        CHECK(median_heuristic((c * P).eval()) == c * base);
    }
}

TEST_CASE("kernel fingerprints separate specs", "[kernels]") {
    CHECK(KernelSpec::gaussian(1.0).fingerprint() == KernelSpec::gaussian(1.0).fingerprint());
    CHECK(KernelSpec::gaussian(1.0).fingerprint() != KernelSpec::gaussian(2.0).fingerprint());
    CHECK(KernelSpec::gaussian(1.0).fingerprint() != KernelSpec::linear().fingerprint());
}

TEST_CASE("gaussian spec requires positive bandwidth", "[kernels]") {
    CHECK_THROWS_AS(KernelSpec::gaussian(0.0), std::invalid_argument);
    CHECK_THROWS_AS(KernelSpec::gaussian(-1.0), std::invalid_argument);
}
