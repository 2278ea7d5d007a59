#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <vector>

namespace kte {

enum class KernelFamily { gaussian, linear };

/// Kernel on row-vector points. Gaussian convention:
///   k(x, y) = exp(-|x - y|^2 / (2 sigma^2)),
/// so k(x, x) = 1. Linear: k(x, y) = <x, y>.
struct KernelSpec {
    KernelFamily family = KernelFamily::gaussian;
    double bandwidth = 1.0;  // gaussian only, input-coordinate units

    static KernelSpec gaussian(double bw) {
        if (!(bw > 0.0)) throw std::invalid_argument("gaussian kernel: bandwidth must be > 0");
        return {KernelFamily::gaussian, bw};
    }
    static KernelSpec linear() { return {KernelFamily::linear, 0.0}; }

    /// Hash of family and bandwidth bits; used to assert that one kernel
    /// is shared across every permutation of a test run.
    std::uint64_t fingerprint() const {
        std::uint64_t bits = 0;
        std::memcpy(&bits, &bandwidth, sizeof(bits));
        bits ^= (family == KernelFamily::gaussian) ? 0x67617573ULL : 0x6c696e65ULL;
        bits *= 0x9e3779b97f4a7c15ULL;
        return bits ^ (bits >> 32);
    }
};

inline double kernel_eval(const KernelSpec& spec, const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    if (x.size() != y.size()) throw std::invalid_argument("kernel_eval: dimension mismatch");
    switch (spec.family) {
        case KernelFamily::linear:
            return x.dot(y);
        case KernelFamily::gaussian: {
            const double d2 = (x - y).squaredNorm();
            return std::exp(-d2 / (2.0 * spec.bandwidth * spec.bandwidth));
        }
    }
    throw std::logic_error("kernel_eval: unknown family");
}

/// Dense Gram matrix values[i][j] = k(A.row(i), B.row(j)).
inline Eigen::MatrixXd gram(const KernelSpec& spec, const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
    if (A.rows() == 0 || B.rows() == 0) throw std::invalid_argument("gram: empty point set");
    if (A.cols() != B.cols()) throw std::invalid_argument("gram: dimension mismatch");
    if (spec.family == KernelFamily::linear) return A * B.transpose();
    Eigen::MatrixXd G = -2.0 * (A * B.transpose());
    G.colwise() += A.rowwise().squaredNorm();
    G.rowwise() += B.rowwise().squaredNorm().transpose();
    // squared distances; small negatives are cancellation noise
    G = G.cwiseMax(0.0);
    const double inv = 1.0 / (2.0 * spec.bandwidth * spec.bandwidth);
    return (-inv * G.array()).exp().matrix();
}

/// Median of pairwise Euclidean distances over distinct pairs, excluding
/// exact-zero distances (duplicate points). Standard gaussian bandwidth rule.
inline double median_heuristic(const Eigen::MatrixXd& points) {
    const Eigen::Index n = points.rows();
    if (n < 2) throw std::invalid_argument("median_heuristic: need at least 2 points");
    std::vector<double> dists;
    dists.reserve(static_cast<std::size_t>(n) * static_cast<std::size_t>(n - 1) / 2);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const double d = (points.row(i) - points.row(j)).norm();
            if (d > 0.0) dists.push_back(d);
        }
    if (dists.empty()) throw std::invalid_argument("median_heuristic: all points identical, bandwidth degenerate");
    const std::size_t h = dists.size() / 2;
    std::nth_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(h), dists.end());
    double med = dists[h];
    if (dists.size() % 2 == 0) {
        const double lo = *std::max_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(h));
        med = 0.5 * (lo + med);
    }
    return med;
}

}  // namespace kte
