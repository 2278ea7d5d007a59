#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

namespace kte {

/// Per-coordinate affine map to mean 0, unit scale. Statistics come from
/// one fold (training data) and are then applied to any fold. Degenerate
/// coordinates keep scale 1 so the map stays invertible.
struct Standardizer {
    Eigen::VectorXd mean;
    Eigen::VectorXd scale;

    static Standardizer fit(const Eigen::MatrixXd& X) {
        Standardizer s;
        const auto n = X.rows();
        s.mean = (n > 0) ? Eigen::VectorXd(X.colwise().mean()) : Eigen::VectorXd::Zero(X.cols());
        s.scale = Eigen::VectorXd::Ones(X.cols());
        if (n > 1) {
            for (Eigen::Index j = 0; j < X.cols(); ++j) {
                const double var = (X.col(j).array() - s.mean[j]).square().sum() / static_cast<double>(n - 1);
                if (var > 1e-24) s.scale[j] = std::sqrt(var);
            }
        }
        return s;
    }

    static Standardizer identity(Eigen::Index d) {
        Standardizer s;
        s.mean = Eigen::VectorXd::Zero(d);
        s.scale = Eigen::VectorXd::Ones(d);
        return s;
    }

    Eigen::MatrixXd apply(const Eigen::MatrixXd& X) const {
        if (X.cols() != mean.size()) throw std::invalid_argument("standardizer: dimension mismatch");
        return (X.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array();
    }

    Eigen::VectorXd apply_point(const Eigen::VectorXd& x) const {
        if (x.size() != mean.size()) throw std::invalid_argument("standardizer: dimension mismatch");
        return ((x - mean).array() / scale.array()).matrix();
    }
};

}  // namespace kte
