#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

#include "kte/dataset.hpp"
#include "kte/kernels.hpp"
#include "kte/standardize.hpp"

namespace kte {

/// Per-arm conditional mean embedding fitted by kernel ridge regression.
/// The embedding at a query point x is sum_j v_j(x) l(y_j, .) over the
/// arm's training outcomes, with v(x) = weight_matrix * k_t(x). lambda is
/// the absolute ridge on the Gram (no extra factor of n); lambda = +inf is
/// the zero-embedding limit and stores an all-zero weight matrix.
struct CmeModel {
    int arm = 0;
    std::vector<int> train_indices;   // rows of the training dataset with T == arm
    Eigen::MatrixXd train_points;     // standardized covariates of those rows
    Eigen::MatrixXd weight_matrix;    // (K_t + lambda I)^{-1}
    double lambda = 0.0;
    KernelSpec covariate_kernel;
    Standardizer standardizer;

    Eigen::Index arm_size() const { return train_points.rows(); }
};

/// Default ridge: mean Gram diagonal scaled by n_t^{-1/2}.
inline double default_cme_lambda(const Eigen::MatrixXd& K) {
    return K.diagonal().mean() / std::sqrt(static_cast<double>(K.rows()));
}

inline CmeModel fit_cme(const Dataset& train, int arm, const KernelSpec& covariate_kernel,
                        std::optional<double> lambda = std::nullopt,
                        std::optional<Standardizer> standardizer = std::nullopt) {
    CmeModel model;
    model.arm = arm;
    model.covariate_kernel = covariate_kernel;
    model.train_indices = train.arm_indices(arm);
    const auto n_t = static_cast<Eigen::Index>(model.train_indices.size());
    if (n_t < 1) throw std::invalid_argument("fit_cme: no training samples in the requested arm");

    model.standardizer = standardizer ? *standardizer : Standardizer::identity(train.dim());
    Eigen::MatrixXd Z(n_t, train.dim());
    for (Eigen::Index r = 0; r < n_t; ++r) Z.row(r) = train.X.row(model.train_indices[static_cast<std::size_t>(r)]);
    model.train_points = model.standardizer.apply(Z);

    const Eigen::MatrixXd K = gram(covariate_kernel, model.train_points, model.train_points);
    model.lambda = lambda ? *lambda : default_cme_lambda(K);
    if (std::isinf(model.lambda)) {
        model.weight_matrix = Eigen::MatrixXd::Zero(n_t, n_t);
        return model;
    }
    if (!(model.lambda > 0.0)) throw std::invalid_argument("fit_cme: lambda must be positive");

    Eigen::MatrixXd A = K;
    A.diagonal().array() += model.lambda;
    Eigen::LLT<Eigen::MatrixXd> llt(A);
    if (llt.info() != Eigen::Success)
        throw std::runtime_error("fit_cme: factorization failed; increase lambda");
    model.weight_matrix = llt.solve(Eigen::MatrixXd::Identity(n_t, n_t));
    return model;
}

/// v(x) = W_t k_t(x) for one raw-space query point.
inline Eigen::VectorXd cme_weights(const CmeModel& model, const Eigen::VectorXd& x) {
    const Eigen::VectorXd z = model.standardizer.apply_point(x);
    const Eigen::MatrixXd kvec = gram(model.covariate_kernel, model.train_points, z.transpose());
    return model.weight_matrix * kvec.col(0);
}

/// Weight columns for a whole batch of raw-space query points: the (j, i)
/// entry is the weight of arm outcome j for query row i.
inline Eigen::MatrixXd cme_weight_matrix(const CmeModel& model, const Eigen::MatrixXd& X_query) {
    return model.weight_matrix * gram(model.covariate_kernel, model.train_points, model.standardizer.apply(X_query));
}

}  // namespace kte
