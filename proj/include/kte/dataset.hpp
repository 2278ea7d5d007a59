#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

namespace kte {

/// Observational sample: covariates X (n x d), binary treatment T,
/// outcomes Y (n x p), plus optional counterfactual outcome matrices and
/// the true propensity when the generating process is known.
struct Dataset {
    Eigen::MatrixXd X;
    Eigen::VectorXi T;
    Eigen::MatrixXd Y;
    std::optional<Eigen::MatrixXd> Y0;
    std::optional<Eigen::MatrixXd> Y1;
    std::optional<Eigen::VectorXd> true_e;  // e(x, 1)
    double clamp_rate = 0.0;                // fraction of clamped generated propensities

    Eigen::Index n() const { return X.rows(); }
    Eigen::Index dim() const { return X.cols(); }
    Eigen::Index outcome_dim() const { return Y.cols(); }

    int arm_count(int t) const {
        int c = 0;
        for (Eigen::Index i = 0; i < T.size(); ++i) c += (T[i] == t);
        return c;
    }

    std::vector<int> arm_indices(int t) const {
        std::vector<int> idx;
        for (Eigen::Index i = 0; i < T.size(); ++i)
            if (T[i] == t) idx.push_back(static_cast<int>(i));
        return idx;
    }

    Dataset rows(const std::vector<int>& idx) const {
        Dataset out;
        const auto m = static_cast<Eigen::Index>(idx.size());
        out.X.resize(m, X.cols());
        out.T.resize(m);
        out.Y.resize(m, Y.cols());
        if (Y0) out.Y0.emplace(m, Y0->cols());
        if (Y1) out.Y1.emplace(m, Y1->cols());
        if (true_e) out.true_e.emplace(m);
        for (Eigen::Index r = 0; r < m; ++r) {
            const int s = idx[static_cast<std::size_t>(r)];
            out.X.row(r) = X.row(s);
            out.T[r] = T[s];
            out.Y.row(r) = Y.row(s);
            if (Y0) out.Y0->row(r) = (*Y0).row(s);
            if (Y1) out.Y1->row(r) = (*Y1).row(s);
            if (true_e) (*out.true_e)[r] = (*true_e)[s];
        }
        out.clamp_rate = clamp_rate;
        return out;
    }

    /// Shape checks plus the consistency invariant Y[i] == Y_{T[i]}[i]
    /// whenever both counterfactual matrices are present.
    void validate() const {
        if (T.size() != n() || Y.rows() != n())
            throw std::invalid_argument("dataset: row count mismatch between X, T, Y");
        for (Eigen::Index i = 0; i < T.size(); ++i)
            if (T[i] != 0 && T[i] != 1)
                throw std::invalid_argument("dataset: treatment must be 0 or 1");
        if (!X.allFinite() || !Y.allFinite())
            throw std::invalid_argument("dataset: non-finite entries");
        if (Y0 && Y1) {
            if (Y0->rows() != n() || Y1->rows() != n() || Y0->cols() != Y.cols() || Y1->cols() != Y.cols())
                throw std::invalid_argument("dataset: counterfactual shape mismatch");
            for (Eigen::Index i = 0; i < n(); ++i) {
                const auto& ref = (T[i] == 1) ? *Y1 : *Y0;
                if (Y.row(i) != ref.row(i))
                    throw std::invalid_argument("dataset: Y inconsistent with selected counterfactual");
            }
        }
        if (true_e) {
            for (Eigen::Index i = 0; i < true_e->size(); ++i)
                if (!((*true_e)[i] > 0.0 && (*true_e)[i] < 1.0))
                    throw std::invalid_argument("dataset: true propensity outside (0,1)");
        }
    }
};

}  // namespace kte
