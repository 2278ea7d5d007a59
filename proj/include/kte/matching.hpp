#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "kte/dataset.hpp"
#include "kte/propensity.hpp"
#include "kte/rng.hpp"

namespace kte {

/// Partition into sets with exactly one treated unit plus its matched
/// controls; leftovers (and treated units that could not fill a set
/// within the caliper) land in `unmatched`.
struct MatchedSets {
    std::vector<std::vector<int>> sets;  // each begins with the treated index
    std::vector<int> unmatched;
};

/// Greedy nearest-neighbor matching without replacement on caller-supplied
/// scores (logit propensities in the standard pipeline). Treated units are
/// processed in descending score order; each takes its `controls_per_set`
/// nearest unused controls, all within `caliper` (score units, +inf
/// disables). A treated unit short of in-caliper controls goes unmatched.
inline MatchedSets build_matched_sets_on_scores(const Eigen::VectorXd& scores, const Eigen::VectorXi& T,
                                                double caliper, int controls_per_set) {
    if (scores.size() != T.size()) throw std::invalid_argument("matching: score and treatment size mismatch");
    if (controls_per_set < 1) throw std::invalid_argument("matching: controls_per_set must be >= 1");
    const auto n = T.size();

    std::vector<int> treated, controls;
    for (Eigen::Index i = 0; i < n; ++i) (T[i] == 1 ? treated : controls).push_back(static_cast<int>(i));
    if (treated.empty() || controls.empty()) throw std::invalid_argument("matching: both arms required");

    std::sort(treated.begin(), treated.end(),
              [&](int a, int b) { return scores[a] != scores[b] ? scores[a] > scores[b] : a < b; });
    std::sort(controls.begin(), controls.end(),
              [&](int a, int b) { return scores[a] != scores[b] ? scores[a] < scores[b] : a < b; });
    std::vector<bool> used(controls.size(), false);

    MatchedSets out;
    for (int ti : treated) {
        const double s = scores[ti];
        // insertion point in the sorted control scores
        auto it = std::lower_bound(controls.begin(), controls.end(), s,
                                   [&](int c, double v) { return scores[c] < v; });
        std::ptrdiff_t right = it - controls.begin();
        std::ptrdiff_t left = right - 1;
        std::vector<int> picked;
        while (static_cast<int>(picked.size()) < controls_per_set) {
            while (left >= 0 && used[static_cast<std::size_t>(left)]) --left;
            while (right < static_cast<std::ptrdiff_t>(controls.size()) && used[static_cast<std::size_t>(right)])
                ++right;
            if (left < 0 && right >= static_cast<std::ptrdiff_t>(controls.size())) break;  // exhausted
            const double dl = (left >= 0) ? std::abs(s - scores[controls[static_cast<std::size_t>(left)]])
                                          : std::numeric_limits<double>::infinity();
            const double dr = (right < static_cast<std::ptrdiff_t>(controls.size()))
                                  ? std::abs(s - scores[controls[static_cast<std::size_t>(right)]])
                                  : std::numeric_limits<double>::infinity();
            const double best = std::min(dl, dr);
            if (!(best <= caliper)) break;  // nothing usable in caliper
            if (dl <= dr) {
                picked.push_back(controls[static_cast<std::size_t>(left)]);
                used[static_cast<std::size_t>(left)] = true;
            } else {
                picked.push_back(controls[static_cast<std::size_t>(right)]);
                used[static_cast<std::size_t>(right)] = true;
            }
        }
        if (static_cast<int>(picked.size()) < controls_per_set) {
            // roll back partial picks; this treated unit stays unmatched
            for (int c : picked) {
                auto pos = std::find(controls.begin(), controls.end(), c);
                used[static_cast<std::size_t>(pos - controls.begin())] = false;
            }
            out.unmatched.push_back(ti);
            continue;
        }
        std::vector<int> set;
        set.push_back(ti);
        set.insert(set.end(), picked.begin(), picked.end());
        out.sets.push_back(std::move(set));
    }
    for (std::size_t c = 0; c < controls.size(); ++c)
        if (!used[c]) out.unmatched.push_back(controls[c]);
    if (out.sets.empty()) throw std::runtime_error("matching: no matched sets could be formed");
    return out;
}

/// Default caliper: 0.2 standard deviations of the logit propensity.
inline double default_caliper(const Eigen::VectorXd& logits) {
    const double mu = logits.mean();
    const double var = (logits.array() - mu).square().sum() / std::max<double>(1.0, logits.size() - 1.0);
    return 0.2 * std::sqrt(var);
}

inline Eigen::VectorXd logit_scores(const Dataset& data, const PropensityModel& prop) {
    Eigen::VectorXd s(data.n());
    for (Eigen::Index i = 0; i < data.n(); ++i)
        s[i] = logit(predict_e(prop, data.X.row(i).transpose(), 1));
    return s;
}

inline MatchedSets build_matched_sets(const Dataset& data, const PropensityModel& prop, double caliper = -1.0,
                                      int controls_per_set = 1) {
    const Eigen::VectorXd s = logit_scores(data, prop);
    if (caliper < 0.0) caliper = default_caliper(s);
    return build_matched_sets_on_scores(s, data.T, caliper, controls_per_set);
}

/// Whole-set assignment into train/test folds. ceil(ratio * #sets) sets go
/// to train; assignment is a seeded uniform shuffle.
struct FoldAssignment {
    std::vector<int> train_sets;
    std::vector<int> test_sets;
    double ratio = 0.5;
    std::uint64_t seed = 0;
};

inline FoldAssignment split_sets(const MatchedSets& sets, double ratio, std::uint64_t seed) {
    const auto s = static_cast<int>(sets.sets.size());
    if (s < 2) throw std::invalid_argument("split_sets: need at least 2 matched sets");
    if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("split_sets: ratio must lie in (0,1)");
    std::vector<int> order(static_cast<std::size_t>(s));
    std::iota(order.begin(), order.end(), 0);
    auto rng = substream_rng(seed, Stream::fold_split);
    std::shuffle(order.begin(), order.end(), rng);
    const int n_train = static_cast<int>(std::ceil(ratio * s));
    FoldAssignment fold;
    fold.ratio = ratio;
    fold.seed = seed;
    fold.train_sets.assign(order.begin(), order.begin() + n_train);
    fold.test_sets.assign(order.begin() + n_train, order.end());
    if (fold.test_sets.empty()) throw std::invalid_argument("split_sets: test fold would be empty");
    return fold;
}

inline std::string matching_diagnostics_line(const MatchedSets& m, double caliper) {
    std::ostringstream os;
    os << "matched_sets=" << m.sets.size() << " unmatched=" << m.unmatched.size() << " caliper=" << caliper;
    return os.str();
}

}  // namespace kte
