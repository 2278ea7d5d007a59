#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <algorithm>
#include <limits>
#include <random>
#include <set>
#include <vector>

#include "kte/matching.hpp"
#include "test_util.hpp"

using namespace kte;
using namespace kte::testutil;

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();

void check_partition(const MatchedSets& m, int n) {
    std::set<int> seen;
    for (const auto& set : m.sets) {
        int treated_hits = 0;
        (void)treated_hits;
        CHECK(set.size() >= 2);
        for (int i : set) {
            CHECK(seen.insert(i).second);
        }
    }
    for (int i : m.unmatched) CHECK(seen.insert(i).second);
    CHECK(static_cast<int>(seen.size()) == n);
}
}  // namespace

TEST_CASE("greedy matching hand trace with a far control", "[matching]") {
    Eigen::VectorXd scores(3);
    scores << 1.39, 1.34, -1.39;  // treated, near control, far control
    Eigen::VectorXi T(3);
    T << 1, 0, 0;
    const MatchedSets m = build_matched_sets_on_scores(scores, T, kInf, 1);
    REQUIRE(m.sets.size() == 1);
    CHECK(m.sets[0] == std::vector<int>{0, 1});
    CHECK(m.unmatched == std::vector<int>{2});
}

TEST_CASE("treated are processed in descending score order", "[matching]") {
    // e: treated 0.8, 0.6; controls 0.79, 0.2
    Eigen::VectorXd scores(4);
    scores << logit(0.8), logit(0.6), logit(0.79), logit(0.2);
    Eigen::VectorXi T(4);
    T << 1, 1, 0, 0;
    const MatchedSets m = build_matched_sets_on_scores(scores, T, kInf, 1);
    REQUIRE(m.sets.size() == 2);
    CHECK(m.sets[0] == std::vector<int>{0, 2});
    CHECK(m.sets[1] == std::vector<int>{1, 3});
    CHECK(m.unmatched.empty());
}

TEST_CASE("zero caliper without ties leaves everything unmatched", "[matching]") {
    Eigen::VectorXd scores(4);
    scores << 0.3, 0.1, 0.2, 0.4;
    Eigen::VectorXi T(4);
    T << 1, 0, 0, 1;
    CHECK_THROWS_AS(build_matched_sets_on_scores(scores, T, 0.0, 1), std::runtime_error);

    // an exact tie sits inside a zero caliper
    scores << 0.3, 0.3, 0.2, 0.4;
    const MatchedSets m = build_matched_sets_on_scores(scores, T, 0.0, 1);
    REQUIRE(m.sets.size() == 1);
    CHECK(m.sets[0] == std::vector<int>{0, 1});
}

TEST_CASE("matched sets partition the sample with one treated unit each", "[matching]") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    for (int controls_per_set : {1, 2}) {
        const int n = 60;
        Eigen::VectorXd scores(n);
        Eigen::VectorXi T(n);
        for (int i = 0; i < n; ++i) {
            scores[i] = normal(rng);
            T[i] = (uniform(rng) < 0.35) ? 1 : 0;
        }
        T[0] = 1;
        T[1] = 0;
        const MatchedSets m = build_matched_sets_on_scores(scores, T, kInf, controls_per_set);
        check_partition(m, n);
        for (const auto& set : m.sets) {
            REQUIRE(static_cast<int>(set.size()) == 1 + controls_per_set);
            int treated = 0;
            for (int i : set) treated += T[i];
            CHECK(treated == 1);
        }
    }
}

TEST_CASE("insufficient in-caliper controls leave the treated unit unmatched", "[matching]") {
    Eigen::VectorXd scores(5);
    scores << 0.0, 0.05, 4.9, 5.2, 5.1;
    Eigen::VectorXi T(5);
    T << 1, 0, 0, 0, 1;
    // treated 4 takes its two in-caliper controls (5.2 then 4.9); treated 0
    // wants two but only one control lies within the caliper
    const MatchedSets m = build_matched_sets_on_scores(scores, T, 0.5, 2);
    REQUIRE(m.sets.size() == 1);
    CHECK(m.sets[0] == std::vector<int>{4, 3, 2});
    CHECK(std::find(m.unmatched.begin(), m.unmatched.end(), 0) != m.unmatched.end());
    CHECK(std::find(m.unmatched.begin(), m.unmatched.end(), 1) != m.unmatched.end());
    check_partition(m, 5);
}

TEST_CASE("matching consumes the propensity only through its logit", "[matching]") {
    const Dataset data = random_dataset(80, 2, 9);
    const PropensityModel prop = fit_logistic(data.X, data.T);
    const Eigen::VectorXd logits = logit_scores(data, prop);
    const double caliper = default_caliper(logits);
    const MatchedSets via_model = build_matched_sets(data, prop, caliper, 1);
    const MatchedSets via_scores = build_matched_sets_on_scores(logits, data.T, caliper, 1);
    REQUIRE(via_model.sets.size() == via_scores.sets.size());
    for (std::size_t s = 0; s < via_model.sets.size(); ++s) CHECK(via_model.sets[s] == via_scores.sets[s]);
    CHECK(via_model.unmatched == via_scores.unmatched);
}

TEST_CASE("default caliper is a fifth of the logit spread", "[matching]") {
    Eigen::VectorXd logits(4);
    logits << -1.0, 0.0, 1.0, 2.0;
    const double sd = std::sqrt(((logits.array() - 0.5).square().sum()) / 3.0);
    CHECK_THAT(default_caliper(logits), Catch::Matchers::WithinRel(0.2 * sd, 1e-12));
}

TEST_CASE("split_sets counts, determinism, whole sets", "[matching]") {
    MatchedSets m;
    for (int s = 0; s < 4; ++s) m.sets.push_back({3 * s, 3 * s + 1, 3 * s + 2});
    const FoldAssignment fold = split_sets(m, 0.5, 11);
    CHECK(fold.train_sets.size() == 2);
    CHECK(fold.test_sets.size() == 2);

    const FoldAssignment again = split_sets(m, 0.5, 11);
    CHECK(fold.train_sets == again.train_sets);
    CHECK(fold.test_sets == again.test_sets);

    std::set<int> all;
    for (int s : fold.train_sets) all.insert(s);
    for (int s : fold.test_sets) all.insert(s);
    CHECK(all.size() == 4);

    MatchedSets tiny;
    tiny.sets.push_back({0, 1});
    CHECK_THROWS_AS(split_sets(tiny, 0.5, 1), std::invalid_argument);
}

TEST_CASE("split_sets is roughly balanced over seeds", "[matching]") {
    MatchedSets m;
    for (int s = 0; s < 10; ++s) m.sets.push_back({2 * s, 2 * s + 1});
    std::vector<int> train_hits(10, 0);
    const int reps = 200;
    for (int seed = 0; seed < reps; ++seed) {
        const FoldAssignment fold = split_sets(m, 0.5, static_cast<std::uint64_t>(seed));
        for (int s : fold.train_sets) ++train_hits[static_cast<std::size_t>(s)];
    }
    for (int s = 0; s < 10; ++s) {
        const double freq = static_cast<double>(train_hits[static_cast<std::size_t>(s)]) / reps;
        CHECK(freq >= 0.4);
        CHECK(freq <= 0.6);
    }
}

TEST_CASE("ceil rule for uneven ratios", "[matching]") {
    MatchedSets m;
    for (int s = 0; s < 5; ++s) m.sets.push_back({2 * s, 2 * s + 1});
    const FoldAssignment fold = split_sets(m, 0.5, 3);
    CHECK(fold.train_sets.size() == 3);  // ceil(2.5)
    CHECK(fold.test_sets.size() == 2);
}

TEST_CASE("matching requires both arms", "[matching]") {
    Eigen::VectorXd scores = Eigen::VectorXd::Zero(4);
    Eigen::VectorXi T = Eigen::VectorXi::Zero(4);
    CHECK_THROWS_AS(build_matched_sets_on_scores(scores, T, kInf, 1), std::invalid_argument);
}
