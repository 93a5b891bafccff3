#include <gtest/gtest.h>

#include <causaltrial/importance.hpp>

#include <cmath>

using namespace causaltrial;

namespace {

GbtModel single_split_model() {
    GbtModel m;
    m.base_score = 0.0;
    m.learning_rate = 1.0;
    m.n_columns = 2;
    RegressionTree t;
    TreeNode root;
    root.feature = 0;
    root.threshold = 0.5;
    root.left = 1;
    root.right = 2;
    TreeNode lo, hi;
    lo.weight = 0.0;
    hi.weight = 1.0;
    t.nodes = {root, lo, hi};
    m.trees.push_back(t);
    return m;
}

// Naive reference: full re-prediction on an explicitly permuted copy of X.
double naive_repeat_mean(const GbtModel& m, const Matrix& X, std::span<const double> y, const PermutationProtocol& pr, int r,
                         std::size_t j) {
    const auto base = m.predict(X);
    double b = 0;
    for (std::size_t i = 0; i < y.size(); ++i) b += (base[i] - y[i]) * (base[i] - y[i]);
    b /= static_cast<double>(y.size());
    double acc = 0;
    for (int d = 0; d < pr.n_perm; ++d) {
        Rng rng(pr.seed, {"perm", r, j, d});
        const auto perm = rng.permutation(X.rows());
        Matrix Xp = X;
        for (std::size_t i = 0; i < X.rows(); ++i) Xp(i, j) = X(perm[i], j);
        const auto p = m.predict(Xp);
        double s = 0;
        for (std::size_t i = 0; i < y.size(); ++i) s += (p[i] - y[i]) * (p[i] - y[i]);
        acc += s / static_cast<double>(y.size()) - b;
    }
    return acc / pr.n_perm;
}

}  // namespace

TEST(PermutationImportance, HandBuiltSplit) {
    const auto m = single_split_model();
    Matrix X(4, 2);
    const double xs[4][2] = {{0, 3}, {0, -1}, {1, 2}, {1, 5}};
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 2; ++j) X(i, j) = xs[i][j];
    const std::vector<double> y{0, 0, 1, 1};
    const PermutationProtocol pr{10, 10, 3};
    const auto rep = permutation_importance(m, X, y, pr, {"x1", "x2"});
    EXPECT_EQ(rep.baseline_mse, 0.0);
    EXPECT_GT(rep.feature("x1").mean, 0.0);
    EXPECT_EQ(rep.feature("x2").mean, 0.0);
    EXPECT_EQ(rep.feature("x1").rank, 1);
    for (double v : rep.feature("x2").repeat_means) EXPECT_EQ(v, 0.0);
    // Each draw's delta is (rows whose label side changed) / 4; check the average against the naive path.
    for (int r = 0; r < pr.n_repeat; ++r)
        EXPECT_NEAR(rep.feature("x1").repeat_means[static_cast<std::size_t>(r)], naive_repeat_mean(m, X, y, pr, r, 0), 1e-15);
}

TEST(PermutationImportance, MatchesNaiveRepredictionOnFittedModel) {
    Rng rng(11);
    const std::size_t n = 150;
    Matrix X(n, 5);
    for (auto& v : X.data()) v = rng.normal();
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = X(i, 0) - 0.5 * X(i, 2) * X(i, 2) + 0.1 * rng.normal();
    GbtConfig c;
    c.n_trees = 40;
    c.max_depth = 3;
    c.learning_rate = 0.1;
    const auto m = gbt_fit(X, y, c);
    const PermutationProtocol pr{3, 4, 8};
    const auto rep = permutation_importance(m, X, y, pr);
    for (std::size_t j = 0; j < 5; ++j) {
        for (int r = 0; r < pr.n_repeat; ++r)
            EXPECT_NEAR(rep.features[j].repeat_means[static_cast<std::size_t>(r)], naive_repeat_mean(m, X, y, pr, r, j), 1e-12);
        const auto& rm = rep.features[j].repeat_means;
        EXPECT_DOUBLE_EQ(rep.features[j].mean, mean(rm));
        EXPECT_DOUBLE_EQ(rep.features[j].se, sample_sd(rm) / 2.0);
        EXPECT_GE(rep.features[j].se, 0.0);
    }
    EXPECT_EQ(rep.features[0].rank, 1);
}

TEST(PermutationImportance, LogisticModelUsesProbabilities) {
    Rng rng(2);
    const std::size_t n = 120;
    Matrix X(n, 3);
    for (auto& v : X.data()) v = rng.normal();
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = X(i, 1) > 0 ? 1.0 : 0.0;
    GbtConfig c;
    c.n_trees = 20;
    c.max_depth = 2;
    c.learning_rate = 0.3;
    c.objective = Objective::logistic;
    const auto m = gbt_fit(X, y, c);
    const PermutationProtocol pr{2, 2, 1};
    const auto rep = permutation_importance(m, X, y, pr);
    for (std::size_t j = 0; j < 3; ++j)
        EXPECT_NEAR(rep.features[j].repeat_means[0], naive_repeat_mean(m, X, y, pr, 0, j), 1e-12);
}

TEST(PermutationImportance, DuplicateColumnNeverSplitIsZero) {
    Rng rng(5);
    const std::size_t n = 200;
    Matrix X(n, 3);
    for (std::size_t i = 0; i < n; ++i) {
        X(i, 0) = rng.normal();
        X(i, 1) = X(i, 0);  // exact copy: equal gains, the earlier column wins
        X(i, 2) = rng.normal();
    }
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = X(i, 0) > 0 ? 1.0 : 0.0;
    GbtConfig c;
    c.n_trees = 30;
    c.max_depth = 3;
    const auto m = gbt_fit(X, y, c);
    ASSERT_EQ(m.split_usage(1), 0u);
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto rep = permutation_importance(m, X, y, {4, 3, seed});
        EXPECT_EQ(rep.features[1].trees_using, 0u);
        for (double v : rep.features[1].repeat_means) EXPECT_EQ(v, 0.0);
        EXPECT_EQ(rep.features[1].mean, 0.0);
        EXPECT_EQ(rep.features[1].se, 0.0);
    }
}

TEST(PermutationImportance, DeterministicAndSeedSensitive) {
    Rng rng(7);
    Matrix X(80, 3);
    for (auto& v : X.data()) v = rng.normal();
    std::vector<double> y(80);
    for (std::size_t i = 0; i < 80; ++i) y[i] = X(i, 0) + X(i, 1);
    GbtConfig c;
    c.n_trees = 20;
    const auto m = gbt_fit(X, y, c);
    const auto a = permutation_importance(m, X, y, {3, 3, 1});
    const auto b = permutation_importance(m, X, y, {3, 3, 1});
    const auto d = permutation_importance(m, X, y, {3, 3, 2});
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(a.features[j].repeat_means, b.features[j].repeat_means);
    EXPECT_NE(a.features[0].mean, d.features[0].mean);
    set_num_threads(3);
    const auto e = permutation_importance(m, X, y, {3, 3, 1});
    set_num_threads(1);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(a.features[j].repeat_means, e.features[j].repeat_means);
}

TEST(PermutationImportance, Errors) {
    const auto m = single_split_model();
    Matrix X(1, 2);
    EXPECT_THROW(permutation_importance(m, X, std::vector<double>{0}, {}), ContractError);
    EXPECT_THROW(permutation_importance(m, Matrix(3, 3), std::vector<double>(3, 0.0), {}), ContractError);
    EXPECT_THROW(permutation_importance(m, Matrix(3, 2), std::vector<double>(3, 0.0), {0, 1, 1}), ContractError);
}

TEST(GroupImportance, SumsAndQuadratureSe) {
    ImportanceReport rep;
    rep.features = {{"a", 0.2, 0.03}, {"b", 0.1, 0.04}, {"c", 0.05, 0.01}};
    const auto g = group_importance(rep, FeatureGroups(std::vector<FeatureGroups::Entry>{{"g1", {"a", "b"}}, {"g2", {"c"}}}));
    ASSERT_EQ(g.size(), 2u);
    EXPECT_NEAR(g[0].sum, 0.3, 1e-15);
    EXPECT_NEAR(g[0].se, 0.05, 1e-15);
    EXPECT_EQ(g[1].sum, 0.05);
    EXPECT_EQ(rep.features[2].group, "g2");
    const auto all = group_importance(rep, FeatureGroups::single("all", {"a", "b", "c"}));
    EXPECT_NEAR(all[0].sum, 0.35, 1e-15);
    EXPECT_THROW(group_importance(rep, FeatureGroups::single("g", {"a", "b"})), ContractError);
}

TEST(GroupImportance, SumEqualsMemberTotalOnRandomReports) {
    Rng rng(3);
    for (int rep_i = 0; rep_i < 50; ++rep_i) {
        ImportanceReport rep;
        std::vector<std::string> g1, g2;
        for (int j = 0; j < 12; ++j) {
            const std::string name = "f" + std::to_string(j);
            rep.features.push_back({name, rng.normal(), rng.uniform()});
            (rng.bernoulli(0.5) ? g1 : g2).push_back(name);
        }
        if (g1.empty() || g2.empty()) continue;
        const auto g = group_importance(rep, FeatureGroups(std::vector<FeatureGroups::Entry>{{"g1", g1}, {"g2", g2}}));
        for (const auto& gi : g) {
            double s = 0.0;
            for (const auto& f : rep.features)
                if (f.group == gi.name) s += f.mean;
            EXPECT_LE(std::abs(gi.sum - s), 1e-12);
        }
    }
}

TEST(GapImportance, EqualArmsGiveZero) {
    const std::size_t n = 60;
    OutcomeModelBank bank;
    bank.predictions = Matrix(n, 3, 0.4);
    Rng rng(1);
    Matrix X(n, 4);
    for (auto& v : X.data()) v = rng.normal();
    std::vector<int> arm(n);
    for (auto& a : arm) a = static_cast<int>(rng.below(3));
    GbtConfig c;
    c.n_trees = 10;
    const auto g = gap_importance(X, bank, arm, c, {2, 2, 1});
    for (const auto& f : g.report.features) EXPECT_EQ(f.mean, 0.0);
}

TEST(GapImportance, PlantedFeatureRanksFirst) {
    const std::size_t n = 400;
    Rng rng(2);
    Matrix X(n, 6);
    for (auto& v : X.data()) v = rng.normal();
    OutcomeModelBank bank;
    bank.predictions = Matrix(n, 3);
    std::vector<int> arm(n);
    for (std::size_t i = 0; i < n; ++i) {
        bank.predictions(i, 0) = 0.3;
        bank.predictions(i, 1) = 0.3 + 0.2 * std::tanh(X(i, 2));
        bank.predictions(i, 2) = 0.3;
        arm[i] = static_cast<int>(rng.below(3));
    }
    auto c = GbtConfig::effect_stage();
    c.n_trees = 100;
    const auto g = gap_importance(X, bank, arm, c, {3, 3, 4});
    EXPECT_EQ(g.report.features[2].rank, 1);
    EXPECT_EQ(g.report.target, "optimality_gap");
}
