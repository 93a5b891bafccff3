#include <gtest/gtest.h>

#include <causaltrial/boosted_trees.hpp>

#include <cmath>
#include <limits>

using namespace causaltrial;

namespace {

Matrix random_matrix(std::size_t n, std::size_t p, std::uint64_t seed) {
    Rng rng(seed);
    Matrix X(n, p);
    for (auto& v : X.data()) v = rng.normal();
    return X;
}

GbtConfig full_sampling(int trees, int depth, double lr, double lambda, Objective obj = Objective::squared_error) {
    GbtConfig c;
    c.n_trees = trees;
    c.max_depth = depth;
    c.learning_rate = lr;
    c.l2_lambda = lambda;
    c.subsample = 1.0;
    c.colsample = 1.0;
    c.objective = obj;
    return c;
}

// Independent isotonic oracle: enumerate every contiguous grouping of the tied-score
// blocks, keep the monotone ones, take the least-squares one.
std::vector<double> isotonic_bruteforce(const std::vector<double>& scores, const std::vector<double>& labels) {
    std::vector<double> uniq = scores;
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    const std::size_t k = uniq.size();
    std::vector<double> sum(k, 0.0), cnt(k, 0.0);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const auto b = static_cast<std::size_t>(std::lower_bound(uniq.begin(), uniq.end(), scores[i]) - uniq.begin());
        sum[b] += labels[i];
        cnt[b] += 1.0;
    }
    double best_sse = std::numeric_limits<double>::infinity();
    std::vector<double> best_level(k);
    for (std::uint32_t mask = 0; mask < (1u << (k - 1)); ++mask) {
        std::vector<double> level(k);
        std::size_t start = 0;
        bool monotone = true;
        double prev = -1.0;
        for (std::size_t b = 0; b < k; ++b) {
            const bool cut = b == k - 1 || (mask >> b) & 1u;
            if (!cut) continue;
            double s = 0, c = 0;
            for (std::size_t q = start; q <= b; ++q) s += sum[q], c += cnt[q];
            const double lvl = s / c;
            if (lvl < prev) monotone = false;
            prev = lvl;
            for (std::size_t q = start; q <= b; ++q) level[q] = lvl;
            start = b + 1;
        }
        if (!monotone) continue;
        double sse = 0;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            const auto b = static_cast<std::size_t>(std::lower_bound(uniq.begin(), uniq.end(), scores[i]) - uniq.begin());
            sse += (labels[i] - level[b]) * (labels[i] - level[b]);
        }
        if (sse < best_sse - 1e-15) {
            best_sse = sse;
            best_level = level;
        }
    }
    std::vector<double> fitted(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const auto b = static_cast<std::size_t>(std::lower_bound(uniq.begin(), uniq.end(), scores[i]) - uniq.begin());
        fitted[i] = best_level[b];
    }
    return fitted;
}

}  // namespace

TEST(GbtFit, ConstantTargetGivesZeroGainRoots) {
    Matrix X = random_matrix(50, 3, 1);
    std::vector<double> y(50, 0.7);
    auto model = gbt_fit(X, y, GbtConfig::effect_stage().with_seed(4));
    for (const auto& t : model.trees) EXPECT_EQ(t.nodes.size(), 1u);
    for (double p : model.predict(random_matrix(20, 3, 2))) EXPECT_NEAR(p, 0.7, 1e-12);
}

TEST(GbtFit, SingleStumpEnumeratedSplit) {
    Matrix X(4, 1);
    X(0, 0) = 0;
    X(1, 0) = 0;
    X(2, 0) = 1;
    X(3, 0) = 1;
    std::vector<double> y{0, 0, 1, 1};
    auto model = gbt_fit(X, y, full_sampling(1, 1, 1.0, 0.0));
    ASSERT_EQ(model.trees.size(), 1u);
    const auto& root = model.trees[0].nodes[0];
    EXPECT_EQ(root.feature, 0);
    EXPECT_DOUBLE_EQ(root.threshold, 0.5);
    // Hand enumeration: only one candidate split, G_L = 1, G_R = -1, H = 2 each.
    EXPECT_DOUBLE_EQ(root.gain, 0.5 * (1.0 / 2 + 1.0 / 2 - 0.0));
    const auto pred = model.predict(X);
    EXPECT_EQ(pred, (std::vector<double>{0, 0, 1, 1}));
}

TEST(GbtFit, HugeLambdaCollapsesToBaseScore) {
    Matrix X = random_matrix(200, 4, 3);
    Rng rng(9);
    std::vector<double> y(200);
    for (auto& v : y) v = rng.bernoulli(0.4);
    GbtConfig cfg = GbtConfig::outcome_stage();
    cfg.l2_lambda = 1e12;
    auto model = gbt_fit(X, y, cfg);
    for (const auto& t : model.trees)
        for (const auto& nd : t.nodes)
            if (nd.is_leaf()) EXPECT_LT(std::abs(nd.weight), 1e-6);
    for (double p : model.predict(X)) EXPECT_NEAR(p, model.base_score, 1e-6);
}

TEST(GbtPredict, EmptyEnsemblePredictsBase) {
    GbtModel m;
    m.base_score = 0.25;
    m.n_columns = 2;
    for (double p : m.predict(Matrix(5, 2))) EXPECT_EQ(p, 0.25);
}

TEST(GbtPredict, FitsIdentityFunction) {
    Matrix X(200, 1);
    std::vector<double> y(200);
    for (std::size_t i = 0; i < 200; ++i) {
        X(i, 0) = -1.0 + 2.0 * static_cast<double>(i) / 199.0;
        y[i] = X(i, 0);
    }
    auto model = gbt_fit(X, y, full_sampling(300, 6, 0.3, 0.0));
    const auto pred = model.predict(X);
    double mse = 0;
    for (std::size_t i = 0; i < 200; ++i) mse += (pred[i] - y[i]) * (pred[i] - y[i]);
    EXPECT_LT(mse / 200, 1e-3);
}

TEST(GbtPredict, LogisticOutputsAreProbabilities) {
    Matrix X = random_matrix(300, 3, 5);
    std::vector<double> y(300);
    for (std::size_t i = 0; i < 300; ++i) y[i] = X(i, 0) > 0 ? 1.0 : 0.0;
    auto model = gbt_fit(X, y, GbtConfig::prognostic_stage());
    for (double p : model.predict(random_matrix(100, 3, 6) )) {
        EXPECT_GT(p, 0.0);
        EXPECT_LT(p, 1.0);
    }
}

TEST(GbtPredict, ColumnMismatchThrows) {
    Matrix X = random_matrix(20, 3, 7);
    std::vector<double> y(20, 1.0);
    auto model = gbt_fit(X, y, full_sampling(2, 2, 0.1, 1.0));
    EXPECT_THROW(model.predict(Matrix(3, 2)), ContractError);
}

TEST(GbtFit, RejectsBadInput) {
    Matrix X = random_matrix(10, 2, 8);
    std::vector<double> y(10, 0.0);
    y[3] = std::numeric_limits<double>::infinity();
    EXPECT_THROW(gbt_fit(X, y, GbtConfig{}), ContractError);
    std::vector<double> short_y(9, 0.0);
    EXPECT_THROW(gbt_fit(X, short_y, GbtConfig{}), ContractError);
    GbtConfig big_leaf;
    big_leaf.min_samples_leaf = 11;
    EXPECT_THROW(gbt_fit(X, std::vector<double>(10, 0.0), big_leaf), ContractError);
    GbtConfig bad;
    bad.learning_rate = 0.0;
    EXPECT_THROW(gbt_fit(X, std::vector<double>(10, 0.0), bad), ContractError);
}

TEST(GbtFit, TrainingLossNonIncreasingWithFullSampling) {
    Matrix X = random_matrix(300, 5, 11);
    Rng rng(12);
    std::vector<double> y(300);
    for (std::size_t i = 0; i < 300; ++i) y[i] = rng.bernoulli(0.3 + 0.3 * (X(i, 1) > 0));
    for (Objective obj : {Objective::squared_error, Objective::logistic}) {
        auto model = gbt_fit(X, y, full_sampling(200, 4, 0.05, 1.0, obj));
        ASSERT_EQ(model.training_loss.size(), 201u);
        for (std::size_t t = 1; t < model.training_loss.size(); ++t)
            EXPECT_LE(model.training_loss[t], model.training_loss[t - 1]) << to_string(obj) << " round " << t;
    }
}

TEST(GbtFit, BitDeterministicGivenSeed) {
    Matrix X = random_matrix(250, 6, 13);
    Rng rng(14);
    std::vector<double> y(250);
    for (auto& v : y) v = rng.normal();
    const auto cfg = GbtConfig::effect_stage().with_seed(77);
    const auto a = gbt_fit(X, y, cfg).predict(X);
    const auto b = gbt_fit(X, y, cfg).predict(X);
    EXPECT_EQ(a, b);
    const auto c = gbt_fit(X, y, cfg.with_seed(78)).predict(X);
    EXPECT_NE(a, c);
}

TEST(GbtFit, LeafWeightsAndLeafSizesHonorConfig) {
    Matrix X = random_matrix(400, 4, 15);
    Rng rng(16);
    std::vector<double> y(400);
    for (auto& v : y) v = rng.normal();
    GbtConfig cfg = GbtConfig::outcome_stage();
    cfg.n_trees = 50;
    cfg.min_samples_leaf = 7;
    cfg.l2_lambda = 2.5;
    auto model = gbt_fit(X, y, cfg);
    for (const auto& t : model.trees) {
        EXPECT_LE(t.depth(), cfg.max_depth);
        for (const auto& nd : t.nodes) {
            if (!nd.is_leaf()) continue;
            EXPECT_GE(nd.n_rows, cfg.min_samples_leaf);
            EXPECT_NEAR(nd.weight, -nd.grad_sum / (nd.hess_sum + cfg.l2_lambda), 1e-12);
            EXPECT_TRUE(std::isfinite(nd.weight));
        }
    }
}

TEST(GbtFit, TrainingPredictionsMatchPredict) {
    Matrix X = random_matrix(120, 3, 17);
    std::vector<double> y(120);
    for (std::size_t i = 0; i < 120; ++i) y[i] = X(i, 0) * X(i, 1);
    auto cfg = full_sampling(40, 3, 0.2, 1.0);
    auto model = gbt_fit(X, y, cfg);
    const auto raw = model.predict_raw(X);
    double mse = 0;
    for (std::size_t i = 0; i < 120; ++i) mse += (raw[i] - y[i]) * (raw[i] - y[i]);
    EXPECT_DOUBLE_EQ(mse / 120, model.training_loss.back());
}

// ---------------------------------------------------------------------------

TEST(Isotonic, AlreadyMonotoneIsIdentity) {
    auto cal = isotonic_fit(std::vector<double>{1, 2}, std::vector<double>{0, 1});
    EXPECT_EQ(isotonic_apply(cal, std::vector<double>{1, 2}), (std::vector<double>{0, 1}));
}

TEST(Isotonic, ViolationIsPooled) {
    auto cal = isotonic_fit(std::vector<double>{1, 2}, std::vector<double>{1, 0});
    EXPECT_EQ(isotonic_apply(cal, std::vector<double>{1, 2}), (std::vector<double>{0.5, 0.5}));
}

TEST(Isotonic, ConstantLabelsGiveConstantCalibrator) {
    auto cal = isotonic_fit(std::vector<double>{3, 1, 2}, std::vector<double>{1, 1, 1});
    for (double v : isotonic_apply(cal, std::vector<double>{-5, 1.5, 10})) EXPECT_EQ(v, 1.0);
}

TEST(Isotonic, BoundaryRules) {
    auto cal = isotonic_fit(std::vector<double>{1, 2, 3, 4}, std::vector<double>{0, 0, 1, 1});
    EXPECT_EQ(cal.apply(-100), 0.0);
    EXPECT_EQ(cal.apply(100), 1.0);
    EXPECT_EQ(cal.apply(2.99), 0.0);  // left-constant between breakpoints
    EXPECT_EQ(cal.apply(3.0), 1.0);
}

TEST(Isotonic, MatchesExhaustiveOracle) {
    Rng rng(2024);
    for (int trial = 0; trial < 3000; ++trial) {
        const std::size_t n = 2 + rng.below(7);  // <= 8 points, hence <= 8 blocks
        std::vector<double> s(n), y(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = static_cast<double>(rng.below(6));
            y[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
        }
        const auto cal = isotonic_fit(s, y);
        const auto fitted = isotonic_apply(cal, s);
        const auto oracle = isotonic_bruteforce(s, y);
        for (std::size_t i = 0; i < n; ++i) ASSERT_NEAR(fitted[i], oracle[i], 1e-12) << "trial " << trial;
    }
}

TEST(Isotonic, ApplyIsMonotone) {
    Rng rng(31);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> s(30), y(30);
        for (std::size_t i = 0; i < 30; ++i) {
            s[i] = rng.normal();
            y[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
        }
        const auto cal = isotonic_fit(s, y);
        std::vector<double> grid(100);
        for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = -3.0 + 0.06 * static_cast<double>(i);
        const auto out = isotonic_apply(cal, grid);
        for (std::size_t i = 1; i < out.size(); ++i) ASSERT_LE(out[i - 1], out[i]);
        for (double v : out) {
            ASSERT_GE(v, 0.0);
            ASSERT_LE(v, 1.0);
        }
    }
}

TEST(Isotonic, TrainingScoresReproduceFittedLevels) {
    std::vector<double> s{0.1, 0.4, 0.35, 0.8, 0.7, 0.2};
    std::vector<double> y{0, 1, 0, 1, 0, 0};
    const auto cal = isotonic_fit(s, y);
    // Sorted by score: 0.1:0, 0.2:0, 0.35:0, 0.4:1, 0.7:0, 0.8:1 -> pools {0.4, 0.7} at 0.5.
    EXPECT_EQ(isotonic_apply(cal, s), (std::vector<double>{0, 0.5, 0, 1, 0.5, 0}));
}
