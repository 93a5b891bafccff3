#include <gtest/gtest.h>

#include <causaltrial/synth.hpp>

#include <cmath>

using namespace causaltrial;

TEST(Generate, NullDesignHasZeroEffects) {
    DgpConfig cfg;
    cfg.n = 5000;
    cfg.arm_probs = {0.3, 0.3, 0.4};
    cfg.intercept = 0.3;
    const auto s = generate(cfg);
    for (std::size_t i = 0; i < cfg.n; ++i)
        for (std::size_t t = 0; t < 3; ++t) EXPECT_EQ(s.oracle_cate(i, t), 0.0);
    EXPECT_NEAR(mean(s.frame.outcome), 0.3, 3 * std::sqrt(0.21 / 5000.0));
}

TEST(Generate, ShiftAndModifierClosedForm) {
    DgpConfig cfg;
    cfg.n = 500;
    cfg.n_continuous = 3;
    cfg.intercept = 0.5;
    cfg.arm_shift = {0.0, 0.2};
    const auto s = generate(cfg);
    for (std::size_t i = 0; i < cfg.n; ++i) EXPECT_NEAR(s.oracle_cate(i, 1), 0.2, 1e-15);

    cfg.arm_shift = {0.0, 0.05};
    cfg.modifiers = {{}, {0.03, 0.0, 0.0}};
    const auto m = generate(cfg);
    for (std::size_t i = 0; i < cfg.n; ++i) {
        const double x1 = m.frame.features(i, 0);
        const double m1 = 0.5 + 0.05 + 0.03 * x1;
        if (m1 > 0.01 && m1 < 0.99) EXPECT_NEAR(m.oracle_cate(i, 1), 0.05 + 0.03 * x1, 1e-14);
    }
}

TEST(Generate, StepTermsAndLogisticLink) {
    DgpConfig cfg;
    cfg.n = 200;
    cfg.n_continuous = 2;
    cfg.intercept = 0.3;
    cfg.arm_shift = {0.0, 0.15};
    cfg.steps = {{}, {{0, 0.0, 0.10}}};
    const auto s = generate(cfg);
    for (std::size_t i = 0; i < cfg.n; ++i)
        EXPECT_NEAR(s.oracle_cate(i, 1), s.frame.features(i, 0) > 0 ? 0.25 : 0.15, 1e-15);

    cfg.link = Link::logistic;
    const auto l = generate(cfg);
    for (std::size_t i = 0; i < cfg.n; ++i) {
        const double eta = 0.3 + 0.15 + (l.frame.features(i, 0) > 0 ? 0.1 : 0.0);
        EXPECT_NEAR(l.outcome_prob(i, 1), 1 / (1 + std::exp(-eta)), 1e-15);
    }
}

TEST(Generate, BinaryFeaturesAndArmFrequencies) {
    DgpConfig cfg;
    cfg.n = 6000;
    cfg.n_continuous = 1;
    cfg.n_binary = 2;
    cfg.arm_probs = {0.257, 0.255, 0.488};
    const auto s = generate(cfg);
    std::vector<double> count(3, 0.0);
    for (int a : s.frame.arm) count[static_cast<std::size_t>(a)] += 1;
    for (std::size_t t = 0; t < 3; ++t) {
        const double p = cfg.arm_probs[t];
        EXPECT_LE(std::abs(count[t] / 6000.0 - p), 3 * std::sqrt(p * (1 - p) / 6000.0));
    }
    for (std::size_t i = 0; i < cfg.n; ++i) {
        const double b = s.frame.features(i, 1);
        EXPECT_TRUE(b == 0.0 || b == 1.0);
    }
    for (std::size_t i = 0; i < cfg.n; ++i) EXPECT_EQ(s.oracle_cate(i, 0), 0.0);
}

TEST(Generate, BitIdenticalAndTrailingFeaturesDoNotPerturb) {
    DgpConfig cfg;
    cfg.n = 300;
    cfg.n_continuous = 4;
    cfg.arm_shift = {0.0, 0.1};
    const auto a = generate(cfg);
    const auto b = generate(cfg);
    EXPECT_EQ(a.frame.features, b.frame.features);
    EXPECT_EQ(a.frame.outcome, b.frame.outcome);
    EXPECT_EQ(a.frame.arm, b.frame.arm);

    cfg.n_continuous = 8;
    const auto c = generate(cfg);
    EXPECT_EQ(c.frame.arm, a.frame.arm);
    EXPECT_EQ(c.frame.outcome, a.frame.outcome);
    for (std::size_t i = 0; i < cfg.n; ++i)
        for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(c.frame.features(i, j), a.frame.features(i, j));
}

TEST(Generate, InvalidConfigs) {
    DgpConfig cfg;
    cfg.arm_probs = {0.5, 0.6};
    EXPECT_THROW(generate(cfg), ContractError);
    cfg.arm_probs = {0.5, 0.5};
    cfg.prognostic = {1.0};
    EXPECT_THROW(generate(cfg), ContractError);
}

TEST(OraclePolicyValue, BestArmDominatesRandomPolicies) {
    DgpConfig cfg;
    cfg.n = 400;
    cfg.n_continuous = 3;
    cfg.arm_probs = {0.3, 0.3, 0.4};
    cfg.arm_shift = {0.0, 0.05, -0.02};
    cfg.modifiers = {{}, {0.1, 0, 0}, {0, 0.12, 0}};
    const auto s = generate(cfg);
    const double best = oracle_policy_value(s, s.best_arm);
    Rng rng(3);
    for (int r = 0; r < 10; ++r) {
        std::vector<int> pol(cfg.n);
        for (auto& a : pol) a = static_cast<int>(rng.below(3));
        EXPECT_LE(oracle_policy_value(s, pol), best);
    }
    const std::vector<int> control(cfg.n, 0);
    EXPECT_NEAR(oracle_policy_value(s, control), mean(s.outcome_prob.column(0)), 1e-15);
}

TEST(DgpConfigJson, RoundTrip) {
    DgpConfig cfg;
    cfg.n = 77;
    cfg.n_continuous = 2;
    cfg.n_binary = 1;
    cfg.arm_probs = {0.2, 0.8};
    cfg.prognostic = {0.1, 0.0, -0.1};
    cfg.steps = {{}, {{1, 0.5, 0.2}}};
    cfg.link = Link::logistic;
    cfg.feature_names = {"age", "crp", "naive"};
    cfg.feature_groups = {{"clinical", {"age", "naive"}}, {"lab", {"crp"}}};
    const auto back = dgp_config_from_json(to_json(cfg));
    EXPECT_EQ(to_json(back), to_json(cfg));
    const auto s = generate(back);
    EXPECT_EQ(s.frame.groups.members("lab"), std::vector<std::string>{"crp"});
}

TEST(Generate, CsvRoundTrip) {
    DgpConfig cfg;
    cfg.n = 50;
    cfg.n_binary = 2;
    cfg.arm_probs = {0.3, 0.3, 0.4};
    cfg.arm_names = {"PBO", "Q12", "Q8"};
    const auto s = generate(cfg);
    const auto back = parse_trial_csv(format_trial_csv(s.frame), schema_for(s.frame));
    EXPECT_EQ(back.features, s.frame.features);
    EXPECT_EQ(back.arm, s.frame.arm);
    EXPECT_EQ(back.outcome, s.frame.outcome);
}

TEST(Generate, AffineColumnsAndMissingness) {
    DgpConfig c;
    c.n = 3000;
    c.n_continuous = 2;
    c.n_binary = 1;
    c.seed = 9;
    c.prognostic = {0.1, 0.0, 0.0};
    const auto base = generate(c);
    c.feature_location = {100.0, -3.0};
    c.feature_scale = {20.0, 0.5};
    const auto moved = generate(c);
    for (std::size_t i = 0; i < c.n; ++i) {
        EXPECT_DOUBLE_EQ(moved.frame.features(i, 0), 100.0 + 20.0 * base.frame.features(i, 0));
        EXPECT_DOUBLE_EQ(moved.frame.features(i, 1), -3.0 + 0.5 * base.frame.features(i, 1));
        EXPECT_EQ(moved.frame.features(i, 2), base.frame.features(i, 2));
        EXPECT_EQ(moved.outcome_prob(i, 0), base.outcome_prob(i, 0));
        EXPECT_EQ(moved.frame.outcome[i], base.frame.outcome[i]);
    }
    c.missing_rate = 0.1;
    const auto holes = generate(c);
    std::size_t missing = 0;
    for (std::size_t i = 0; i < c.n; ++i) {
        for (std::size_t j = 0; j < 3; ++j) missing += is_missing(holes.frame.features(i, j)) ? 1 : 0;
        EXPECT_EQ(holes.frame.outcome[i], base.frame.outcome[i]);
    }
    EXPECT_NEAR(static_cast<double>(missing) / 9000.0, 0.1, 0.015);
    const auto back = dgp_config_from_json(to_json(c));
    EXPECT_EQ(to_json(back), to_json(c));
    c.feature_scale = {1.0, 0.0};
    EXPECT_THROW(c.validate(), ContractError);
}
