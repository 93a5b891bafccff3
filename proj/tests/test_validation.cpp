#include <gtest/gtest.h>

#include <causaltrial/validation.hpp>

using namespace causaltrial;

namespace {

ValidationOptions tiny() {
    ValidationOptions o;
    o.outcome.n_trees = 20;
    o.outcome.max_depth = 2;
    o.effect = o.outcome;
    o.k = 3;
    o.dr_n = 200;
    o.dr_reps = 6;
    o.dr_B = 100;
    return o;
}

}  // namespace

TEST(MakeCheck, Comparators) {
    EXPECT_TRUE(make_check("X", "a", 1.0, "<", 2.0).pass);
    EXPECT_FALSE(make_check("X", "a", 2.0, "<", 2.0).pass);
    EXPECT_TRUE(make_check("X", "a", 2.0, "<=", 2.0).pass);
    EXPECT_TRUE(make_check("X", "a", 2.0, ">=", 2.0).pass);
    EXPECT_TRUE(make_check("X", "a", 0.05, "in", 0.02, 0.10).pass);
    EXPECT_FALSE(make_check("X", "a", 0.11, "in", 0.02, 0.10).pass);
    EXPECT_THROW(make_check("X", "a", 1.0, "==", 1.0), ContractError);
}

TEST(FormatCheck, ShowsMeasuredAndThreshold) {
    auto c = make_check("AC2", "coverage", 0.95, "in", 0.9, 0.99);
    c.detail = "200 reps";
    EXPECT_EQ(format_check(c), "[PASS] AC2 coverage: measured 0.95, required in [0.9, 0.99] (200 reps)");
    EXPECT_EQ(format_check(make_check("AC1", "corr", 0.3, ">=", 0.6)), "[FAIL] AC1 corr: measured 0.3, required >= 0.6");
}

TEST(ValidateSuite, ImpossibleThresholdFailsOnlyThatCheck) {
    auto o = tiny();
    o.only = {"AC2"};
    o.thresholds.dr_cover_lo = 0.0;
    o.thresholds.dr_cover_hi = 1.0;
    const auto loose = validate_suite(o);
    ASSERT_EQ(loose.checks.size(), 2u);
    o.thresholds.dr_bias = 1e-12;
    const auto strict = validate_suite(o);
    ASSERT_EQ(strict.checks.size(), 2u);
    EXPECT_FALSE(strict.checks[0].pass);
    EXPECT_EQ(strict.checks[1].pass, loose.checks[1].pass);
    EXPECT_EQ(strict.checks[0].measured, loose.checks[0].measured);  // same seeds, same numbers
    EXPECT_TRUE(strict.checks[1].pass);
    EXPECT_FALSE(strict.all_pass());
}

TEST(ValidateSuite, ErrorsBecomeFailedChecks) {
    auto o = tiny();
    o.only = {"AC2"};
    o.k = 1;  // invalid fold count
    const auto s = validate_suite(o);
    ASSERT_EQ(s.checks.size(), 1u);
    EXPECT_FALSE(s.checks[0].pass);
    EXPECT_NE(s.checks[0].detail.find("error"), std::string::npos);
}

TEST(ValidateSuite, OnlyFiltersAndReportsAsItGoes) {
    auto o = tiny();
    o.only = {"AC9"};  // not a simulation check
    std::size_t seen = 0;
    const auto s = validate_suite(o, [&](const ValidationCheck&) { ++seen; });
    EXPECT_TRUE(s.checks.empty());
    EXPECT_FALSE(s.all_pass());
    EXPECT_EQ(seen, 0u);
}
