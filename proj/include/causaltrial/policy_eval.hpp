#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "boosted_trees.hpp"
#include "error.hpp"
#include "folds.hpp"
#include "matrix.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "stats.hpp"
#include "xlearner.hpp"

namespace causaltrial {

struct Policy {
    std::vector<int> arms;  // assigned arm per patient
    std::string feature_set = "all";
    FitMode mode = FitMode::cross_fitted;

    std::size_t n() const noexcept { return arms.size(); }

    /// Fraction of patients assigned to each arm.
    std::vector<double> shares(int n_arms) const {
        std::vector<double> s(static_cast<std::size_t>(n_arms), 0.0);
        for (int a : arms) s[static_cast<std::size_t>(a)] += 1.0;
        for (double& v : s) v /= static_cast<double>(std::max<std::size_t>(arms.size(), 1));
        return s;
    }
};

/// argmax over columns; ties go to the lowest arm code.
inline Policy greedy_policy(const Matrix& mu, std::string feature_set = "all", FitMode mode = FitMode::cross_fitted) {
    Policy p;
    p.feature_set = std::move(feature_set);
    p.mode = mode;
    p.arms.resize(mu.rows());
    for (std::size_t i = 0; i < mu.rows(); ++i) {
        int best = 0;
        for (std::size_t t = 0; t < mu.cols(); ++t) {
            const double v = mu(i, t);
            if (!std::isfinite(v)) throw ContractError("greedy_policy: non-finite outcome prediction");
            if (v > mu(i, static_cast<std::size_t>(best))) best = static_cast<int>(t);
        }
        p.arms[i] = best;
    }
    return p;
}

inline Policy greedy_policy(const OutcomeModelBank& bank) { return greedy_policy(bank.predictions, bank.feature_set, bank.mode); }

struct BootstrapOptions {
    int B = 5000;
    std::uint64_t seed = 0;
    CiMethod method = CiMethod::percentile;
};

struct PolicyValueResult {
    double value = 0.0;
    std::vector<double> contributions;
    Interval ci;
    int B = 0;
    std::uint64_t seed = 0;
    CiMethod method = CiMethod::percentile;
    std::vector<double> propensities;
    std::vector<double> shares;  // policy assignment per arm
    std::string feature_set;
    FitMode mode = FitMode::cross_fitted;
};

namespace detail {

inline std::vector<double> bootstrap_means(std::span<const double> a, std::span<const double> b, int B, std::uint64_t seed,
                                           const char* tag) {
    const std::size_t n = a.size();
    std::vector<double> draws(static_cast<std::size_t>(B));
    parallel_for(draws.size(), [&](std::size_t d) {
        Rng rng(seed, {tag, d});
        double sa = 0.0, sb = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            const std::size_t i = rng.below(n);
            sa += a[i];
            if (!b.empty()) sb += b[i];
        }
        draws[d] = (sa - sb) / static_cast<double>(n);
    });
    return draws;
}

}  // namespace detail

/// mu_pi + 1(T = pi) / e_pi * (Y - mu_pi); not clamped.
inline std::vector<double> dr_contributions(const Policy& policy, std::span<const double> y, std::span<const int> arm,
                                            const Matrix& mu, const Propensities& e) {
    const std::size_t n = policy.n();
    if (y.size() != n || arm.size() != n || mu.rows() != n) throw ContractError("dr_value: length mismatch");
    std::vector<double> c(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int a = policy.arms[i];
        if (a < 0 || static_cast<std::size_t>(a) >= mu.cols()) throw ContractError("dr_value: assigned arm not in outcome bank");
        const double m = mu(i, static_cast<std::size_t>(a));
        c[i] = m;
        if (arm[i] == a) {
            const double ea = e.of(a);
            if (!(ea > 0.0)) throw ContractError("dr_value: zero propensity for assigned arm " + std::to_string(a));
            c[i] += (y[i] - m) / ea;
        }
    }
    return c;
}

inline PolicyValueResult dr_value(const Policy& policy, std::span<const double> y, std::span<const int> arm, const Matrix& mu,
                                  const Propensities& e, const BootstrapOptions& opt = {}) {
    detail::require(opt.B >= 1, "dr_value: B must be >= 1");
    PolicyValueResult r;
    r.contributions = dr_contributions(policy, y, arm, mu, e);
    detail::require(!r.contributions.empty(), "dr_value: no patients");
    r.value = mean(r.contributions);
    r.B = opt.B;
    r.seed = opt.seed;
    r.method = opt.method;
    r.ci = bootstrap_interval(detail::bootstrap_means(r.contributions, {}, opt.B, opt.seed, "dr_boot"), r.value, opt.method);
    r.propensities = e.e;
    r.shares = policy.shares(static_cast<int>(mu.cols()));
    r.feature_set = policy.feature_set;
    r.mode = policy.mode;
    return r;
}

inline PolicyValueResult dr_value(const Policy& policy, std::span<const double> y, std::span<const int> arm,
                                  const OutcomeModelBank& bank, const Propensities& e, const BootstrapOptions& opt = {}) {
    return dr_value(policy, y, arm, bank.predictions, e, opt);
}

struct PolicyComparison {
    double delta = 0.0;
    Interval ci;
    int B = 0;
    std::uint64_t seed = 0;
    std::string label_a, label_b;
};

/// Paired bootstrap: the same resampled indices feed both contribution vectors.
inline PolicyComparison compare_policies(const PolicyValueResult& a, const PolicyValueResult& b, const BootstrapOptions& opt = {}) {
    if (a.contributions.size() != b.contributions.size()) throw ContractError("compare_policies: results cover different patients");
    detail::require(!a.contributions.empty(), "compare_policies: no patients");
    detail::require(opt.B >= 1, "compare_policies: B must be >= 1");
    PolicyComparison c;
    c.delta = a.value - b.value;
    c.B = opt.B;
    c.seed = opt.seed;
    c.label_a = a.feature_set;
    c.label_b = b.feature_set;
    c.ci = bootstrap_interval(detail::bootstrap_means(a.contributions, b.contributions, opt.B, opt.seed, "paired_boot"), c.delta,
                              opt.method);
    return c;
}

struct MultiArmValue {
    PolicyValueResult out_of_fold;
    PolicyValueResult in_sample;
    Policy oof_policy;
    Policy in_sample_policy;
    Matrix oof_predictions;  // held-out mu_t per patient

    double overfitting_gap() const { return in_sample.value - out_of_fold.value; }
};

/// Outer folds: per-arm models fit on training rows score only held-out rows, and
/// held-out DR contributions are pooled into one value. Also evaluates the same
/// recipe fit and scored on every row.
inline MultiArmValue oof_multiarm_value(const Matrix& X, std::span<const double> y, std::span<const int> arm, int n_arms,
                                        const GbtConfig& cfg, const NestedFoldPlan& plan, const Propensities& e,
                                        const BootstrapOptions& opt = {}, std::string feature_set = "all") {
    const std::size_t n = y.size();
    if (X.rows() != n || arm.size() != n) throw ContractError("oof_multiarm_value: length mismatch");
    const std::size_t K = plan.train_rows.size();
    detail::require(K >= 2 && plan.test_rows.size() == K, "oof_multiarm_value: plan needs at least 2 outer folds");
    const std::size_t A = static_cast<std::size_t>(n_arms);

    std::vector<std::vector<std::vector<std::size_t>>> rows(K, std::vector<std::vector<std::size_t>>(A));
    for (std::size_t f = 0; f < K; ++f) {
        for (std::size_t i : plan.train_rows[f]) {
            detail::require(arm[i] >= 0 && arm[i] < n_arms, "oof_multiarm_value: arm code out of range");
            rows[f][static_cast<std::size_t>(arm[i])].push_back(i);
        }
        for (std::size_t t = 0; t < A; ++t)
            if (rows[f][t].empty())
                throw ContractError("oof_multiarm_value: arm " + std::to_string(t) + " missing from outer training fold " +
                                    std::to_string(f));
    }

    MultiArmValue out;
    out.oof_predictions = Matrix(n, A, std::numeric_limits<double>::quiet_NaN());
    parallel_for(K * A, [&](std::size_t job) {
        const std::size_t f = job / A, t = job % A;
        const auto& tr = rows[f][t];
        const auto m = gbt_fit(X.take_rows(tr), take(y, tr), cfg.with_seed(derive_seed(cfg.seed, {"oof_outcome", t, f})));
        const auto pred = m.predict(X.take_rows(plan.test_rows[f]));
        for (std::size_t k = 0; k < pred.size(); ++k) out.oof_predictions(plan.test_rows[f][k], t) = clamp_unit(pred[k]);
    });
    for (double v : out.oof_predictions.data())
        if (std::isnan(v)) throw ContractError("oof_multiarm_value: outer test folds do not cover every patient");

    out.oof_policy = greedy_policy(out.oof_predictions, feature_set, FitMode::cross_fitted);
    out.out_of_fold = dr_value(out.oof_policy, y, arm, out.oof_predictions, e, opt);

    const auto bank = fit_outcome_models(X, y, arm, n_arms, cfg.with_seed(derive_seed(cfg.seed, {"insample_outcome"})), plan.outer,
                                         FitMode::in_sample, feature_set);
    out.in_sample_policy = greedy_policy(bank);
    out.in_sample = dr_value(out.in_sample_policy, y, arm, bank, e, opt);
    return out;
}

inline nlohmann::json to_json(const PolicyValueResult& r) {
    return {{"value", r.value},
            {"ci_lo", r.ci.lo},
            {"ci_hi", r.ci.hi},
            {"B", r.B},
            {"seed", r.seed},
            {"ci_method", to_string(r.method)},
            {"propensities", r.propensities},
            {"assignment_shares", r.shares},
            {"feature_set", r.feature_set},
            {"fit_mode", to_string(r.mode)}};
}

inline nlohmann::json to_json(const PolicyComparison& c) {
    return {{"a", c.label_a}, {"b", c.label_b}, {"delta", c.delta}, {"ci_lo", c.ci.lo}, {"ci_hi", c.ci.hi}, {"B", c.B}, {"seed", c.seed}};
}

}  // namespace causaltrial
