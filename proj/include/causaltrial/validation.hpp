#pragma once

#include <chrono>
#include <cstdio>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "blp_test.hpp"
#include "folds.hpp"
#include "importance.hpp"
#include "pipeline.hpp"
#include "policy_eval.hpp"
#include "stats.hpp"
#include "synth.hpp"
#include "xlearner.hpp"

namespace causaltrial {

/// One measured quantity compared against a threshold.
struct ValidationCheck {
    std::string criterion;  // e.g. "AC2"
    std::string name;
    double measured = 0.0;
    std::string op;  // "<", "<=", ">=", "in"
    double threshold = 0.0;
    double threshold_hi = 0.0;  // upper bound when op == "in"
    bool pass = false;
    std::string detail;
};

inline ValidationCheck make_check(std::string criterion, std::string name, double measured, std::string op, double threshold,
                                  double threshold_hi = 0.0) {
    ValidationCheck c{std::move(criterion), std::move(name), measured, std::move(op), threshold, threshold_hi, false, ""};
    if (c.op == "<")
        c.pass = measured < threshold;
    else if (c.op == "<=")
        c.pass = measured <= threshold;
    else if (c.op == ">=")
        c.pass = measured >= threshold;
    else if (c.op == "in")
        c.pass = measured >= threshold && measured <= threshold_hi;
    else
        throw ContractError("make_check: unknown comparator '" + c.op + "'");
    return c;
}

inline std::string format_check(const ValidationCheck& c) {
    char buf[512];
    const char* status = c.pass ? "PASS" : "FAIL";
    if (c.op == "in")
        std::snprintf(buf, sizeof buf, "[%s] %s %s: measured %.6g, required in [%.6g, %.6g]", status, c.criterion.c_str(), c.name.c_str(),
                      c.measured, c.threshold, c.threshold_hi);
    else
        std::snprintf(buf, sizeof buf, "[%s] %s %s: measured %.6g, required %s %.6g", status, c.criterion.c_str(), c.name.c_str(),
                      c.measured, c.op.c_str(), c.threshold);
    std::string s = buf;
    if (!c.detail.empty()) s += " (" + c.detail + ")";
    return s;
}

struct ValidationThresholds {
    double xl_bias = 0.03;
    double xl_corr = 0.6;
    double xl_seconds = 300.0;
    double dr_bias = 0.02;
    double dr_cover_lo = 0.90, dr_cover_hi = 0.99;
    double blp_null_lo = 0.02, blp_null_hi = 0.10;
    double blp_power = 0.80;
    double imp_top3_rate = 0.90;
    double gap_rate = 0.70;
    double noise_oof_increase = 0.0;
};

struct ValidationOptions {
    std::uint64_t seed = 20240601;
    ValidationThresholds thresholds;
    GbtConfig outcome = GbtConfig::outcome_stage();
    GbtConfig effect = GbtConfig::effect_stage();
    int k = 5;
    BlpTarget blp_target = BlpTarget::dr_score;
    int xl_n = 4000;
    int dr_n = 500, dr_reps = 200, dr_B = 5000;
    int blp_n = 600, blp_power_n = 1000, blp_null_reps = 200, blp_power_reps = 100, blp_B = 1000;
    int imp_n = 2000, imp_seeds = 20;
    int gap_n = 561, gap_seeds = 50;
    std::set<std::string> only;  // criteria to run; empty runs all
};

namespace detail {

inline std::vector<double> column(const Matrix& m, std::size_t j) {
    std::vector<double> v(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) v[i] = m(i, j);
    return v;
}

}  // namespace detail

/// x1 step modifier plus ten noise columns; population ATE 0.20.
inline DgpConfig recovery_dgp(std::size_t n, std::uint64_t seed) {
    DgpConfig d;
    d.n = n;
    d.n_continuous = 11;
    d.intercept = 0.3;
    d.arm_shift = {0.0, 0.15};
    d.steps = {{}, {{0, 0.0, 0.10}}};
    d.seed = seed;
    return d;
}

inline std::vector<ValidationCheck> validate_xlearner_recovery(const ValidationOptions& o) {
    const auto t = generate(recovery_dgp(static_cast<std::size_t>(o.xl_n), derive_seed(o.seed, {"xl_dgp"})));
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = run_xlearner(t.frame.features, t.frame.outcome, t.frame.arm, o.outcome, o.effect, o.k, derive_seed(o.seed, {"xl_fit"}));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto truth = detail::column(t.oracle_cate, 1);
    return {make_check("AC1", "|mean(tau_hat) - 0.20|", std::abs(mean(r.cate.tau) - 0.20), "<", o.thresholds.xl_bias),
            make_check("AC1", "corr(tau_hat, tau_true)", pearson(r.cate.tau, truth), ">=", o.thresholds.xl_corr),
            make_check("AC1", "fit seconds", secs, "<", o.thresholds.xl_seconds)};
}

/// Heterogeneous two-arm DGP scored under the fixed rule "treat iff x1 > 0".
inline DgpConfig dr_dgp(std::size_t n, std::uint64_t seed) {
    DgpConfig d;
    d.n = n;
    d.n_continuous = 5;
    d.intercept = 0.3;
    d.prognostic = {0.0, 0.05, 0.0, 0.0, 0.0};
    d.arm_shift = {0.0, 0.10};
    d.steps = {{}, {{0, 0.0, 0.15}}};
    d.seed = seed;
    return d;
}

inline std::vector<int> x1_rule(const TrialFrame& f) {
    std::vector<int> p(f.n());
    for (std::size_t i = 0; i < f.n(); ++i) p[i] = f.features(i, 0) > 0.0 ? 1 : 0;
    return p;
}

inline std::vector<ValidationCheck> validate_dr(const ValidationOptions& o) {
    // Population value of the rule from a large draw of the same DGP.
    const auto big = generate(dr_dgp(200000, derive_seed(o.seed, {"dr_population"})));
    const double v_true = oracle_policy_value(big, x1_rule(big.frame));
    std::vector<double> est(static_cast<std::size_t>(o.dr_reps));
    std::vector<char> cover(est.size());
    parallel_for(est.size(), [&](std::size_t r) {
        const auto t = generate(dr_dgp(static_cast<std::size_t>(o.dr_n), derive_seed(o.seed, {"dr_rep", r})));
        const auto& f = t.frame;
        const std::uint64_t s = derive_seed(o.seed, {"dr_fit", r});
        const auto folds = stratified_kfold(arm_outcome_strata(f.arm, f.outcome), o.k, derive_seed(s, {"folds"}));
        const auto bank = fit_outcome_models(f.features, f.outcome, f.arm, 2, o.outcome.with_seed(s), folds, FitMode::cross_fitted);
        Policy pi;
        pi.arms = x1_rule(f);
        const auto v = dr_value(pi, f.outcome, f.arm, bank, empirical_propensity(f.arm, 2), {o.dr_B, derive_seed(s, {"boot"}), CiMethod::percentile});
        est[r] = v.value;
        cover[r] = v.ci.lo <= v_true && v_true <= v.ci.hi ? 1 : 0;
    });
    double covered = 0.0;
    for (char c : cover) covered += c;
    auto bias = make_check("AC2", "|mean(V_hat) - V_oracle|", std::abs(mean(est) - v_true), "<", o.thresholds.dr_bias);
    bias.detail = "V_oracle " + csv::format_double(v_true) + ", mean V_hat " + csv::format_double(mean(est));
    return {bias, make_check("AC2", "CI coverage", covered / static_cast<double>(est.size()), "in", o.thresholds.dr_cover_lo,
                             o.thresholds.dr_cover_hi)};
}

/// Five "clin" and five "endo" columns, clinical prognosis, effect 0.15. The
/// alternative adds 0.3 * e1 to the treated response probability.
inline DgpConfig blp_dgp(std::size_t n, bool alternative, std::uint64_t seed) {
    DgpConfig d;
    d.n = n;
    d.n_continuous = 10;
    d.seed = seed;
    d.feature_names = {"c1", "c2", "c3", "c4", "c5", "e1", "e2", "e3", "e4", "e5"};
    d.feature_groups = {{"clin", {"c1", "c2", "c3", "c4", "c5"}}, {"endo", {"e1", "e2", "e3", "e4", "e5"}}};
    d.intercept = 0.35;
    d.prognostic = {0.05, 0.05, 0, 0, 0, 0, 0, 0, 0, 0};
    d.arm_shift = {0.0, 0.15};
    if (alternative) d.modifiers = {{}, {0, 0, 0, 0, 0, 0.3, 0, 0, 0, 0}};
    return d;
}

/// Wald p-values of the "endo" group for `reps` replicates.
inline std::vector<double> blp_pvalues(const ValidationOptions& o, bool alternative, int reps, std::size_t n) {
    std::vector<double> p(static_cast<std::size_t>(reps));
    parallel_for(p.size(), [&](std::size_t r) {
        const auto t = generate(blp_dgp(n, alternative, derive_seed(o.seed, {alternative ? "blp_alt" : "blp_null", r})));
        const auto& f = t.frame;
        const std::uint64_t s = derive_seed(o.seed, {"blp_fit", alternative ? 1 : 0, r});
        const auto xr = run_xlearner(f.features, f.outcome, f.arm, o.outcome, o.effect, o.k, s);
        const auto target =
            o.blp_target == BlpTarget::xlearner_cate ? xr.cate.tau : dr_scores(f.outcome, f.arm, xr.bank, xr.propensity.of(1));
        const auto d = build_design(f.features, f.feature_names, f.groups, {"clin", "endo"});
        p[r] = wald_test(multiplier_bootstrap(d, target, o.blp_B, derive_seed(s, {"blp"})), d, "endo").p;
    });
    return p;
}

inline std::vector<ValidationCheck> validate_blp(const ValidationOptions& o) {
    auto rate = [](const std::vector<double>& p) {
        double k = 0.0;
        for (double v : p) k += v < 0.05 ? 1.0 : 0.0;
        return k / static_cast<double>(p.size());
    };
    auto null = make_check("AC4", "null rejection rate at 0.05", rate(blp_pvalues(o, false, o.blp_null_reps, static_cast<std::size_t>(o.blp_n))),
                           "in", o.thresholds.blp_null_lo, o.thresholds.blp_null_hi);
    auto power = make_check("AC4", "power, planted modifier 0.3",
                            rate(blp_pvalues(o, true, o.blp_power_reps, static_cast<std::size_t>(o.blp_power_n))), ">=", o.thresholds.blp_power);
    null.detail = "target " + to_string(o.blp_target) + ", n " + std::to_string(o.blp_n);
    power.detail = "target " + to_string(o.blp_target) + ", n " + std::to_string(o.blp_power_n);
    return {null, power};
}

/// Twenty columns; the treated effect steps up by 0.2 when x7 > 0.
inline DgpConfig importance_dgp(std::size_t n, std::uint64_t seed) {
    DgpConfig d;
    d.n = n;
    d.n_continuous = 20;
    d.intercept = 0.3;
    d.arm_shift = {0.0, 0.1};
    d.steps = {{}, {{6, 0.0, 0.2}}};
    d.seed = seed;
    return d;
}

inline std::vector<ValidationCheck> validate_importance(const ValidationOptions& o) {
    const PermutationProtocol protocol{10, 10, derive_seed(o.seed, {"imp_perm"})};
    std::vector<int> rank(static_cast<std::size_t>(o.imp_seeds));
    std::vector<double> unused_max(rank.size(), 0.0);
    std::vector<std::size_t> unused_count(rank.size(), 0);
    parallel_for(rank.size(), [&](std::size_t r) {
        const auto t = generate(importance_dgp(static_cast<std::size_t>(o.imp_n), derive_seed(o.seed, {"imp_dgp", r})));
        const auto& f = t.frame;
        const auto xr = run_xlearner(f.features, f.outcome, f.arm, o.outcome, o.effect, o.k, derive_seed(o.seed, {"imp_fit", r}));
        const auto rep = permutation_importance(xr.cate_models.treated, f.features.take_rows(xr.pseudo.treated_rows), xr.pseudo.treated,
                                                protocol, f.feature_names);
        rank[r] = rep.features[6].rank;
        for (const auto& fi : rep.features)
            if (fi.trees_using == 0) {
                ++unused_count[r];
                unused_max[r] = std::max(unused_max[r], std::abs(fi.mean));
            }
    });
    double top3 = 0.0;
    for (int k : rank) top3 += k <= 3 ? 1.0 : 0.0;

    // A constant column can never be split on.
    auto t = generate(importance_dgp(static_cast<std::size_t>(o.imp_n), derive_seed(o.seed, {"imp_dgp", 0})));
    Matrix X(t.frame.n(), t.frame.n_features() + 1, 1.0);
    for (std::size_t i = 0; i < X.rows(); ++i)
        for (std::size_t j = 0; j < t.frame.n_features(); ++j) X(i, j) = t.frame.features(i, j);
    const auto xr = run_xlearner(X, t.frame.outcome, t.frame.arm, o.outcome, o.effect, o.k, derive_seed(o.seed, {"imp_const"}));
    const auto rep = permutation_importance(xr.cate_models.treated, X.take_rows(xr.pseudo.treated_rows), xr.pseudo.treated, protocol);
    const auto& c = rep.features.back();
    double worst = std::abs(c.mean);
    for (double v : unused_max) worst = std::max(worst, v);
    std::size_t n_unused = 1;
    for (auto k : unused_count) n_unused += k;
    auto zero = make_check("AC5", "max |dMSE| over never-split features", worst, "<=", 0.0);
    zero.detail = std::to_string(n_unused) + " never-split features checked";
    auto top = make_check("AC5", "share of seeds with planted modifier in top 3", top3 / static_cast<double>(rank.size()), ">=",
                          o.thresholds.imp_top3_rate);
    return {zero, top};
}

/// Three arms with constant effects and no covariate signal.
inline DgpConfig noise_dgp(std::size_t n, std::size_t n_features, std::uint64_t seed) {
    DgpConfig d;
    d.n = n;
    d.arm_probs = {0.257, 0.255, 0.488};
    d.n_continuous = n_features;
    d.intercept = 0.3;
    d.arm_shift = {0.0, 0.05, 0.08};
    d.seed = seed;
    return d;
}

inline std::vector<ValidationCheck> validate_overfitting_gap(const ValidationOptions& o) {
    std::vector<char> gap_positive(static_cast<std::size_t>(o.gap_seeds));
    std::vector<double> base(gap_positive.size()), extra(gap_positive.size());
    parallel_for(gap_positive.size(), [&](std::size_t r) {
        // The wider frame holds the same first ten columns plus ten more noise columns.
        const auto t = generate(noise_dgp(static_cast<std::size_t>(o.gap_n), 20, derive_seed(o.seed, {"gap_dgp", r})));
        const auto& f = t.frame;
        const auto folds = stratified_kfold(arm_outcome_strata(f.arm, f.outcome), o.k, derive_seed(o.seed, {"gap_folds", r}));
        const auto plan = make_nested_plan(folds);
        const auto e = empirical_propensity(f.arm, 3);
        const auto cfg = o.outcome.with_seed(derive_seed(o.seed, {"gap_fit", r}));
        const BootstrapOptions b{200, derive_seed(o.seed, {"gap_boot", r}), CiMethod::percentile};
        std::vector<std::size_t> first(10);
        for (std::size_t j = 0; j < 10; ++j) first[j] = j;
        const auto v10 = oof_multiarm_value(f.features.take_cols(first), f.outcome, f.arm, 3, cfg, plan, e, b, "10");
        const auto v20 = oof_multiarm_value(f.features, f.outcome, f.arm, 3, cfg, plan, e, b, "20");
        gap_positive[r] = v10.in_sample.value > v10.out_of_fold.value ? 1 : 0;
        base[r] = v10.out_of_fold.value;
        extra[r] = v20.out_of_fold.value;
    });
    double k = 0.0;
    for (char g : gap_positive) k += g;
    std::vector<double> diff(base.size());
    for (std::size_t r = 0; r < diff.size(); ++r) diff[r] = extra[r] - base[r];
    auto gap = make_check("AC6", "share of seeds with in-sample > out-of-fold", k / static_cast<double>(base.size()), ">=",
                          o.thresholds.gap_rate);
    auto noise = make_check("AC6", "mean OOF change from 10 extra noise features", mean(diff), "<=", o.thresholds.noise_oof_increase);
    noise.detail = "mean OOF 10 features " + csv::format_double(mean(base)) + ", 20 features " + csv::format_double(mean(extra)) +
                   ", se of change " + csv::format_double(sample_sd(diff) / std::sqrt(static_cast<double>(diff.size())));
    return {gap, noise};
}

struct ValidationSummary {
    std::vector<ValidationCheck> checks;
    bool all_pass() const {
        for (const auto& c : checks)
            if (!c.pass) return false;
        return !checks.empty();
    }
};

/// Runs the simulation checks. Errors become failed checks; nothing is thrown.
inline ValidationSummary validate_suite(const ValidationOptions& opt = {}, const std::function<void(const ValidationCheck&)>& on_check = {}) {
    using Fn = std::vector<ValidationCheck> (*)(const ValidationOptions&);
    const std::vector<std::pair<std::string, Fn>> suite{{"AC1", validate_xlearner_recovery},
                                                        {"AC2", validate_dr},
                                                        {"AC4", validate_blp},
                                                        {"AC5", validate_importance},
                                                        {"AC6", validate_overfitting_gap}};
    ValidationSummary s;
    for (const auto& [id, fn] : suite) {
        if (!opt.only.empty() && !opt.only.count(id)) continue;
        std::vector<ValidationCheck> got;
        try {
            got = fn(opt);
        } catch (const std::exception& e) {
            ValidationCheck c{id, "run", 0.0, ">=", 0.0, 0.0, false, std::string("error: ") + e.what()};
            got = {c};
        }
        for (auto& c : got) {
            if (on_check) on_check(c);
            s.checks.push_back(std::move(c));
        }
    }
    return s;
}

}  // namespace causaltrial
