#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "boosted_trees.hpp"
#include "error.hpp"
#include "folds.hpp"
#include "matrix.hpp"
#include "parallel.hpp"

namespace causaltrial {

struct Propensities {
    std::vector<double> e;  // indexed by arm code
    std::string source = "empirical";

    double of(int arm) const {
        detail::require(arm >= 0 && static_cast<std::size_t>(arm) < e.size(), "propensity: arm out of range");
        return e[static_cast<std::size_t>(arm)];
    }
};

/// Constant propensities equal to observed arm frequencies.
inline Propensities empirical_propensity(std::span<const int> arms, int n_arms = -1) {
    detail::require(!arms.empty(), "empirical_propensity: no patients");
    int k = n_arms;
    if (k < 0) k = *std::max_element(arms.begin(), arms.end()) + 1;
    Propensities p;
    p.e.assign(static_cast<std::size_t>(k), 0.0);
    for (int a : arms) {
        detail::require(a >= 0 && a < k, "empirical_propensity: arm out of range");
        p.e[static_cast<std::size_t>(a)] += 1.0;
    }
    for (double& v : p.e) v /= static_cast<double>(arms.size());
    return p;
}

enum class FitMode { cross_fitted, in_sample };

inline std::string to_string(FitMode m) { return m == FitMode::in_sample ? "in_sample" : "out_of_fold"; }

/// Per-arm outcome models and the n x arms matrix of their (clamped) predictions.
struct OutcomeModelBank {
    std::vector<std::vector<GbtModel>> models;  // [arm][fold]; a single model per arm in-sample
    Matrix predictions;                         // mu_hat_t(X_i), clamped to [0, 1]
    std::string feature_set = "all";
    FitMode mode = FitMode::cross_fitted;

    int n_arms() const noexcept { return static_cast<int>(predictions.cols()); }
    std::size_t n() const noexcept { return predictions.rows(); }
    double mu(std::size_t i, int arm) const { return predictions(i, static_cast<std::size_t>(arm)); }
};

inline double clamp_unit(double v) { return std::clamp(v, 0.0, 1.0); }

/// Stage 1: one outcome model per arm, trained on that arm's rows only.
///
/// Cross-fitted mode: the arm-t model trained without fold f scores every row of
/// fold f, so each patient receives an out-of-fold prediction for every arm.
/// In-sample mode: one model per arm on all of its rows scores everyone.
inline OutcomeModelBank fit_outcome_models(const Matrix& X, std::span<const double> y, std::span<const int> arm, int n_arms,
                                           const GbtConfig& cfg, const FoldAssignment& folds,
                                           FitMode mode = FitMode::cross_fitted, std::string feature_set = "all") {
    const std::size_t n = y.size();
    if (X.rows() != n || arm.size() != n) throw ContractError("fit_outcome_models: length mismatch");
    if (X.cols() == 0) throw ContractError("fit_outcome_models: empty feature selection");
    if (mode == FitMode::cross_fitted && folds.n() != n) throw ContractError("fit_outcome_models: fold assignment does not cover rows");
    std::vector<std::size_t> counts(static_cast<std::size_t>(n_arms), 0);
    for (int a : arm) {
        detail::require(a >= 0 && a < n_arms, "fit_outcome_models: arm code out of range");
        ++counts[static_cast<std::size_t>(a)];
    }
    for (int t = 0; t < n_arms; ++t) {
        const std::size_t c = counts[static_cast<std::size_t>(t)];
        if (c == 0) throw ContractError("fit_outcome_models: arm " + std::to_string(t) + " has no patients");
        if (mode == FitMode::cross_fitted && c < static_cast<std::size_t>(folds.k))
            throw ContractError("fit_outcome_models: arm " + std::to_string(t) + " has fewer rows than folds");
    }

    OutcomeModelBank bank;
    bank.feature_set = std::move(feature_set);
    bank.mode = mode;
    bank.predictions = Matrix(n, static_cast<std::size_t>(n_arms));
    bank.models.resize(static_cast<std::size_t>(n_arms));

    if (mode == FitMode::in_sample) {
        std::vector<std::optional<GbtModel>> fitted(static_cast<std::size_t>(n_arms));
        parallel_for(static_cast<std::size_t>(n_arms), [&](std::size_t t) {
            std::vector<std::size_t> rows;
            for (std::size_t i = 0; i < n; ++i)
                if (static_cast<std::size_t>(arm[i]) == t) rows.push_back(i);
            const auto yt = take(y, rows);
            fitted[t].emplace(gbt_fit(X.take_rows(rows), yt, cfg.with_seed(derive_seed(cfg.seed, {"outcome", t}))));
        });
        for (std::size_t t = 0; t < fitted.size(); ++t) {
            const auto pred = fitted[t]->predict(X);
            for (std::size_t i = 0; i < n; ++i) bank.predictions(i, t) = clamp_unit(pred[i]);
            bank.models[t].push_back(std::move(*fitted[t]));
        }
        return bank;
    }

    for (int t = 0; t < n_arms; ++t) {
        std::vector<char> eligible(n);
        for (std::size_t i = 0; i < n; ++i) eligible[i] = arm[i] == t ? 1 : 0;
        auto cf = cross_fit_predict(
            X, y, folds,
            [&](const Matrix& Xtr, std::span<const double> ytr, int f) {
                return gbt_fit(Xtr, ytr, cfg.with_seed(derive_seed(cfg.seed, {"outcome", t, f})));
            },
            [](const GbtModel& m, const Matrix& Xte) { return m.predict(Xte); }, eligible);
        for (std::size_t i = 0; i < n; ++i) bank.predictions(i, static_cast<std::size_t>(t)) = clamp_unit(cf.predictions[i]);
        bank.models[static_cast<std::size_t>(t)] = std::move(cf.models);
    }
    return bank;
}

struct PseudoOutcomes {
    std::vector<std::size_t> treated_rows;
    std::vector<double> treated;  // D1 = Y - mu0(X) on treated rows
    std::vector<std::size_t> control_rows;
    std::vector<double> control;  // D0 = mu1(X) - Y on control rows
};

/// Imputed individual effects for a two-arm bank (arm 0 = control, 1 = treated in `arm`).
inline PseudoOutcomes pseudo_outcomes(std::span<const double> y, std::span<const int> arm, const OutcomeModelBank& bank,
                                      int treated_arm = 1, int control_arm = 0) {
    detail::require(bank.n() == y.size() && arm.size() == y.size(), "pseudo_outcomes: length mismatch");
    detail::require(treated_arm < bank.n_arms() && control_arm < bank.n_arms(), "pseudo_outcomes: bank lacks an arm");
    PseudoOutcomes d;
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (arm[i] == treated_arm) {
            d.treated_rows.push_back(i);
            d.treated.push_back(y[i] - bank.mu(i, control_arm));
        } else if (arm[i] == control_arm) {
            d.control_rows.push_back(i);
            d.control.push_back(bank.mu(i, treated_arm) - y[i]);
        }
    }
    return d;
}

struct CateModels {
    GbtModel treated;  // tau1, fit on treated pseudo-outcomes
    GbtModel control;  // tau0, fit on control pseudo-outcomes
};

/// Stage 2: regress each side's pseudo-outcomes on its own patients' features.
inline CateModels fit_cate_models(const Matrix& X_treated, std::span<const double> d_treated, const Matrix& X_control,
                                  std::span<const double> d_control, const GbtConfig& cfg) {
    if (d_treated.size() < 2 || d_control.size() < 2)
        throw ContractError("fit_cate_models: each pseudo-outcome set needs at least 2 rows");
    GbtConfig c = cfg;
    c.objective = Objective::squared_error;
    CateModels m;
    m.treated = gbt_fit(X_treated, d_treated, c.with_seed(derive_seed(cfg.seed, {"cate", "treated"})));
    m.control = gbt_fit(X_control, d_control, c.with_seed(derive_seed(cfg.seed, {"cate", "control"})));
    return m;
}

struct CateEstimate {
    std::vector<double> tau;
    std::vector<double> tau_control;  // tau0(X_i) from the control-side model
    std::vector<double> tau_treated;  // tau1(X_i) from the treated-side model
    double e = 0.5;                   // treated propensity used as weight
};

/// tau = e * tau0 + (1 - e) * tau1, with e = P(treated).
inline CateEstimate combine_cate(std::span<const double> tau_control, std::span<const double> tau_treated, double e) {
    if (tau_control.size() != tau_treated.size()) throw ContractError("combine_cate: length mismatch");
    if (!(e > 0.0 && e < 1.0)) throw ContractError("combine_cate: propensity must lie in (0, 1)");
    CateEstimate c;
    c.e = e;
    c.tau_control.assign(tau_control.begin(), tau_control.end());
    c.tau_treated.assign(tau_treated.begin(), tau_treated.end());
    c.tau.resize(tau_control.size());
    for (std::size_t i = 0; i < c.tau.size(); ++i) c.tau[i] = e * tau_control[i] + (1.0 - e) * tau_treated[i];
    return c;
}

/// Doubly robust score mu1 - mu0 + T (Y - mu1) / e - (1 - T)(Y - mu0) / (1 - e);
/// its conditional mean is the CATE whenever either the bank or e is correct.
inline std::vector<double> dr_scores(std::span<const double> y, std::span<const int> arm01, const OutcomeModelBank& bank, double e) {
    detail::require(bank.n() == y.size() && arm01.size() == y.size() && bank.n_arms() == 2, "dr_scores: needs a two-arm bank covering every row");
    detail::require(e > 0.0 && e < 1.0, "dr_scores: propensity must lie in (0, 1)");
    std::vector<double> s(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double m0 = bank.mu(i, 0), m1 = bank.mu(i, 1);
        s[i] = m1 - m0 + (arm01[i] == 1 ? (y[i] - m1) / e : -(y[i] - m0) / (1.0 - e));
    }
    return s;
}

/// D_gap_i = max_t mu_t(X_i) - mu_{T_i}(X_i).
inline std::vector<double> optimality_gap(const OutcomeModelBank& bank, std::span<const int> arm) {
    detail::require(arm.size() == bank.n(), "optimality_gap: length mismatch");
    std::vector<double> gap(arm.size());
    for (std::size_t i = 0; i < arm.size(); ++i) {
        detail::require(arm[i] >= 0 && arm[i] < bank.n_arms(), "optimality_gap: bank does not cover observed arm");
        double best = bank.mu(i, 0);
        for (int t = 1; t < bank.n_arms(); ++t) best = std::max(best, bank.mu(i, t));
        gap[i] = best - bank.mu(i, arm[i]);
    }
    return gap;
}

/// Rows and 0/1 arm labels for a treated-set vs control-set comparison.
struct BinaryComparison {
    std::vector<std::size_t> rows;  // into the full frame
    std::vector<int> arm;           // 1 = treated set, 0 = control set
};

inline BinaryComparison make_binary_comparison(std::span<const int> arms, const std::vector<int>& treated,
                                               const std::vector<int>& control) {
    std::set<int> t(treated.begin(), treated.end()), c(control.begin(), control.end());
    detail::require(!t.empty() && !c.empty(), "binary comparison needs treated and control arms");
    for (int a : t) detail::require(!c.count(a), "arm " + std::to_string(a) + " is on both sides of a comparison");
    BinaryComparison b;
    for (std::size_t i = 0; i < arms.size(); ++i) {
        if (t.count(arms[i])) {
            b.rows.push_back(i);
            b.arm.push_back(1);
        } else if (c.count(arms[i])) {
            b.rows.push_back(i);
            b.arm.push_back(0);
        }
    }
    return b;
}

struct XLearnerResult {
    OutcomeModelBank bank;
    PseudoOutcomes pseudo;
    CateModels cate_models;
    CateEstimate cate;
    Propensities propensity;
    FoldAssignment folds;
};

/// All three stages on a two-arm problem (arm 1 treated, arm 0 control).
inline XLearnerResult run_xlearner(const Matrix& X, std::span<const double> y, std::span<const int> arm01,
                                   const GbtConfig& outcome_cfg, const GbtConfig& effect_cfg, int k, std::uint64_t seed,
                                   FitMode mode = FitMode::cross_fitted, std::span<const std::uint64_t> row_keys = {}) {
    XLearnerResult r;
    const auto strata = arm_outcome_strata(arm01, y);
    r.folds = stratified_kfold(strata, k, derive_seed(seed, {"xlearner_folds"}), row_keys, "arm x outcome");
    r.bank = fit_outcome_models(X, y, arm01, 2, outcome_cfg.with_seed(derive_seed(seed, {"stage1"})), r.folds, mode);
    r.pseudo = pseudo_outcomes(y, arm01, r.bank);
    r.cate_models = fit_cate_models(X.take_rows(r.pseudo.treated_rows), r.pseudo.treated, X.take_rows(r.pseudo.control_rows),
                                    r.pseudo.control, effect_cfg.with_seed(derive_seed(seed, {"stage2"})));
    r.propensity = empirical_propensity(arm01, 2);
    const auto tau0 = r.cate_models.control.predict(X);
    const auto tau1 = r.cate_models.treated.predict(X);
    r.cate = combine_cate(tau0, tau1, r.propensity.of(1));
    return r;
}

}  // namespace causaltrial
