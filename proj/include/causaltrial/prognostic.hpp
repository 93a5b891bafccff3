#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
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

namespace causaltrial {

/// Mann-Whitney AUROC with midranks: (concordant + ties / 2) / (n1 * n0).
inline double auroc(std::span<const double> probs, std::span<const double> labels) {
    if (probs.size() != labels.size()) throw ContractError("auroc: length mismatch");
    const std::size_t n = probs.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] < probs[b]; });
    double rank_sum = 0.0;
    std::size_t n1 = 0;
    for (std::size_t s = 0; s < n;) {
        std::size_t e = s;
        while (e < n && probs[order[e]] == probs[order[s]]) ++e;
        const double mid = 0.5 * static_cast<double>(s + 1 + e);  // average of ranks s+1 .. e
        for (std::size_t k = s; k < e; ++k)
            if (labels[order[k]] > 0.5) {
                rank_sum += mid;
                ++n1;
            }
        s = e;
    }
    const std::size_t n0 = n - n1;
    if (n1 == 0 || n0 == 0) throw ContractError("auroc: labels contain a single class");
    const double d1 = static_cast<double>(n1);
    return (rank_sum - d1 * (d1 + 1.0) / 2.0) / (d1 * static_cast<double>(n0));
}

inline double brier(std::span<const double> probs, std::span<const double> labels) {
    if (probs.size() != labels.size() || probs.empty()) throw ContractError("brier: length mismatch or empty input");
    double s = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (!(probs[i] >= 0.0 && probs[i] <= 1.0)) throw ContractError("brier: probabilities must lie in [0, 1]");
        const double d = probs[i] - labels[i];
        s += d * d;
    }
    return s / static_cast<double>(probs.size());
}

/// Brier score of the constant prediction mean(Y): Ybar (1 - Ybar).
inline double null_brier(std::span<const double> labels) {
    const double m = mean(labels);
    return m * (1.0 - m);
}

inline double ipa(double b, double b_null) {
    if (!(b_null > 0.0)) throw ContractError("ipa: null Brier must be positive");
    return 1.0 - b / b_null;
}

/// (b_clinical - b_all) / b_null; equals ipa(b_all) - ipa(b_clinical).
inline double incremental_brier(double b_clinical, double b_all, double b_null) {
    if (!(b_null > 0.0)) throw ContractError("incremental_brier: null Brier must be positive");
    return (b_clinical - b_all) / b_null;
}

struct CalibratedProbs {
    std::vector<double> probs;  // one out-of-fold probability per row
    FoldAssignment folds;
    double calibration_fraction = 0.2;
};

/// Seeded split of rows into (fit, calibration) parts, stratified on the binary label.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_holdout(std::span<const std::size_t> rows,
                                                                                       std::span<const double> y, double fraction,
                                                                                       std::uint64_t seed) {
    std::vector<std::size_t> fit, cal;
    for (int cls = 0; cls < 2; ++cls) {
        std::vector<std::size_t> members;
        for (std::size_t i : rows)
            if ((y[i] > 0.5 ? 1 : 0) == cls) members.push_back(i);
        Rng rng(seed, {"holdout", cls});
        rng.shuffle(members);
        const auto m = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(members.size())));
        cal.insert(cal.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(m));
        fit.insert(fit.end(), members.begin() + static_cast<std::ptrdiff_t>(m), members.end());
    }
    std::sort(fit.begin(), fit.end());
    std::sort(cal.begin(), cal.end());
    return {fit, cal};
}

/// Out-of-fold probabilities from a logistic GBT calibrated by isotonic regression.
///
/// Each outer training fold is split (fit, calibration) by `calibration_fraction`;
/// the model is trained on the fit part and the calibrator on raw scores of the
/// calibration part, then both score the held-out fold.
inline CalibratedProbs cv_calibrated_probs(const Matrix& X, std::span<const double> y, const GbtConfig& cfg,
                                           const FoldAssignment& folds, std::uint64_t seed, double calibration_fraction = 0.2) {
    const std::size_t n = y.size();
    if (X.rows() != n || folds.n() != n) throw ContractError("cv_calibrated_probs: length mismatch");
    if (!(calibration_fraction > 0.0 && calibration_fraction < 1.0))
        throw ContractError("cv_calibrated_probs: calibration fraction must lie in (0, 1)");
    GbtConfig c = cfg;
    c.objective = Objective::logistic;
    CalibratedProbs out;
    out.folds = folds;
    out.calibration_fraction = calibration_fraction;
    out.probs.assign(n, std::numeric_limits<double>::quiet_NaN());
    std::vector<std::optional<std::string>> failures(static_cast<std::size_t>(folds.k));
    parallel_for(static_cast<std::size_t>(folds.k), [&](std::size_t f) {
        const int fi = static_cast<int>(f);
        const auto train = folds.train_rows(fi);
        const auto test = folds.test_rows(fi);
        const auto [fit, cal] = stratified_holdout(train, y, calibration_fraction, derive_seed(seed, {"calibration_split", f}));
        const auto ycal = take(y, cal);
        const double pos = std::accumulate(ycal.begin(), ycal.end(), 0.0);
        if (cal.empty() || pos == 0.0 || pos == static_cast<double>(cal.size())) {
            failures[f] = "cv_calibrated_probs: calibration split of fold " + std::to_string(f) + " lacks both classes";
            return;
        }
        const auto model = gbt_fit(X.take_rows(fit), take(y, fit), c.with_seed(derive_seed(seed, {"prognostic_model", f})));
        const auto calibrator = isotonic_fit(model.predict_raw(X.take_rows(cal)), ycal);
        const auto p = isotonic_apply(calibrator, model.predict_raw(X.take_rows(test)));
        for (std::size_t k = 0; k < test.size(); ++k) out.probs[test[k]] = p[k];
    });
    for (const auto& msg : failures)
        if (msg) throw DataError(*msg);
    return out;
}

enum class Metric { auroc, brier };

inline double evaluate(Metric m, std::span<const double> probs, std::span<const double> labels) {
    return m == Metric::auroc ? auroc(probs, labels) : brier(probs, labels);
}

struct MetricDiff {
    double delta = 0.0;  // metric(a) - metric(b)
    Interval ci;
    int B = 0;
    std::uint64_t seed = 0;
};

/// Paired bootstrap of metric(a) - metric(b); single-class resamples are redrawn up to `max_retries` times.
inline MetricDiff metric_diff_ci(std::span<const double> probs_a, std::span<const double> probs_b, std::span<const double> labels,
                                 Metric metric, int B = 5000, std::uint64_t seed = 0, int max_retries = 100) {
    const std::size_t n = labels.size();
    if (probs_a.size() != n || probs_b.size() != n) throw ContractError("metric_diff_ci: length mismatch");
    detail::require(B >= 1, "metric_diff_ci: B must be >= 1");
    MetricDiff r;
    r.delta = evaluate(metric, probs_a, labels) - evaluate(metric, probs_b, labels);
    r.B = B;
    r.seed = seed;
    std::vector<double> draws(static_cast<std::size_t>(B));
    std::vector<char> exhausted(draws.size(), 0);
    parallel_for(draws.size(), [&](std::size_t b) {
        Rng rng(seed, {"metric_boot", b});
        std::vector<double> pa(n), pb(n), yl(n);
        for (int attempt = 0; attempt <= max_retries; ++attempt) {
            double pos = 0.0;
            for (std::size_t k = 0; k < n; ++k) {
                const std::size_t i = rng.below(n);
                pa[k] = probs_a[i];
                pb[k] = probs_b[i];
                yl[k] = labels[i];
                pos += labels[i] > 0.5 ? 1.0 : 0.0;
            }
            if (pos > 0.0 && pos < static_cast<double>(n)) {
                draws[b] = evaluate(metric, pa, yl) - evaluate(metric, pb, yl);
                return;
            }
        }
        exhausted[b] = 1;
    });
    for (char x : exhausted)
        if (x) throw Error("metric_diff_ci: single-class resamples exhausted the retry budget");
    r.ci = bootstrap_interval(std::move(draws), r.delta);
    return r;
}

struct FeatureSetMetrics {
    std::string feature_set;
    double auroc = 0.0;
    double brier = 0.0;
    double ipa = 0.0;
    std::vector<double> probs;
};

struct PrognosticReport {
    std::string cohort;
    std::size_t n = 0;
    std::size_t n_events = 0;
    double null_brier = 0.0;
    FeatureSetMetrics all;
    FeatureSetMetrics reduced;   // feature set without the contrasted group
    MetricDiff delta_auroc;      // AUROC(all) - AUROC(reduced)
    double incremental_brier = 0.0;
};

struct PrognosticOptions {
    GbtConfig model = GbtConfig::prognostic_stage();
    int k = 5;
    int B = 5000;
    double calibration_fraction = 0.2;
    std::uint64_t seed = 0;
};

/// Calibrated out-of-fold prognosis for one cohort with two nested feature sets.
/// Both sets share folds and calibration splits so the comparison is paired.
inline PrognosticReport prognostic_report(const Matrix& X_all, const Matrix& X_reduced, std::span<const double> y, std::string cohort,
                                          const PrognosticOptions& opt, std::string all_name = "all",
                                          std::string reduced_name = "clinical") {
    if (X_all.rows() != y.size() || X_reduced.rows() != y.size()) throw ContractError("prognostic_report: length mismatch");
    PrognosticReport r;
    r.cohort = std::move(cohort);
    r.n = y.size();
    for (double v : y) r.n_events += v > 0.5 ? 1 : 0;
    r.null_brier = null_brier(y);
    const auto folds = stratified_kfold(outcome_strata(y), opt.k, derive_seed(opt.seed, {"prognostic_folds"}), {}, "outcome");
    auto fill = [&](FeatureSetMetrics& m, const Matrix& X, std::string name) {
        m.feature_set = std::move(name);
        m.probs = cv_calibrated_probs(X, y, opt.model, folds, derive_seed(opt.seed, {"prognostic_cv"}), opt.calibration_fraction).probs;
        m.auroc = auroc(m.probs, y);
        m.brier = brier(m.probs, y);
        m.ipa = ipa(m.brier, r.null_brier);
    };
    fill(r.all, X_all, std::move(all_name));
    fill(r.reduced, X_reduced, std::move(reduced_name));
    r.delta_auroc = metric_diff_ci(r.all.probs, r.reduced.probs, y, Metric::auroc, opt.B, derive_seed(opt.seed, {"delta_auroc"}));
    r.incremental_brier = incremental_brier(r.reduced.brier, r.all.brier, r.null_brier);
    return r;
}

inline nlohmann::json to_json(const PrognosticReport& r) {
    auto set = [](const FeatureSetMetrics& m) {
        return nlohmann::json{{"feature_set", m.feature_set}, {"auroc", m.auroc}, {"brier", m.brier}, {"ipa", m.ipa}};
    };
    return {{"cohort", r.cohort},
            {"n", r.n},
            {"n_events", r.n_events},
            {"null_brier", r.null_brier},
            {"all", set(r.all)},
            {"reduced", set(r.reduced)},
            {"delta_auroc", r.delta_auroc.delta},
            {"delta_auroc_ci_lo", r.delta_auroc.ci.lo},
            {"delta_auroc_ci_hi", r.delta_auroc.ci.hi},
            {"B", r.delta_auroc.B},
            {"incremental_brier", r.incremental_brier}};
}

}  // namespace causaltrial
