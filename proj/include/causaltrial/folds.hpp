#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "error.hpp"
#include "matrix.hpp"
#include "parallel.hpp"
#include "rng.hpp"

namespace causaltrial {

struct FoldAssignment {
    std::vector<int> fold;  // per row, in [0, k)
    int k = 0;
    std::string strata_description;
    std::uint64_t seed = 0;

    std::size_t n() const noexcept { return fold.size(); }

    std::vector<std::size_t> test_rows(int f) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < fold.size(); ++i)
            if (fold[i] == f) out.push_back(i);
        return out;
    }

    std::vector<std::size_t> train_rows(int f) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < fold.size(); ++i)
            if (fold[i] != f) out.push_back(i);
        return out;
    }
};

/// Seeded stratified K-fold split.
///
/// Rows of each stratum are ordered by a seeded hash of their key (row position
/// when `row_keys` is empty, position breaking ties) and dealt round-robin to the
/// folds. The dealing offset carries over between strata and starts at a seeded
/// fold, so small strata never leave a fold empty when n >= k. Passing stable
/// per-row keys (patient ids) makes the split follow rows under reordering.
inline FoldAssignment stratified_kfold(std::span<const int> strata, int k, std::uint64_t seed,
                                       std::span<const std::uint64_t> row_keys = {}, std::string description = "") {
    if (k < 2) throw ContractError("stratified_kfold: k must be >= 2");
    if (static_cast<std::size_t>(k) > strata.size())
        throw ContractError("stratified_kfold: k = " + std::to_string(k) + " exceeds n = " + std::to_string(strata.size()));
    if (!row_keys.empty() && row_keys.size() != strata.size()) throw ContractError("stratified_kfold: key length mismatch");

    std::map<int, std::vector<std::size_t>> by_stratum;
    for (std::size_t i = 0; i < strata.size(); ++i) by_stratum[strata[i]].push_back(i);

    FoldAssignment out;
    out.fold.assign(strata.size(), -1);
    out.k = k;
    out.seed = seed;
    out.strata_description = std::move(description);
    Rng offset_rng(seed, {"fold_offset"});
    std::size_t next = offset_rng.below(static_cast<std::uint64_t>(k));
    for (auto& [stratum, rows] : by_stratum) {
        std::vector<std::pair<std::uint64_t, std::size_t>> keyed;
        keyed.reserve(rows.size());
        for (std::size_t r : rows) {
            const std::uint64_t key = row_keys.empty() ? static_cast<std::uint64_t>(r) : row_keys[r];
            keyed.emplace_back(derive_seed(seed, {"fold_row", stratum, key}), row_keys.empty() ? r : 0);
        }
        std::vector<std::size_t> order(rows.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return keyed[a] < keyed[b]; });
        for (std::size_t pos : order) {
            out.fold[rows[pos]] = static_cast<int>(next);
            next = (next + 1) % static_cast<std::size_t>(k);
        }
    }
    return out;
}

/// Joint label used for X-learner cross-fitting: every (arm, outcome) cell is a stratum.
inline std::vector<int> arm_outcome_strata(std::span<const int> arm, std::span<const double> outcome) {
    std::vector<int> s(arm.size());
    for (std::size_t i = 0; i < arm.size(); ++i) s[i] = 2 * arm[i] + (outcome[i] != 0.0 ? 1 : 0);
    return s;
}

inline std::vector<int> outcome_strata(std::span<const double> outcome) {
    std::vector<int> s(outcome.size());
    for (std::size_t i = 0; i < outcome.size(); ++i) s[i] = outcome[i] != 0.0 ? 1 : 0;
    return s;
}

struct NestedFoldPlan {
    FoldAssignment outer;
    std::vector<std::vector<std::size_t>> train_rows;  // per outer fold
    std::vector<std::vector<std::size_t>> test_rows;
};

inline NestedFoldPlan make_nested_plan(FoldAssignment outer) {
    NestedFoldPlan plan;
    for (int f = 0; f < outer.k; ++f) {
        plan.train_rows.push_back(outer.train_rows(f));
        plan.test_rows.push_back(outer.test_rows(f));
    }
    plan.outer = std::move(outer);
    return plan;
}

template <class Model>
struct CrossFit {
    std::vector<double> predictions;  // out-of-fold, one per row
    std::vector<Model> models;        // model f was trained without fold f
};

/// Out-of-fold predictions. Model f is trained on rows outside fold f for which
/// `eligible` is true (all rows when empty) and scores every row of fold f.
///
/// fit_fn(const Matrix& X_train, std::span<const double> y_train, int fold) -> Model
/// predict_fn(const Model&, const Matrix& X_test) -> std::vector<double>
template <class FitFn, class PredictFn>
auto cross_fit_predict(const Matrix& X, std::span<const double> y, const FoldAssignment& folds, FitFn&& fit_fn,
                       PredictFn&& predict_fn, std::span<const char> eligible = {}) {
    using Model = std::decay_t<decltype(fit_fn(X, y, 0))>;
    if (X.rows() != y.size() || folds.n() != y.size()) throw ContractError("cross_fit_predict: length mismatch");
    if (!eligible.empty() && eligible.size() != y.size()) throw ContractError("cross_fit_predict: eligibility mask length mismatch");
    CrossFit<Model> out;
    out.predictions.assign(y.size(), 0.0);
    std::vector<std::optional<Model>> models(static_cast<std::size_t>(folds.k));
    parallel_for(static_cast<std::size_t>(folds.k), [&](std::size_t fi) {
        const int f = static_cast<int>(fi);
        std::vector<std::size_t> train;
        for (std::size_t i = 0; i < y.size(); ++i)
            if (folds.fold[i] != f && (eligible.empty() || eligible[i])) train.push_back(i);
        if (train.empty()) throw ContractError("cross_fit_predict: fold " + std::to_string(f) + " has no training rows");
        const Matrix Xtr = X.take_rows(train);
        const std::vector<double> ytr = take(y, train);
        Model m = fit_fn(Xtr, std::span<const double>(ytr), f);
        const auto test = folds.test_rows(f);
        if (!test.empty()) {
            const auto pred = predict_fn(m, X.take_rows(test));
            for (std::size_t t = 0; t < test.size(); ++t) out.predictions[test[t]] = pred[t];
        }
        models[fi].emplace(std::move(m));
    });
    for (auto& m : models) out.models.push_back(std::move(*m));
    return out;
}

}  // namespace causaltrial
