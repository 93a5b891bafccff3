#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "boosted_trees.hpp"
#include "error.hpp"
#include "matrix.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "stats.hpp"
#include "trial_data.hpp"
#include "xlearner.hpp"

namespace causaltrial {

struct PermutationProtocol {
    int n_perm = 10;
    int n_repeat = 10;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_perm < 1 || n_repeat < 1) throw ContractError("permutation protocol: n_perm and n_repeat must be >= 1");
    }
};

struct FeatureImportance {
    std::string name;
    double mean = 0.0;  // mean over repeats of the per-repeat average delta-MSE
    double se = 0.0;    // sample sd over repeats / sqrt(n_repeat)
    int rank = 0;       // 1 = largest mean
    std::string group;
    std::size_t trees_using = 0;
    std::vector<double> repeat_means;
};

struct GroupImportance {
    std::string name;
    double sum = 0.0;
    double se = 0.0;  // sqrt of summed member SE^2
    std::size_t n_members = 0;
};

struct ImportanceReport {
    std::string target;  // which model was evaluated
    double baseline_mse = 0.0;
    PermutationProtocol protocol;
    std::vector<FeatureImportance> features;
    std::vector<GroupImportance> groups;

    const FeatureImportance& feature(const std::string& name) const {
        for (const auto& f : features)
            if (f.name == name) return f;
        throw ContractError("importance report has no feature '" + name + "'");
    }

    const GroupImportance& group(const std::string& name) const {
        for (const auto& g : groups)
            if (g.name == name) return g;
        throw ContractError("importance report has no group '" + name + "'");
    }
};

namespace detail {

/// Row i of X with column j taken from row src.
struct SwappedRow {
    const double* row;
    const double* src;
    std::size_t j;
    double operator[](std::size_t k) const { return k == j ? src[j] : row[k]; }
};

inline double mse(std::span<const double> pred, std::span<const double> y) {
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double d = pred[i] - y[i];
        s += d * d;
    }
    return s / static_cast<double>(y.size());
}

inline void assign_ranks(std::vector<FeatureImportance>& feats) {
    std::vector<std::size_t> order(feats.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return feats[a].mean > feats[b].mean; });
    for (std::size_t r = 0; r < order.size(); ++r) feats[order[r]].rank = static_cast<int>(r + 1);
}

}  // namespace detail

/// Increase in MSE when each column is permuted across rows.
///
/// Only trees that split on column j are re-evaluated; the prediction change is
/// accumulated as a delta, so a column no tree uses yields exactly zero.
/// Permutation (repeat r, feature j, draw d) comes from stream (seed, r, j, d).
inline ImportanceReport permutation_importance(const GbtModel& model, const Matrix& X, std::span<const double> y,
                                               const PermutationProtocol& protocol, std::vector<std::string> names = {},
                                               std::string target = "") {
    protocol.validate();
    const std::size_t n = X.rows();
    const std::size_t p = X.cols();
    if (n < 2) throw ContractError("permutation_importance: need at least 2 rows");
    if (y.size() != n) throw ContractError("permutation_importance: target length mismatch");
    if (p != model.n_columns) throw ContractError("permutation_importance: column count does not match model");
    if (names.empty()) names = model.column_names.size() == p ? model.column_names : std::vector<std::string>{};
    if (names.empty())
        for (std::size_t j = 0; j < p; ++j) names.push_back("x" + std::to_string(j + 1));
    if (names.size() != p) throw ContractError("permutation_importance: name count mismatch");

    // Cached per-tree outputs on the unpermuted rows.
    const std::size_t T = model.trees.size();
    std::vector<double> cache(T * n);
    std::vector<double> raw(n, model.base_score);
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = X.row(i);
        for (std::size_t t = 0; t < T; ++t) {
            const double w = model.trees[t].eval(row);
            cache[t * n + i] = w;
            raw[i] += model.learning_rate * w;
        }
    }
    std::vector<double> base_pred(n);
    for (std::size_t i = 0; i < n; ++i) base_pred[i] = model.transform(raw[i]);

    ImportanceReport rep;
    rep.target = std::move(target);
    rep.protocol = protocol;
    rep.baseline_mse = detail::mse(base_pred, y);
    rep.features.resize(p);

    parallel_for(p, [&](std::size_t j) {
        FeatureImportance& fi = rep.features[j];
        fi.name = names[j];
        std::vector<std::size_t> used;
        for (std::size_t t = 0; t < T; ++t)
            if (model.trees[t].uses_feature(static_cast<int>(j))) used.push_back(t);
        fi.trees_using = used.size();
        fi.repeat_means.assign(static_cast<std::size_t>(protocol.n_repeat), 0.0);
        if (used.empty()) return;  // every draw is exactly zero
        std::vector<double> pred(n);
        for (int r = 0; r < protocol.n_repeat; ++r) {
            double acc = 0.0;
            for (int d = 0; d < protocol.n_perm; ++d) {
                Rng rng(protocol.seed, {"perm", r, j, d});
                const auto perm = rng.permutation(n);
                for (std::size_t i = 0; i < n; ++i) {
                    const detail::SwappedRow row{X.row(i).data(), X.row(perm[i]).data(), j};
                    double delta = 0.0;
                    for (std::size_t t : used) delta += model.trees[t].eval(row) - cache[t * n + i];
                    pred[i] = delta == 0.0 ? base_pred[i] : model.transform(raw[i] + model.learning_rate * delta);
                }
                acc += detail::mse(pred, y) - rep.baseline_mse;
            }
            fi.repeat_means[static_cast<std::size_t>(r)] = acc / protocol.n_perm;
        }
    });
    for (auto& fi : rep.features) {
        fi.mean = mean(fi.repeat_means);
        fi.se = sample_sd(fi.repeat_means) / std::sqrt(static_cast<double>(protocol.n_repeat));
    }
    detail::assign_ranks(rep.features);
    return rep;
}

/// Sum member means per group; SE adds in quadrature. Groups with no reported member are skipped.
inline std::vector<GroupImportance> group_importance(ImportanceReport& rep, const FeatureGroups& groups) {
    for (auto& f : rep.features) f.group = groups.group_of(f.name);
    std::vector<GroupImportance> out;
    for (const auto& [name, members] : groups.entries()) {
        GroupImportance g;
        g.name = name;
        double var = 0.0;
        for (const auto& f : rep.features) {
            if (f.group != name) continue;
            g.sum += f.mean;
            var += f.se * f.se;
            ++g.n_members;
        }
        g.se = std::sqrt(var);
        if (g.n_members > 0) out.push_back(g);
    }
    rep.groups = out;
    return out;
}

struct GapImportance {
    std::vector<double> gap;
    GbtModel model;
    ImportanceReport report;
};

/// Fit a squared-error model to the optimality gap and permute its inputs.
inline GapImportance gap_importance(const Matrix& X, const OutcomeModelBank& bank, std::span<const int> arm, const GbtConfig& cfg,
                                    const PermutationProtocol& protocol, std::vector<std::string> names = {}) {
    GapImportance g;
    g.gap = optimality_gap(bank, arm);
    GbtConfig c = cfg;
    c.objective = Objective::squared_error;
    g.model = gbt_fit(X, g.gap, c, names);
    g.report = permutation_importance(g.model, X, g.gap, protocol, std::move(names), "optimality_gap");
    return g;
}

inline nlohmann::json to_json(const ImportanceReport& r) {
    nlohmann::json feats = nlohmann::json::array();
    for (const auto& f : r.features)
        feats.push_back({{"feature", f.name},
                         {"mean", f.mean},
                         {"se", f.se},
                         {"ci95_half_width", 1.96 * f.se},
                         {"rank", f.rank},
                         {"group", f.group},
                         {"trees_using", f.trees_using}});
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& g : r.groups) groups.push_back({{"group", g.name}, {"sum", g.sum}, {"se", g.se}, {"n_features", g.n_members}});
    return {{"target", r.target},
            {"baseline_mse", r.baseline_mse},
            {"n_perm", r.protocol.n_perm},
            {"n_repeat", r.protocol.n_repeat},
            {"seed", r.protocol.seed},
            {"features", feats},
            {"groups", groups}};
}

}  // namespace causaltrial
