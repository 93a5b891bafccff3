#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "matrix.hpp"
#include "rng.hpp"
#include "stats.hpp"

namespace causaltrial {

enum class Objective { squared_error, logistic };

inline std::string to_string(Objective o) { return o == Objective::logistic ? "logistic" : "squared_error"; }

inline Objective parse_objective(const std::string& s) {
    if (s == "squared_error") return Objective::squared_error;
    if (s == "logistic") return Objective::logistic;
    throw ContractError("unknown objective '" + s + "'");
}

struct GbtConfig {
    int n_trees = 100;
    int max_depth = 4;
    double learning_rate = 0.05;
    double subsample = 1.0;
    double colsample = 1.0;
    double l2_lambda = 1.0;
    Objective objective = Objective::squared_error;
    int min_samples_leaf = 1;
    std::uint64_t seed = 0;

    void validate() const {
        detail::require(n_trees >= 1, "GbtConfig: n_trees must be >= 1");
        detail::require(max_depth >= 1, "GbtConfig: max_depth must be >= 1");
        detail::require(learning_rate > 0.0 && learning_rate <= 1.0, "GbtConfig: learning_rate must be in (0, 1]");
        detail::require(subsample > 0.0 && subsample <= 1.0, "GbtConfig: subsample must be in (0, 1]");
        detail::require(colsample > 0.0 && colsample <= 1.0, "GbtConfig: colsample must be in (0, 1]");
        detail::require(l2_lambda >= 0.0, "GbtConfig: l2_lambda must be >= 0");
        detail::require(min_samples_leaf >= 1, "GbtConfig: min_samples_leaf must be >= 1");
    }

    GbtConfig with_seed(std::uint64_t s) const {
        GbtConfig c = *this;
        c.seed = s;
        return c;
    }

    /// Per-arm outcome models: 800 trees, depth 4, 0.8/0.8 sampling, lr 0.05, lambda 1.
    static GbtConfig outcome_stage() { return {800, 4, 0.05, 0.8, 0.8, 1.0, Objective::squared_error, 1, 0}; }
    /// Pseudo-outcome and gap regressions: 400 trees, depth 4, 0.8/0.8 sampling.
    static GbtConfig effect_stage() { return {400, 4, 0.05, 0.8, 0.8, 1.0, Objective::squared_error, 1, 0}; }
    /// Prognostic classifier: 600 trees, depth 4, 0.85/0.85 sampling, lr 0.05, lambda 1.
    static GbtConfig prognostic_stage() { return {600, 4, 0.05, 0.85, 0.85, 1.0, Objective::logistic, 1, 0}; }
};

inline nlohmann::json to_json(const GbtConfig& c) {
    return {{"n_trees", c.n_trees},         {"max_depth", c.max_depth}, {"learning_rate", c.learning_rate},
            {"subsample", c.subsample},     {"colsample", c.colsample}, {"l2_lambda", c.l2_lambda},
            {"objective", to_string(c.objective)}, {"min_samples_leaf", c.min_samples_leaf}, {"seed", c.seed}};
}

/// Overlay keys present in `j` onto `base`.
inline GbtConfig gbt_config_from_json(const nlohmann::json& j, GbtConfig base) {
    base.n_trees = j.value("n_trees", base.n_trees);
    base.max_depth = j.value("max_depth", base.max_depth);
    base.learning_rate = j.value("learning_rate", base.learning_rate);
    base.subsample = j.value("subsample", base.subsample);
    base.colsample = j.value("colsample", base.colsample);
    base.l2_lambda = j.value("l2_lambda", base.l2_lambda);
    if (j.contains("objective")) base.objective = parse_objective(j.at("objective").get<std::string>());
    base.min_samples_leaf = j.value("min_samples_leaf", base.min_samples_leaf);
    base.seed = j.value("seed", base.seed);
    base.validate();
    return base;
}

struct TreeNode {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;  // rows with x < threshold go left
    int left = -1;
    int right = -1;
    double weight = 0.0;
    // Fit statistics, kept for inspection.
    double grad_sum = 0.0;
    double hess_sum = 0.0;
    int n_rows = 0;
    double gain = 0.0;

    bool is_leaf() const noexcept { return feature < 0; }
};

struct RegressionTree {
    std::vector<TreeNode> nodes;

    template <class Row>
    double eval(const Row& x) const {
        int i = 0;
        while (!nodes[static_cast<std::size_t>(i)].is_leaf()) {
            const TreeNode& nd = nodes[static_cast<std::size_t>(i)];
            i = x[static_cast<std::size_t>(nd.feature)] < nd.threshold ? nd.left : nd.right;
        }
        return nodes[static_cast<std::size_t>(i)].weight;
    }

    int depth() const {
        std::vector<int> d(nodes.size(), 0);
        int best = 0;
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            if (nodes[i].is_leaf()) continue;
            d[static_cast<std::size_t>(nodes[i].left)] = d[i] + 1;
            d[static_cast<std::size_t>(nodes[i].right)] = d[i] + 1;
            best = std::max(best, d[i] + 1);
        }
        return best;
    }

    bool uses_feature(int f) const {
        return std::any_of(nodes.begin(), nodes.end(), [f](const TreeNode& n) { return n.feature == f; });
    }
};

struct GbtModel {
    double base_score = 0.0;
    std::vector<RegressionTree> trees;
    double learning_rate = 1.0;
    Objective objective = Objective::squared_error;
    std::vector<std::string> column_names;
    std::size_t n_columns = 0;
    std::vector<double> training_loss;  // entry t = loss after t trees

    double raw_row(std::span<const double> x) const {
        double raw = base_score;
        for (const auto& t : trees) raw += learning_rate * t.eval(x);
        return raw;
    }

    double transform(double raw) const { return objective == Objective::logistic ? sigmoid(raw) : raw; }

    std::vector<double> predict_raw(const Matrix& X) const {
        if (X.cols() != n_columns)
            throw ContractError("gbt_predict: expected " + std::to_string(n_columns) + " columns, got " + std::to_string(X.cols()));
        std::vector<double> out(X.rows());
        for (std::size_t i = 0; i < X.rows(); ++i) out[i] = raw_row(X.row(i));
        return out;
    }

    /// Raw scores for squared error, probabilities for logistic.
    std::vector<double> predict(const Matrix& X) const {
        auto out = predict_raw(X);
        if (objective == Objective::logistic)
            for (double& v : out) v = sigmoid(v);
        return out;
    }

    /// Number of trees splitting on column f.
    std::size_t split_usage(int f) const {
        return static_cast<std::size_t>(std::count_if(trees.begin(), trees.end(), [f](const RegressionTree& t) { return t.uses_feature(f); }));
    }
};

namespace detail {

inline double training_loss(Objective obj, std::span<const double> raw, std::span<const double> y) {
    double s = 0.0;
    if (obj == Objective::squared_error) {
        for (std::size_t i = 0; i < y.size(); ++i) s += (raw[i] - y[i]) * (raw[i] - y[i]);
    } else {
        for (std::size_t i = 0; i < y.size(); ++i) {
            // log(1 + e^z) - y z, computed stably
            const double z = raw[i];
            const double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
            s += softplus - y[i] * z;
        }
    }
    return s / static_cast<double>(y.size());
}

/// Exact greedy tree growth over presorted per-feature row lists.
///
/// Each selected feature keeps its own array of in-sample rows sorted by value.
/// Splitting a node stably partitions every array, so a node owns the same
/// [begin, end) range in each of them.
class TreeBuilder {
public:
    TreeBuilder(const std::vector<double>& xcol, std::size_t n, const GbtConfig& cfg) : xcol_(xcol), n_(n), cfg_(cfg) {
        go_left_.assign(n, 0);
    }

    RegressionTree build(std::vector<std::vector<std::uint32_t>>& lists, const std::vector<int>& features,
                         const std::vector<double>& grad, const std::vector<double>& hess) {
        lists_ = &lists;
        features_ = &features;
        grad_ = &grad;
        hess_ = &hess;
        RegressionTree tree;
        const std::size_t m = lists.empty() ? 0 : lists.front().size();
        tmp_.resize(m);
        double G = 0.0, H = 0.0;
        if (!lists.empty())
            for (std::uint32_t r : lists.front()) {
                G += grad[r];
                H += hess[r];
            }
        tree.nodes.emplace_back();
        grow(tree, 0, 0, m, G, H, 0);
        return tree;
    }

private:
    double leaf_weight(double G, double H) const {
        const double denom = H + cfg_.l2_lambda;
        return denom > 0.0 ? -G / denom : 0.0;
    }

    double score(double G, double H) const {
        const double denom = H + cfg_.l2_lambda;
        return denom > 0.0 ? G * G / denom : 0.0;
    }

    void grow(RegressionTree& tree, std::size_t node, std::size_t begin, std::size_t end, double G, double H, int depth) {
        const auto count = static_cast<int>(end - begin);
        {
            TreeNode& nd = tree.nodes[node];
            nd.grad_sum = G;
            nd.hess_sum = H;
            nd.n_rows = count;
            nd.weight = leaf_weight(G, H);
        }
        const int min_leaf = cfg_.min_samples_leaf;
        if (depth >= cfg_.max_depth || count < 2 * min_leaf || lists_->empty()) return;

        const double parent = score(G, H);
        double best_gain = kMinSplitGain;
        int best_slot = -1;
        double best_threshold = 0.0;
        double best_GL = 0.0, best_HL = 0.0;

        for (std::size_t slot = 0; slot < features_->size(); ++slot) {
            const auto f = static_cast<std::size_t>((*features_)[slot]);
            const double* xf = xcol_.data() + f * n_;
            const auto& list = (*lists_)[slot];
            double GL = 0.0, HL = 0.0;
            for (std::size_t k = begin; k + 1 < end; ++k) {
                const std::uint32_t r = list[k];
                GL += (*grad_)[r];
                HL += (*hess_)[r];
                const auto n_left = static_cast<int>(k + 1 - begin);
                if (n_left < min_leaf) continue;
                if (count - n_left < min_leaf) break;
                const double v = xf[r];
                const double v_next = xf[list[k + 1]];
                if (!(v_next > v)) continue;
                const double GR = G - GL;
                const double HR = H - HL;
                const double gain = 0.5 * (score(GL, HL) + score(GR, HR) - parent);
                if (gain > best_gain) {
                    best_gain = gain;
                    best_slot = static_cast<int>(slot);
                    double thr = 0.5 * (v + v_next);
                    if (!(thr > v)) thr = v_next;  // adjacent doubles
                    best_threshold = thr;
                    best_GL = GL;
                    best_HL = HL;
                }
            }
        }
        if (best_slot < 0) return;

        const int split_feature = (*features_)[static_cast<std::size_t>(best_slot)];
        const double* xs = xcol_.data() + static_cast<std::size_t>(split_feature) * n_;
        const auto& split_list = (*lists_)[static_cast<std::size_t>(best_slot)];
        std::size_t n_left = 0;
        for (std::size_t k = begin; k < end; ++k) {
            const std::uint32_t r = split_list[k];
            const bool left = xs[r] < best_threshold;
            go_left_[r] = left ? 1 : 0;
            n_left += left ? 1 : 0;
        }
        for (auto& list : *lists_) {
            std::size_t li = begin, ri = 0;
            for (std::size_t k = begin; k < end; ++k) {
                const std::uint32_t r = list[k];
                if (go_left_[r])
                    list[li++] = r;
                else
                    tmp_[ri++] = r;
            }
            std::copy(tmp_.begin(), tmp_.begin() + static_cast<std::ptrdiff_t>(ri), list.begin() + static_cast<std::ptrdiff_t>(li));
        }

        const auto left_id = static_cast<int>(tree.nodes.size());
        tree.nodes.emplace_back();
        const auto right_id = static_cast<int>(tree.nodes.size());
        tree.nodes.emplace_back();
        {
            TreeNode& nd = tree.nodes[node];
            nd.feature = split_feature;
            nd.threshold = best_threshold;
            nd.left = left_id;
            nd.right = right_id;
            nd.gain = best_gain;
            nd.weight = 0.0;
        }
        const std::size_t mid = begin + n_left;
        grow(tree, static_cast<std::size_t>(left_id), begin, mid, best_GL, best_HL, depth + 1);
        grow(tree, static_cast<std::size_t>(right_id), mid, end, G - best_GL, H - best_HL, depth + 1);
    }

    static constexpr double kMinSplitGain = 1e-12;

    const std::vector<double>& xcol_;
    std::size_t n_;
    const GbtConfig& cfg_;
    std::vector<std::vector<std::uint32_t>>* lists_ = nullptr;
    const std::vector<int>* features_ = nullptr;
    const std::vector<double>* grad_ = nullptr;
    const std::vector<double>* hess_ = nullptr;
    std::vector<char> go_left_;
    std::vector<std::uint32_t> tmp_;
};

/// Row i of a column-major buffer, indexable by feature.
struct ColumnRow {
    const double* data;
    std::size_t n;
    std::size_t i;
    double operator[](std::size_t f) const noexcept { return data[f * n + i]; }
};

inline std::size_t sample_count(double rate, std::size_t n) {
    const auto k = static_cast<std::size_t>(std::llround(rate * static_cast<double>(n)));
    return std::clamp<std::size_t>(k, 1, n);
}

}  // namespace detail

/// Second-order gradient boosting with L2 leaf penalty and per-tree row/column subsampling.
inline GbtModel gbt_fit(const Matrix& X, std::span<const double> y, const GbtConfig& cfg,
                        std::vector<std::string> column_names = {}) {
    cfg.validate();
    const std::size_t n = X.rows();
    const std::size_t p = X.cols();
    if (n != y.size()) throw ContractError("gbt_fit: X has " + std::to_string(n) + " rows but y has " + std::to_string(y.size()));
    if (n < 2) throw ContractError("gbt_fit: need at least 2 rows");
    if (n < static_cast<std::size_t>(cfg.min_samples_leaf)) throw ContractError("gbt_fit: fewer rows than min_samples_leaf");
    if (p == 0) throw ContractError("gbt_fit: no feature columns");
    for (double v : y)
        if (!std::isfinite(v)) throw ContractError("gbt_fit: non-finite target");
    for (double v : X.data())
        if (!std::isfinite(v)) throw ContractError("gbt_fit: feature matrix has missing or non-finite values");
    if (cfg.objective == Objective::logistic)
        for (double v : y)
            if (v < 0.0 || v > 1.0) throw ContractError("gbt_fit: logistic targets must lie in [0, 1]");

    GbtModel model;
    model.learning_rate = cfg.learning_rate;
    model.objective = cfg.objective;
    model.n_columns = p;
    model.column_names = std::move(column_names);
    const double ybar = mean(y);
    if (cfg.objective == Objective::squared_error) {
        model.base_score = ybar;
    } else {
        const double q = std::clamp(ybar, 1e-6, 1.0 - 1e-6);
        model.base_score = std::log(q / (1.0 - q));
    }

    std::vector<double> xcol(n * p);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < p; ++j) xcol[j * n + i] = X(i, j);

    std::vector<std::vector<std::uint32_t>> order(p);
    for (std::size_t j = 0; j < p; ++j) {
        auto& o = order[j];
        o.resize(n);
        std::iota(o.begin(), o.end(), 0u);
        const double* xj = xcol.data() + j * n;
        std::stable_sort(o.begin(), o.end(), [xj](std::uint32_t a, std::uint32_t b) { return xj[a] < xj[b]; });
    }

    std::vector<double> raw(n, model.base_score), grad(n), hess(n);
    model.training_loss.reserve(static_cast<std::size_t>(cfg.n_trees) + 1);
    model.training_loss.push_back(detail::training_loss(cfg.objective, raw, y));

    const std::size_t m = detail::sample_count(cfg.subsample, n);
    const std::size_t k = detail::sample_count(cfg.colsample, p);
    detail::TreeBuilder builder(xcol, n, cfg);
    std::vector<char> in_sample(n, 1);
    std::vector<std::size_t> row_perm(n), col_perm(p);
    std::vector<std::vector<std::uint32_t>> lists(k);
    model.trees.reserve(static_cast<std::size_t>(cfg.n_trees));

    for (int t = 0; t < cfg.n_trees; ++t) {
        Rng rng(cfg.seed, {"gbt_tree", t});
        if (m < n) {
            std::iota(row_perm.begin(), row_perm.end(), std::size_t{0});
            rng.shuffle(row_perm);
            std::fill(in_sample.begin(), in_sample.end(), 0);
            for (std::size_t i = 0; i < m; ++i) in_sample[row_perm[i]] = 1;
        }
        std::vector<int> features(k);
        if (k < p) {
            std::iota(col_perm.begin(), col_perm.end(), std::size_t{0});
            rng.shuffle(col_perm);
            for (std::size_t c = 0; c < k; ++c) features[c] = static_cast<int>(col_perm[c]);
            std::sort(features.begin(), features.end());
        } else {
            std::iota(features.begin(), features.end(), 0);
        }
        for (std::size_t c = 0; c < k; ++c) {
            auto& list = lists[c];
            list.clear();
            for (std::uint32_t r : order[static_cast<std::size_t>(features[c])])
                if (in_sample[r]) list.push_back(r);
        }

        if (cfg.objective == Objective::squared_error) {
            for (std::size_t i = 0; i < n; ++i) {
                grad[i] = raw[i] - y[i];
                hess[i] = 1.0;
            }
        } else {
            for (std::size_t i = 0; i < n; ++i) {
                const double pr = sigmoid(raw[i]);
                grad[i] = pr - y[i];
                hess[i] = pr * (1.0 - pr);
            }
        }

        RegressionTree tree = builder.build(lists, features, grad, hess);
        for (std::size_t i = 0; i < n; ++i) raw[i] += cfg.learning_rate * tree.eval(detail::ColumnRow{xcol.data(), n, i});
        model.trees.push_back(std::move(tree));
        model.training_loss.push_back(detail::training_loss(cfg.objective, raw, y));
    }
    return model;
}

inline std::vector<double> gbt_predict(const GbtModel& model, const Matrix& X) { return model.predict(X); }

/// Debug dump of the ensemble; not a stable format.
inline nlohmann::json to_json(const GbtModel& m) {
    nlohmann::json trees = nlohmann::json::array();
    for (const auto& t : m.trees) {
        nlohmann::json nodes = nlohmann::json::array();
        for (const auto& nd : t.nodes) {
            if (nd.is_leaf())
                nodes.push_back({{"leaf", nd.weight}, {"n", nd.n_rows}});
            else
                nodes.push_back({{"feature", nd.feature}, {"threshold", nd.threshold}, {"left", nd.left}, {"right", nd.right}, {"gain", nd.gain}});
        }
        trees.push_back(nodes);
    }
    return {{"base_score", m.base_score}, {"learning_rate", m.learning_rate}, {"objective", to_string(m.objective)},
            {"columns", m.column_names}, {"trees", trees}};
}

// ---------------------------------------------------------------------------
// Isotonic calibration

/// Left-constant step function: level k holds on [breakpoints[k], breakpoints[k+1]).
struct IsotonicCalibrator {
    std::vector<double> breakpoints;
    std::vector<double> levels;

    double apply(double s) const {
        detail::require(!levels.empty(), "isotonic calibrator is not fitted");
        const auto it = std::upper_bound(breakpoints.begin(), breakpoints.end(), s);
        if (it == breakpoints.begin()) return levels.front();
        return levels[static_cast<std::size_t>(it - breakpoints.begin()) - 1];
    }
};

/// Pool-adjacent-violators fit of labels against scores; tied scores are pooled first.
inline IsotonicCalibrator isotonic_fit(std::span<const double> scores, std::span<const double> labels) {
    if (scores.size() != labels.size()) throw ContractError("isotonic_fit: length mismatch");
    if (scores.size() < 2) throw ContractError("isotonic_fit: need at least 2 points");
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    struct Block {
        double first_score;
        double sum;
        double weight;
        std::size_t n_scores;  // unique scores covered
        double level() const { return sum / weight; }
    };
    std::vector<Block> stack;
    std::size_t i = 0;
    while (i < idx.size()) {
        const double s = scores[idx[i]];
        Block b{s, 0.0, 0.0, 1};
        while (i < idx.size() && scores[idx[i]] == s) {
            b.sum += labels[idx[i]];
            b.weight += 1.0;
            ++i;
        }
        stack.push_back(b);
        while (stack.size() > 1 && stack[stack.size() - 2].level() > stack.back().level()) {
            Block top = stack.back();
            stack.pop_back();
            stack.back().sum += top.sum;
            stack.back().weight += top.weight;
            stack.back().n_scores += top.n_scores;
        }
    }
    IsotonicCalibrator cal;
    for (const auto& b : stack) {
        const double lvl = std::clamp(b.level(), 0.0, 1.0);
        if (!cal.levels.empty() && cal.levels.back() == lvl) continue;
        cal.breakpoints.push_back(b.first_score);
        cal.levels.push_back(lvl);
    }
    return cal;
}

inline std::vector<double> isotonic_apply(const IsotonicCalibrator& cal, std::span<const double> scores) {
    std::vector<double> out(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) out[i] = cal.apply(scores[i]);
    return out;
}

}  // namespace causaltrial
