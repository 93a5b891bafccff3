#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "matrix.hpp"
#include "rng.hpp"
#include "stats.hpp"
#include "trial_data.hpp"

namespace causaltrial {

enum class Link { logistic, linear_clamped };

inline std::string to_string(Link l) { return l == Link::logistic ? "logistic" : "linear_clamped"; }

inline Link parse_link(const std::string& s) {
    if (s == "logistic") return Link::logistic;
    if (s == "linear_clamped") return Link::linear_clamped;
    throw ContractError("unknown link '" + s + "'");
}

/// coefficient * 1[x_feature > threshold]
struct StepTerm {
    std::size_t feature = 0;
    double threshold = 0.0;
    double coefficient = 0.0;
};

/// Generative model for a randomized trial.
///
/// Linear predictor for arm t:
///   eta_t(x) = intercept + prognostic . x + shift[t] + modifiers[t] . x + sum(steps[t])
/// and outcome probability m_t(x) = link(eta_t(x)). Features are the continuous
/// block (standard normal) followed by the binary block (Bernoulli(0.5)).
struct DgpConfig {
    std::size_t n = 500;
    std::vector<double> arm_probs{0.5, 0.5};
    std::size_t n_continuous = 5;
    std::size_t n_binary = 0;
    double intercept = 0.3;
    std::vector<double> prognostic;              // empty = zeros
    std::vector<double> arm_shift;               // empty = zeros
    std::vector<std::vector<double>> modifiers;  // per arm; empty = zeros
    std::vector<std::vector<StepTerm>> steps;    // per arm
    Link link = Link::linear_clamped;
    std::uint64_t seed = 1;
    std::vector<std::string> feature_names;  // empty = x1, x2, ...
    std::vector<std::string> arm_names;      // empty = arm0, arm1, ...
    std::vector<FeatureGroups::Entry> feature_groups;  // empty = one group "all"
    // Emitted continuous column j is location[j] + scale[j] * z; the outcome model sees z.
    std::vector<double> feature_location;  // empty = zeros
    std::vector<double> feature_scale;     // empty = ones
    double missing_rate = 0.0;             // MCAR share of feature cells blanked after outcomes are drawn

    std::size_t n_features() const noexcept { return n_continuous + n_binary; }
    std::size_t n_arms() const noexcept { return arm_probs.size(); }

    void validate() const {
        if (arm_probs.empty()) throw ContractError("DgpConfig: no arms");
        double s = 0.0;
        for (double p : arm_probs) {
            if (!(p >= 0.0 && p <= 1.0)) throw ContractError("DgpConfig: arm probabilities must lie in [0, 1]");
            s += p;
        }
        if (std::abs(s - 1.0) > 1e-9) throw ContractError("DgpConfig: arm probabilities must sum to 1");
        const std::size_t p = n_features();
        if (p == 0) throw ContractError("DgpConfig: need at least one feature");
        if (!prognostic.empty() && prognostic.size() != p) throw ContractError("DgpConfig: prognostic length must equal feature count");
        if (!arm_shift.empty() && arm_shift.size() != n_arms()) throw ContractError("DgpConfig: arm_shift length must equal arm count");
        if (!modifiers.empty()) {
            if (modifiers.size() != n_arms()) throw ContractError("DgpConfig: modifiers need one vector per arm");
            for (const auto& m : modifiers)
                if (!m.empty() && m.size() != p) throw ContractError("DgpConfig: modifier length must equal feature count");
        }
        if (!steps.empty() && steps.size() != n_arms()) throw ContractError("DgpConfig: steps need one list per arm");
        for (const auto& arm_steps : steps)
            for (const auto& st : arm_steps)
                if (st.feature >= p) throw ContractError("DgpConfig: step term feature out of range");
        if (!feature_names.empty() && feature_names.size() != p) throw ContractError("DgpConfig: feature_names length mismatch");
        if (!arm_names.empty() && arm_names.size() != n_arms()) throw ContractError("DgpConfig: arm_names length mismatch");
        if (!feature_location.empty() && feature_location.size() != n_continuous)
            throw ContractError("DgpConfig: feature_location needs one value per continuous feature");
        if (!feature_scale.empty() && feature_scale.size() != n_continuous)
            throw ContractError("DgpConfig: feature_scale needs one value per continuous feature");
        for (double v : feature_scale)
            if (!(v > 0.0)) throw ContractError("DgpConfig: feature_scale entries must be positive");
        if (!(missing_rate >= 0.0 && missing_rate < 1.0)) throw ContractError("DgpConfig: missing_rate must lie in [0, 1)");
    }

    std::vector<std::string> resolved_feature_names() const {
        if (!feature_names.empty()) return feature_names;
        std::vector<std::string> out;
        for (std::size_t j = 0; j < n_features(); ++j) out.push_back("x" + std::to_string(j + 1));
        return out;
    }

    std::vector<std::string> resolved_arm_names() const {
        if (!arm_names.empty()) return arm_names;
        std::vector<std::string> out;
        for (std::size_t t = 0; t < n_arms(); ++t) out.push_back("arm" + std::to_string(t));
        return out;
    }

    /// Oracle outcome probability of arm t at feature vector x.
    double outcome_probability(std::span<const double> x, std::size_t t) const {
        double eta = intercept;
        for (std::size_t j = 0; j < x.size(); ++j) {
            if (!prognostic.empty()) eta += prognostic[j] * x[j];
            if (!modifiers.empty() && !modifiers[t].empty()) eta += modifiers[t][j] * x[j];
        }
        if (!arm_shift.empty()) eta += arm_shift[t];
        if (!steps.empty())
            for (const auto& st : steps[t])
                if (x[st.feature] > st.threshold) eta += st.coefficient;
        return link == Link::logistic ? sigmoid(eta) : std::clamp(eta, 0.01, 0.99);
    }
};

inline nlohmann::json to_json(const DgpConfig& c) {
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& arm_steps : c.steps) {
        nlohmann::json a = nlohmann::json::array();
        for (const auto& st : arm_steps) a.push_back({{"feature", st.feature}, {"threshold", st.threshold}, {"coefficient", st.coefficient}});
        steps.push_back(a);
    }
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& [name, cols] : c.feature_groups) groups.push_back({{"name", name}, {"features", cols}});
    return {{"n", c.n},
            {"arm_probs", c.arm_probs},
            {"n_continuous", c.n_continuous},
            {"n_binary", c.n_binary},
            {"intercept", c.intercept},
            {"prognostic", c.prognostic},
            {"arm_shift", c.arm_shift},
            {"modifiers", c.modifiers},
            {"steps", steps},
            {"link", to_string(c.link)},
            {"seed", c.seed},
            {"feature_names", c.feature_names},
            {"arm_names", c.arm_names},
            {"feature_groups", groups},
            {"feature_location", c.feature_location},
            {"feature_scale", c.feature_scale},
            {"missing_rate", c.missing_rate}};
}

inline DgpConfig dgp_config_from_json(const nlohmann::json& j) {
    DgpConfig c;
    c.n = j.value("n", c.n);
    c.arm_probs = j.value("arm_probs", c.arm_probs);
    c.n_continuous = j.value("n_continuous", c.n_continuous);
    c.n_binary = j.value("n_binary", c.n_binary);
    c.intercept = j.value("intercept", c.intercept);
    c.prognostic = j.value("prognostic", c.prognostic);
    c.arm_shift = j.value("arm_shift", c.arm_shift);
    c.modifiers = j.value("modifiers", c.modifiers);
    if (j.contains("steps"))
        for (const auto& a : j.at("steps")) {
            std::vector<StepTerm> arm_steps;
            for (const auto& st : a)
                arm_steps.push_back({st.at("feature").get<std::size_t>(), st.value("threshold", 0.0), st.at("coefficient").get<double>()});
            c.steps.push_back(arm_steps);
        }
    if (j.contains("link")) c.link = parse_link(j.at("link").get<std::string>());
    c.seed = j.value("seed", c.seed);
    c.feature_names = j.value("feature_names", c.feature_names);
    c.arm_names = j.value("arm_names", c.arm_names);
    if (j.contains("feature_groups"))
        for (const auto& g : j.at("feature_groups"))
            c.feature_groups.emplace_back(g.at("name").get<std::string>(), g.at("features").get<std::vector<std::string>>());
    c.feature_location = j.value("feature_location", c.feature_location);
    c.feature_scale = j.value("feature_scale", c.feature_scale);
    c.missing_rate = j.value("missing_rate", c.missing_rate);
    c.validate();
    return c;
}

struct SyntheticTrial {
    TrialFrame frame;
    Matrix outcome_prob;  // m_t(X_i), n x arms
    Matrix oracle_cate;   // m_t(X_i) - m_0(X_i)
    std::vector<int> best_arm;
    DgpConfig config;
};

/// Draw a trial. Each feature column, the arm draws and the outcome draws use
/// their own keyed streams, so adding trailing features leaves earlier columns,
/// arms and outcomes unchanged.
inline SyntheticTrial generate(const DgpConfig& cfg) {
    cfg.validate();
    const std::size_t n = cfg.n;
    const std::size_t p = cfg.n_features();
    const std::size_t k = cfg.n_arms();
    SyntheticTrial s;
    s.config = cfg;
    TrialFrame& f = s.frame;
    f.feature_names = cfg.resolved_feature_names();
    f.arm_names = cfg.resolved_arm_names();
    f.features = Matrix(n, p);
    for (std::size_t j = 0; j < cfg.n_continuous; ++j) {
        Rng rng(cfg.seed, {"continuous", j});
        for (std::size_t i = 0; i < n; ++i) f.features(i, j) = rng.normal();
    }
    for (std::size_t j = 0; j < cfg.n_binary; ++j) {
        Rng rng(cfg.seed, {"binary", j});
        for (std::size_t i = 0; i < n; ++i) f.features(i, cfg.n_continuous + j) = rng.bernoulli(0.5) ? 1.0 : 0.0;
    }
    Rng arm_rng(cfg.seed, {"arms"});
    Rng outcome_rng(cfg.seed, {"outcomes"});
    f.arm.resize(n);
    f.outcome.resize(n);
    f.patient_ids.resize(n);
    s.outcome_prob = Matrix(n, k);
    s.oracle_cate = Matrix(n, k);
    s.best_arm.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "P%06zu", i + 1);
        f.patient_ids[i] = id;
        const auto x = f.features.row(i);
        int best = 0;
        for (std::size_t t = 0; t < k; ++t) {
            s.outcome_prob(i, t) = cfg.outcome_probability(x, t);
            if (s.outcome_prob(i, t) > s.outcome_prob(i, static_cast<std::size_t>(best))) best = static_cast<int>(t);
        }
        for (std::size_t t = 0; t < k; ++t) s.oracle_cate(i, t) = s.outcome_prob(i, t) - s.outcome_prob(i, 0);
        s.best_arm[i] = best;
        f.arm[i] = static_cast<int>(arm_rng.categorical(cfg.arm_probs));
        f.outcome[i] = outcome_rng.bernoulli(s.outcome_prob(i, static_cast<std::size_t>(f.arm[i]))) ? 1.0 : 0.0;
    }
    if (!cfg.feature_location.empty() || !cfg.feature_scale.empty())
        for (std::size_t j = 0; j < cfg.n_continuous; ++j) {
            const double loc = cfg.feature_location.empty() ? 0.0 : cfg.feature_location[j];
            const double sc = cfg.feature_scale.empty() ? 1.0 : cfg.feature_scale[j];
            for (std::size_t i = 0; i < n; ++i) f.features(i, j) = loc + sc * f.features(i, j);
        }
    if (cfg.missing_rate > 0.0)
        for (std::size_t j = 0; j < p; ++j) {
            Rng rng(cfg.seed, {"missing", j});
            for (std::size_t i = 0; i < n; ++i)
                if (rng.bernoulli(cfg.missing_rate)) f.features(i, j) = kMissing;
        }
    f.groups = cfg.feature_groups.empty() ? FeatureGroups::single("all", f.feature_names) : FeatureGroups(cfg.feature_groups);
    return s;
}

/// Expected outcome rate if every patient received policy[i].
inline double oracle_policy_value(const SyntheticTrial& trial, std::span<const int> policy) {
    detail::require(policy.size() == trial.frame.n(), "oracle_policy_value: policy must cover every patient");
    double s = 0.0;
    for (std::size_t i = 0; i < policy.size(); ++i) {
        detail::require(policy[i] >= 0 && static_cast<std::size_t>(policy[i]) < trial.outcome_prob.cols(),
                        "oracle_policy_value: arm out of range");
        s += trial.outcome_prob(i, static_cast<std::size_t>(policy[i]));
    }
    return s / static_cast<double>(policy.size());
}

}  // namespace causaltrial
