#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "stats.hpp"
#include "trial_data.hpp"

namespace causaltrial {

enum class Comparator { less, greater_equal };

/// Predicate `feature <cmp> threshold`; no threshold means the cohort median.
/// An empty feature selects every patient.
struct SubgroupSpec {
    std::string name;
    std::string feature;
    Comparator cmp = Comparator::greater_equal;
    std::optional<double> threshold;

    static SubgroupSpec everyone(std::string name = "Overall") { return {std::move(name), "", Comparator::greater_equal, std::nullopt}; }
};

struct SubgroupAteResult {
    std::string name;
    std::string feature;
    std::optional<double> threshold;  // resolved value
    std::size_t n = 0, n_treated = 0, n_control = 0;
    double mean_treated = 0.0, mean_control = 0.0;
    double ate = 0.0;
    Interval ci;
    int B = 0;
    std::uint64_t seed = 0;
};

/// Threshold actually applied; medians come from the whole frame before masking.
inline std::optional<double> resolve_threshold(const TrialFrame& frame, const SubgroupSpec& spec) {
    if (spec.feature.empty()) return std::nullopt;
    if (spec.threshold) return spec.threshold;
    const std::size_t j = frame.feature_index(spec.feature);
    std::vector<double> col(frame.n());
    for (std::size_t i = 0; i < frame.n(); ++i) col[i] = frame.features(i, j);
    return median(std::move(col));
}

inline std::vector<char> subgroup_mask(const TrialFrame& frame, const SubgroupSpec& spec) {
    std::vector<char> in(frame.n(), 1);
    if (spec.feature.empty()) return in;
    const std::size_t j = frame.feature_index(spec.feature);
    const double t = *resolve_threshold(frame, spec);
    for (std::size_t i = 0; i < frame.n(); ++i) {
        const double v = frame.features(i, j);
        in[i] = (spec.cmp == Comparator::less ? v < t : v >= t) ? 1 : 0;
    }
    return in;
}

struct SubgroupCells {
    std::vector<double> treated;  // outcomes of treated members
    std::vector<double> control;
};

inline SubgroupCells subgroup_cells(const TrialFrame& frame, const SubgroupSpec& spec, const std::vector<int>& treated_arms,
                                    int control_arm) {
    const std::set<int> t(treated_arms.begin(), treated_arms.end());
    detail::require(!t.empty(), "subgroup_ate: no treated arms");
    detail::require(!t.count(control_arm), "subgroup_ate: control arm is also listed as treated");
    const auto in = subgroup_mask(frame, spec);
    SubgroupCells c;
    for (std::size_t i = 0; i < frame.n(); ++i) {
        if (!in[i]) continue;
        if (t.count(frame.arm[i]))
            c.treated.push_back(frame.outcome[i]);
        else if (frame.arm[i] == control_arm)
            c.control.push_back(frame.outcome[i]);
    }
    if (c.treated.empty() || c.control.empty())
        throw ContractError("subgroup '" + spec.name + "': needs at least one treated and one control patient");
    return c;
}

/// Difference in mean outcome between treated and control members of the subgroup.
inline SubgroupAteResult subgroup_ate(const TrialFrame& frame, const SubgroupSpec& spec, const std::vector<int>& treated_arms,
                                      int control_arm) {
    const auto c = subgroup_cells(frame, spec, treated_arms, control_arm);
    SubgroupAteResult r;
    r.name = spec.name;
    r.feature = spec.feature;
    r.threshold = resolve_threshold(frame, spec);
    r.n_treated = c.treated.size();
    r.n_control = c.control.size();
    r.n = r.n_treated + r.n_control;
    r.mean_treated = mean(c.treated);
    r.mean_control = mean(c.control);
    r.ate = r.mean_treated - r.mean_control;
    return r;
}

/// Stratified bootstrap: treated and control members are resampled separately.
inline Interval subgroup_ate_ci(const SubgroupCells& cells, double ate, int B = 5000, std::uint64_t seed = 0,
                                CiMethod method = CiMethod::percentile) {
    detail::require(B >= 1, "subgroup_ate_ci: B must be >= 1");
    detail::require(!cells.treated.empty() && !cells.control.empty(), "subgroup_ate_ci: empty cell");
    std::vector<double> draws(static_cast<std::size_t>(B));
    parallel_for(draws.size(), [&](std::size_t b) {
        Rng rng(seed, {"subgroup_boot", b});
        auto resampled_mean = [&](const std::vector<double>& v) {
            double s = 0.0;
            for (std::size_t k = 0; k < v.size(); ++k) s += v[rng.below(v.size())];
            return s / static_cast<double>(v.size());
        };
        const double mt = resampled_mean(cells.treated);
        draws[b] = mt - resampled_mean(cells.control);
    });
    return bootstrap_interval(std::move(draws), ate, method);
}

inline SubgroupAteResult subgroup_ate_with_ci(const TrialFrame& frame, const SubgroupSpec& spec, const std::vector<int>& treated_arms,
                                              int control_arm, int B, std::uint64_t seed) {
    auto r = subgroup_ate(frame, spec, treated_arms, control_arm);
    r.ci = subgroup_ate_ci(subgroup_cells(frame, spec, treated_arms, control_arm), r.ate, B, derive_seed(seed, {std::string_view(spec.name)}));
    r.B = B;
    r.seed = seed;
    return r;
}

/// Roles used by the default suite; each maps to a frame column.
inline const std::vector<std::string>& subgroup_roles() {
    static const std::vector<std::string> roles{"calprotectin", "age", "crp", "bionaive", "pmayo"};
    return roles;
}

/// Overall row plus paired clinical-threshold splits. The "bionaive" column is 1 for
/// patients without prior biologic exposure.
inline std::vector<SubgroupSpec> default_subgroup_suite(const TrialFrame& frame, const std::map<std::string, std::string>& roles) {
    for (const auto& role : subgroup_roles()) {
        const auto it = roles.find(role);
        if (it == roles.end()) throw ContractError("subgroup suite: role '" + role + "' is not mapped to a feature");
        frame.feature_index(it->second);
    }
    const auto& f = [&](const char* role) { return roles.at(role); };
    using C = Comparator;
    return {SubgroupSpec::everyone(),
            {"Fecal calprotectin <150", f("calprotectin"), C::less, 150.0},
            {"Fecal calprotectin >=150", f("calprotectin"), C::greater_equal, 150.0},
            {"Age <median", f("age"), C::less, std::nullopt},
            {"Age >=median", f("age"), C::greater_equal, std::nullopt},
            {"CRP <5", f("crp"), C::less, 5.0},
            {"CRP >=5", f("crp"), C::greater_equal, 5.0},
            {"Biologic-naive", f("bionaive"), C::greater_equal, 0.5},
            {"Biologic-experienced", f("bionaive"), C::less, 0.5},
            {"Partial Mayo <3", f("pmayo"), C::less, 3.0},
            {"Partial Mayo >=3", f("pmayo"), C::greater_equal, 3.0}};
}

inline std::vector<SubgroupAteResult> run_subgroups(const TrialFrame& frame, const std::vector<SubgroupSpec>& specs,
                                                    const std::vector<int>& treated_arms, int control_arm, int B, std::uint64_t seed) {
    std::vector<std::optional<SubgroupAteResult>> out(specs.size());
    parallel_for(specs.size(), [&](std::size_t s) { out[s] = subgroup_ate_with_ci(frame, specs[s], treated_arms, control_arm, B, seed); });
    std::vector<SubgroupAteResult> r;
    for (auto& o : out) r.push_back(std::move(*o));
    return r;
}

inline nlohmann::json to_json(const SubgroupAteResult& r) {
    nlohmann::json j{{"subgroup", r.name},   {"feature", r.feature}, {"n", r.n},           {"n_treated", r.n_treated},
                     {"n_control", r.n_control}, {"ate", r.ate},     {"ci_lo", r.ci.lo},   {"ci_hi", r.ci.hi},
                     {"B", r.B},             {"seed", r.seed}};
    j["threshold"] = r.threshold ? nlohmann::json(*r.threshold) : nlohmann::json(nullptr);
    return j;
}

}  // namespace causaltrial
