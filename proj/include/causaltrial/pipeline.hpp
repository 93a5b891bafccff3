#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "blp_test.hpp"
#include "boosted_trees.hpp"
#include "error.hpp"
#include "folds.hpp"
#include "importance.hpp"
#include "policy_eval.hpp"
#include "prognostic.hpp"
#include "rng.hpp"
#include "stats.hpp"
#include "subgroup.hpp"
#include "synth.hpp"
#include "trial_data.hpp"
#include "xlearner.hpp"

namespace causaltrial {

inline constexpr const char* kSoftwareName = "causaltrial";
inline constexpr const char* kSoftwareVersion = "1.0.0";

/// Raised by run(); carries the failing stage name.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& what) : Error("stage '" + stage + "': " + what), stage_(std::move(stage)) {}
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

struct ComparisonSpec {
    std::string name;
    std::vector<std::string> treated;  // arm names pooled as treated
    std::string control;
};

struct SubgroupConfig {
    bool enabled = false;
    std::string comparison;                    // empty: first comparison
    std::map<std::string, std::string> roles;  // default suite when `specs` is empty
    std::vector<SubgroupSpec> specs;
};

/// Response regressed on the BLP design: the X-learner CATE estimates, or the
/// per-patient doubly robust scores from the same cross-fitted stage-1 bank.
enum class BlpTarget { xlearner_cate, dr_score };

inline std::string to_string(BlpTarget t) { return t == BlpTarget::dr_score ? "dr_score" : "xlearner_cate"; }

struct AnalysisConfig {
    // Exactly one data source.
    std::string csv_path;
    std::string schema_path;
    std::optional<nlohmann::json> schema;
    std::optional<DgpConfig> synthetic;

    std::uint64_t seed = 20240601;
    int k = 5;
    int policy_B = 5000;
    int prognostic_B = 5000;
    int subgroup_B = 5000;
    int blp_B = 1000;
    CiMethod ci_method = CiMethod::percentile;
    MultiplierLaw blp_law = MultiplierLaw::gaussian;
    int n_perm = 10;
    int n_repeat = 10;
    GbtConfig outcome = GbtConfig::outcome_stage();
    GbtConfig effect = GbtConfig::effect_stage();
    GbtConfig prognostic = GbtConfig::prognostic_stage();
    double calibration_fraction = 0.2;

    std::vector<ComparisonSpec> comparisons;  // empty: every other arm pooled vs arm 0
    bool multi_arm = true;                    // needs >= 3 arms
    std::string contrast_group;               // dropped to form the reduced feature set
    std::string reduced_name;                 // default "without_<group>"
    std::vector<std::string> blp_groups;      // design order; empty: all groups
    std::string blp_test_group;               // empty: contrast group, else last BLP group
    bool run_prognostic = true;
    std::vector<std::string> prognostic_cohorts;  // "full" and/or arm names; empty: full + each arm
    SubgroupConfig subgroups;
    FitMode policy_mode = FitMode::cross_fitted;  // which fit mode the headline contrast uses
    std::string output_dir = "out";
};

namespace detail {

inline std::string resolve_path(const std::string& p, const std::string& base) {
    if (p.empty()) return p;
    std::filesystem::path path(p);
    if (path.is_relative() && !base.empty()) path = std::filesystem::path(base) / path;
    return path.lexically_normal().string();
}

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw ContractError(where + ": expected an object");
    for (const auto& [k, v] : j.items())
        if (!allowed.count(k)) throw ContractError(where + ": unknown key '" + k + "'");
}

inline Comparator parse_comparator(const std::string& s) {
    if (s == "<") return Comparator::less;
    if (s == ">=") return Comparator::greater_equal;
    throw ContractError("subgroup comparator must be '<' or '>=', got '" + s + "'");
}

}  // namespace detail

/// Relative data paths resolve against `base_dir` (normally the config file's directory).
inline AnalysisConfig analysis_config_from_json(const nlohmann::json& j, const std::string& base_dir = "") {
    detail::check_keys(j,
                       {"data", "seed", "folds", "bootstrap", "permutation", "models", "comparisons", "multi_arm", "contrast_group",
                        "reduced_name", "blp", "prognostic", "subgroups", "policy", "output_dir", "software"},
                       "config");
    AnalysisConfig c;
    const auto& data = j.at("data");
    detail::check_keys(data, {"csv", "schema", "synthetic"}, "config.data");
    if (data.contains("synthetic")) {
        if (data.contains("csv")) throw ContractError("config.data: give either 'csv' or 'synthetic', not both");
        c.synthetic = dgp_config_from_json(data.at("synthetic"));
    } else {
        c.csv_path = detail::resolve_path(data.at("csv").get<std::string>(), base_dir);
        const auto& s = data.at("schema");
        if (s.is_string())
            c.schema_path = detail::resolve_path(s.get<std::string>(), base_dir);
        else
            c.schema = s;
    }
    c.seed = j.value("seed", c.seed);
    c.k = j.value("folds", c.k);
    if (j.contains("bootstrap")) {
        const auto& b = j.at("bootstrap");
        detail::check_keys(b, {"policy", "prognostic", "subgroup", "blp", "ci_method", "multiplier"}, "config.bootstrap");
        c.policy_B = b.value("policy", c.policy_B);
        c.prognostic_B = b.value("prognostic", c.prognostic_B);
        c.subgroup_B = b.value("subgroup", c.subgroup_B);
        c.blp_B = b.value("blp", c.blp_B);
        if (b.contains("ci_method")) c.ci_method = parse_ci_method(b.at("ci_method").get<std::string>());
        if (b.contains("multiplier")) c.blp_law = parse_multiplier_law(b.at("multiplier").get<std::string>());
    }
    if (j.contains("permutation")) {
        const auto& p = j.at("permutation");
        detail::check_keys(p, {"n_perm", "n_repeat"}, "config.permutation");
        c.n_perm = p.value("n_perm", c.n_perm);
        c.n_repeat = p.value("n_repeat", c.n_repeat);
    }
    if (j.contains("models")) {
        const auto& m = j.at("models");
        detail::check_keys(m, {"outcome", "effect", "prognostic"}, "config.models");
        if (m.contains("outcome")) c.outcome = gbt_config_from_json(m.at("outcome"), c.outcome);
        if (m.contains("effect")) c.effect = gbt_config_from_json(m.at("effect"), c.effect);
        if (m.contains("prognostic")) c.prognostic = gbt_config_from_json(m.at("prognostic"), c.prognostic);
    }
    if (j.contains("comparisons"))
        for (const auto& x : j.at("comparisons")) {
            detail::check_keys(x, {"name", "treated", "control"}, "config.comparisons[]");
            c.comparisons.push_back(
                {x.at("name").get<std::string>(), x.at("treated").get<std::vector<std::string>>(), x.at("control").get<std::string>()});
        }
    c.multi_arm = j.value("multi_arm", c.multi_arm);
    c.contrast_group = j.value("contrast_group", c.contrast_group);
    c.reduced_name = j.value("reduced_name", c.reduced_name);
    if (j.contains("blp")) {
        const auto& b = j.at("blp");
        detail::check_keys(b, {"groups", "test_group"}, "config.blp");
        c.blp_groups = b.value("groups", c.blp_groups);
        c.blp_test_group = b.value("test_group", c.blp_test_group);
    }
    if (j.contains("prognostic")) {
        const auto& p = j.at("prognostic");
        detail::check_keys(p, {"enabled", "cohorts", "calibration_fraction"}, "config.prognostic");
        c.run_prognostic = p.value("enabled", c.run_prognostic);
        c.prognostic_cohorts = p.value("cohorts", c.prognostic_cohorts);
        c.calibration_fraction = p.value("calibration_fraction", c.calibration_fraction);
    }
    if (j.contains("subgroups")) {
        const auto& s = j.at("subgroups");
        detail::check_keys(s, {"enabled", "comparison", "roles", "specs"}, "config.subgroups");
        c.subgroups.enabled = s.value("enabled", true);
        c.subgroups.comparison = s.value("comparison", std::string{});
        if (s.contains("roles")) c.subgroups.roles = s.at("roles").get<std::map<std::string, std::string>>();
        if (s.contains("specs"))
            for (const auto& x : s.at("specs")) {
                detail::check_keys(x, {"name", "feature", "comparator", "threshold"}, "config.subgroups.specs[]");
                SubgroupSpec sp;
                sp.name = x.at("name").get<std::string>();
                sp.feature = x.value("feature", std::string{});
                if (x.contains("comparator")) sp.cmp = detail::parse_comparator(x.at("comparator").get<std::string>());
                if (x.contains("threshold")) {
                    const auto& t = x.at("threshold");
                    if (t.is_string()) {
                        if (t.get<std::string>() != "median") throw ContractError("subgroup threshold must be a number or \"median\"");
                    } else if (!t.is_null()) {
                        sp.threshold = t.get<double>();
                    }
                }
                c.subgroups.specs.push_back(sp);
            }
    }
    if (j.contains("policy")) {
        const auto& p = j.at("policy");
        detail::check_keys(p, {"fit_mode"}, "config.policy");
        const auto m = p.value("fit_mode", std::string("out_of_fold"));
        if (m == "in_sample")
            c.policy_mode = FitMode::in_sample;
        else if (m == "out_of_fold")
            c.policy_mode = FitMode::cross_fitted;
        else
            throw ContractError("config.policy.fit_mode must be 'out_of_fold' or 'in_sample'");
    }
    c.output_dir = j.value("output_dir", c.output_dir);
    return c;
}

inline AnalysisConfig load_analysis_config(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(csv::read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("config '" + path + "': " + e.what());
    }
    const auto base = std::filesystem::path(path).parent_path().string();
    try {
        return analysis_config_from_json(j, base);
    } catch (const nlohmann::json::exception& e) {
        throw ContractError("config '" + path + "': " + e.what());
    }
}

/// Fully resolved configuration; feeding it back to analysis_config_from_json reproduces the run.
inline nlohmann::json to_json(const AnalysisConfig& c) {
    nlohmann::json j;
    if (c.synthetic) {
        j["data"] = {{"synthetic", to_json(*c.synthetic)}};
    } else {
        j["data"]["csv"] = c.csv_path;
        if (c.schema)
            j["data"]["schema"] = *c.schema;
        else
            j["data"]["schema"] = c.schema_path;
    }
    j["seed"] = c.seed;
    j["folds"] = c.k;
    j["bootstrap"] = {{"policy", c.policy_B},   {"prognostic", c.prognostic_B},      {"subgroup", c.subgroup_B},
                      {"blp", c.blp_B},         {"ci_method", to_string(c.ci_method)}, {"multiplier", to_string(c.blp_law)}};
    j["permutation"] = {{"n_perm", c.n_perm}, {"n_repeat", c.n_repeat}};
    j["models"] = {{"outcome", to_json(c.outcome)}, {"effect", to_json(c.effect)}, {"prognostic", to_json(c.prognostic)}};
    nlohmann::json comps = nlohmann::json::array();
    for (const auto& x : c.comparisons) comps.push_back({{"name", x.name}, {"treated", x.treated}, {"control", x.control}});
    j["comparisons"] = comps;
    j["multi_arm"] = c.multi_arm;
    j["contrast_group"] = c.contrast_group;
    j["reduced_name"] = c.reduced_name;
    j["blp"] = {{"groups", c.blp_groups}, {"test_group", c.blp_test_group}};
    j["prognostic"] = {{"enabled", c.run_prognostic}, {"cohorts", c.prognostic_cohorts}, {"calibration_fraction", c.calibration_fraction}};
    nlohmann::json specs = nlohmann::json::array();
    for (const auto& s : c.subgroups.specs) {
        nlohmann::json x{{"name", s.name}, {"feature", s.feature}, {"comparator", s.cmp == Comparator::less ? "<" : ">="}};
        x["threshold"] = s.threshold ? nlohmann::json(*s.threshold) : nlohmann::json("median");
        specs.push_back(x);
    }
    j["subgroups"] = {{"enabled", c.subgroups.enabled}, {"comparison", c.subgroups.comparison}, {"roles", c.subgroups.roles}, {"specs", specs}};
    j["policy"] = {{"fit_mode", to_string(c.policy_mode)}};
    j["output_dir"] = c.output_dir;
    return j;
}

// ---------------------------------------------------------------------------
// Results

struct CateSummary {
    double mean = 0, sd = 0, min = 0, q25 = 0, median = 0, q75 = 0, max = 0, share_positive = 0;
};

inline CateSummary summarize(std::vector<double> v) {
    CateSummary s;
    if (v.empty()) return s;
    s.mean = mean(v);
    s.sd = sample_sd(v);
    std::size_t pos = 0;
    for (double x : v) pos += x > 0.0 ? 1 : 0;
    s.share_positive = static_cast<double>(pos) / static_cast<double>(v.size());
    std::sort(v.begin(), v.end());
    s.min = v.front();
    s.max = v.back();
    s.q25 = quantile_sorted(v, 0.25);
    s.median = quantile_sorted(v, 0.5);
    s.q75 = quantile_sorted(v, 0.75);
    return s;
}

inline nlohmann::json to_json(const CateSummary& s) {
    return {{"mean", s.mean}, {"sd", s.sd},         {"min", s.min}, {"q25", s.q25},
            {"median", s.median}, {"q75", s.q75}, {"max", s.max}, {"share_positive", s.share_positive}};
}

struct PolicyRow {
    std::string analysis;
    PolicyValueResult value;
};

struct PolicyContrast {
    std::string analysis;
    FitMode mode = FitMode::cross_fitted;
    PolicyComparison comparison;
};

struct BlpRow {
    std::string analysis;
    std::string target;
    BlpDesign design;
    BlpResult result;
    std::optional<WaldResult> wald;
    std::string note;
};

struct ImportanceRow {
    std::string analysis;
    ImportanceReport report;
};

struct CateRows {
    std::string analysis;
    std::string feature_set;
    std::vector<std::size_t> rows;  // into the frame
    CateEstimate cate;
    CateSummary summary;
};

struct SubgroupRow {
    SubgroupSpec spec;
    std::optional<SubgroupAteResult> result;
    std::string note;
};

struct RunReport {
    nlohmann::json config;
    nlohmann::json data;
    std::vector<nlohmann::json> comparisons;
    nlohmann::json multi_arm;
    std::vector<PrognosticReport> prognostic;
    std::string prognostic_note;
    std::string subgroup_comparison;
    std::vector<SubgroupRow> subgroups;

    std::vector<CateRows> cates;
    std::vector<ImportanceRow> importance;
    std::vector<BlpRow> blp;
    std::vector<PolicyRow> policy;
    std::vector<PolicyContrast> contrasts;

    std::vector<std::pair<std::string, double>> timings;  // seconds, kept out of report.json
    std::vector<std::string> warnings;
    std::vector<std::string> patient_ids;
    std::vector<int> arm;
    std::vector<double> outcome;
};

namespace detail {

struct FeatureSet {
    std::string name;
    FeatureSelection sel;
};

inline std::vector<std::uint64_t> row_keys(const std::vector<std::string>& ids, std::span<const std::size_t> rows) {
    std::vector<std::uint64_t> k;
    k.reserve(rows.size());
    for (std::size_t i : rows) k.push_back(fnv1a(ids[i]));
    return k;
}

inline int arm_code(const TrialFrame& f, const std::string& name) {
    for (std::size_t a = 0; a < f.arm_names.size(); ++a)
        if (f.arm_names[a] == name) return static_cast<int>(a);
    throw ContractError("unknown arm '" + name + "'");
}

class StageTimer {
public:
    explicit StageTimer(RunReport& r) : r_(r) {}

    template <class Fn>
    void run(const std::string& name, Fn&& fn) {
        const auto t0 = std::chrono::steady_clock::now();
        try {
            fn();
        } catch (const StageError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError(name, e.what());
        }
        r_.timings.emplace_back(name, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }

private:
    RunReport& r_;
};

}  // namespace detail

struct LoadedTrial {
    TrialFrame raw;
    Preprocessed prep;
    std::string fingerprint;  // FNV-1a of the CSV text or of the DGP echo
};

inline LoadedTrial load_trial(const AnalysisConfig& cfg) {
    LoadedTrial t;
    TrialSchema schema;
    if (cfg.synthetic) {
        t.raw = generate(*cfg.synthetic).frame;
        t.fingerprint = std::to_string(detail::fnv1a(to_json(*cfg.synthetic).dump()));
    } else {
        if (cfg.csv_path.empty()) throw ContractError("config.data: no csv path");
        schema = cfg.schema ? schema_from_json(*cfg.schema) : schema_from_json(nlohmann::json::parse(csv::read_file(cfg.schema_path)));
        const auto text = csv::read_file(cfg.csv_path);
        t.raw = parse_trial_csv(text, schema);
        t.fingerprint = std::to_string(detail::fnv1a(text));
    }
    t.prep = preprocess(t.raw, schema.kind_overrides, schema.impute_defaults);
    return t;
}

/// Checks every arm and group the config references against the loaded trial.
inline void validate_against(const AnalysisConfig& cfg, const TrialFrame& f) {
    detail::require(cfg.k >= 2, "config: folds must be >= 2");
    detail::require(cfg.policy_B >= 1 && cfg.prognostic_B >= 1 && cfg.subgroup_B >= 1 && cfg.blp_B >= 2, "config: bootstrap sizes too small");
    for (const auto& c : cfg.comparisons) {
        for (const auto& t : c.treated) detail::arm_code(f, t);
        detail::arm_code(f, c.control);
    }
    auto need_group = [&](const std::string& g, const char* what) {
        if (!g.empty() && !f.groups.contains(g)) throw ContractError(std::string(what) + ": unknown feature group '" + g + "'");
    };
    need_group(cfg.contrast_group, "contrast_group");
    need_group(cfg.blp_test_group, "blp.test_group");
    for (const auto& g : cfg.blp_groups) need_group(g, "blp.groups");
    if (!cfg.contrast_group.empty() && f.groups.names().size() < 2)
        throw ContractError("contrast_group: the reduced feature set would be empty");
    if (!cfg.blp_test_group.empty() && !cfg.blp_groups.empty() &&
        std::find(cfg.blp_groups.begin(), cfg.blp_groups.end(), cfg.blp_test_group) == cfg.blp_groups.end())
        throw ContractError("blp.test_group '" + cfg.blp_test_group + "' is not one of blp.groups");
    for (const auto& c : cfg.prognostic_cohorts)
        if (c != "full") detail::arm_code(f, c);
    if (cfg.subgroups.enabled && !cfg.subgroups.comparison.empty()) {
        bool found = false;
        for (const auto& c : cfg.comparisons) found = found || c.name == cfg.subgroups.comparison;
        if (!found) throw ContractError("subgroups.comparison: unknown comparison '" + cfg.subgroups.comparison + "'");
    }
    for (const auto& s : cfg.subgroups.specs)
        if (!s.feature.empty()) f.feature_index(s.feature);
}

/// Fills defaults that depend on the data (comparisons, group order, cohorts).
inline AnalysisConfig resolve_defaults(AnalysisConfig cfg, const TrialFrame& f) {
    if (cfg.comparisons.empty()) {
        ComparisonSpec c;
        for (int a = 1; a < f.n_arms(); ++a) c.treated.push_back(f.arm_names[static_cast<std::size_t>(a)]);
        c.control = f.arm_names.front();
        c.name = (c.treated.size() == 1 ? c.treated.front() : std::string("pooled")) + " vs " + c.control;
        cfg.comparisons.push_back(c);
    }
    if (cfg.blp_groups.empty()) cfg.blp_groups = f.groups.names();
    if (cfg.blp_test_group.empty()) cfg.blp_test_group = cfg.contrast_group.empty() ? cfg.blp_groups.back() : cfg.contrast_group;
    if (!cfg.contrast_group.empty() && cfg.reduced_name.empty()) cfg.reduced_name = "without_" + cfg.contrast_group;
    if (cfg.prognostic_cohorts.empty()) {
        cfg.prognostic_cohorts.push_back("full");
        for (const auto& a : f.arm_names) cfg.prognostic_cohorts.push_back(a);
    }
    if (cfg.subgroups.enabled && cfg.subgroups.comparison.empty()) cfg.subgroups.comparison = cfg.comparisons.front().name;
    return cfg;
}

/// Executes every configured stage; nothing is written to disk.
inline RunReport run(AnalysisConfig cfg) {
    RunReport rep;
    detail::StageTimer timer(rep);
    LoadedTrial trial;
    timer.run("load", [&] { trial = load_trial(cfg); });
    const TrialFrame& frame = trial.prep.standardized;
    timer.run("validate_config", [&] {
        validate_against(cfg, frame);
        cfg = resolve_defaults(std::move(cfg), frame);
        validate_against(cfg, frame);
    });
    rep.config = to_json(cfg);
    rep.patient_ids = frame.patient_ids;
    rep.arm = frame.arm;
    rep.outcome = frame.outcome;

    {
        nlohmann::json arms = nlohmann::json::array();
        const auto e = empirical_propensity(frame.arm, frame.n_arms());
        for (int a = 0; a < frame.n_arms(); ++a) {
            std::size_t count = 0, events = 0;
            for (std::size_t i = 0; i < frame.n(); ++i)
                if (frame.arm[i] == a) {
                    ++count;
                    events += frame.outcome[i] > 0.5 ? 1 : 0;
                }
            arms.push_back({{"code", a},
                            {"name", frame.arm_names[static_cast<std::size_t>(a)]},
                            {"n", count},
                            {"events", events},
                            {"propensity", e.e[static_cast<std::size_t>(a)]}});
        }
        nlohmann::json groups = nlohmann::json::array();
        for (const auto& [g, m] : frame.groups.entries()) groups.push_back({{"name", g}, {"features", m}});
        rep.data = {{"n", frame.n()},
                    {"n_features", frame.n_features()},
                    {"fingerprint_fnv1a", trial.fingerprint},
                    {"arms", arms},
                    {"feature_groups", groups},
                    {"preprocessing", to_json(trial.prep.report)}};
    }

    // Feature sets: all groups, and all minus the contrast group.
    std::vector<detail::FeatureSet> sets;
    sets.push_back({"all", select_features(frame, frame.groups, frame.groups.names())});
    if (!cfg.contrast_group.empty()) {
        std::vector<std::string> keep;
        for (const auto& g : frame.groups.names())
            if (g != cfg.contrast_group) keep.push_back(g);
        sets.push_back({cfg.reduced_name, select_features(frame, frame.groups, keep)});
    }
    const auto& all = sets.front().sel;
    const BootstrapOptions boot0{cfg.policy_B, 0, cfg.ci_method};
    const PermutationProtocol perm0{cfg.n_perm, cfg.n_repeat, 0};

    auto blp_stage = [&](const std::string& analysis, const Matrix& X, std::span<const double> target, const std::string& target_name,
                         std::uint64_t seed) {
        BlpRow row;
        row.analysis = analysis;
        row.target = target_name;
        row.design = build_design(X, all.names, frame.groups, cfg.blp_groups);
        for (const auto& w : row.design.warnings) rep.warnings.push_back(analysis + ": " + w);
        row.result = multiplier_bootstrap(row.design, target, cfg.blp_B, seed, cfg.blp_law);
        try {
            row.wald = wald_test(row.result, row.design, cfg.blp_test_group);
        } catch (const Error& e) {
            row.note = e.what();
        }
        return row;
    };
    auto blp_json = [&](const BlpRow& b) {
        nlohmann::json j = to_json(b.result);
        j["target"] = b.target;
        j["wald"] = b.wald ? to_json(*b.wald) : nlohmann::json{{"group", cfg.blp_test_group}, {"error", b.note}};
        return j;
    };

    // Binary comparisons.
    for (const auto& comp : cfg.comparisons) {
        timer.run("comparison:" + comp.name, [&] {
            std::vector<int> treated;
            for (const auto& t : comp.treated) treated.push_back(detail::arm_code(frame, t));
            const auto bc = make_binary_comparison(frame.arm, treated, {detail::arm_code(frame, comp.control)});
            const auto y = take(frame.outcome, bc.rows);
            const auto keys = detail::row_keys(frame.patient_ids, bc.rows);
            const std::uint64_t cseed = derive_seed(cfg.seed, {"comparison", std::string_view(comp.name)});
            nlohmann::json cj{{"name", comp.name}, {"treated", comp.treated}, {"control", comp.control}, {"n", bc.rows.size()}};
            std::vector<std::array<PolicyValueResult, 2>> values;  // [set][mode]
            std::optional<XLearnerResult> primary;
            nlohmann::json cates = nlohmann::json::object();
            for (const auto& fs : sets) {
                const Matrix X = fs.sel.X.take_rows(bc.rows);
                auto xr = run_xlearner(X, y, bc.arm, cfg.outcome, cfg.effect, cfg.k, cseed, FitMode::cross_fitted, keys);
                const auto in_bank = fit_outcome_models(X, y, bc.arm, 2, cfg.outcome.with_seed(derive_seed(cseed, {"stage1"})), xr.folds,
                                                        FitMode::in_sample, fs.name);
                xr.bank.feature_set = fs.name;
                std::array<PolicyValueResult, 2> v;
                auto o = boot0;
                o.seed = derive_seed(cseed, {"policy", std::string_view(fs.name), "out_of_fold"});
                v[0] = dr_value(greedy_policy(xr.bank), y, bc.arm, xr.bank, xr.propensity, o);
                o.seed = derive_seed(cseed, {"policy", std::string_view(fs.name), "in_sample"});
                v[1] = dr_value(greedy_policy(in_bank), y, bc.arm, in_bank, xr.propensity, o);
                rep.policy.push_back({comp.name, v[0]});
                rep.policy.push_back({comp.name, v[1]});
                values.push_back(v);
                CateRows cr{comp.name, fs.name, bc.rows, xr.cate, summarize(xr.cate.tau)};
                cates[fs.name] = to_json(cr.summary);
                rep.cates.push_back(std::move(cr));
                if (!primary) primary = std::move(xr);
            }
            cj["propensity_treated"] = primary->propensity.of(1);
            cj["cate"] = cates;

            // Importance of the treated-side stage-2 model on its own training pseudo-outcomes.
            auto protocol = perm0;
            protocol.seed = derive_seed(cseed, {"importance"});
            const Matrix Xt = all.X.take_rows(bc.rows).take_rows(primary->pseudo.treated_rows);
            auto imp = permutation_importance(primary->cate_models.treated, Xt, primary->pseudo.treated, protocol, all.names, "tau_treated");
            group_importance(imp, frame.groups);
            cj["importance"] = to_json(imp);
            rep.importance.push_back({comp.name, std::move(imp)});

            const Matrix Xc = all.X.take_rows(bc.rows);
            nlohmann::json blps = nlohmann::json::array();
            for (const BlpTarget target : {BlpTarget::xlearner_cate, BlpTarget::dr_score}) {
                const auto response = target == BlpTarget::xlearner_cate
                                          ? primary->cate.tau
                                          : dr_scores(y, bc.arm, primary->bank, primary->propensity.of(1));
                auto blp = blp_stage(comp.name, Xc, response, to_string(target), derive_seed(cseed, {"blp", std::string_view(to_string(target))}));
                blps.push_back(blp_json(blp));
                rep.blp.push_back(std::move(blp));
            }
            cj["blp"] = blps;

            nlohmann::json pol = nlohmann::json::array();
            for (const auto& v : values)
                for (const auto& r : v) pol.push_back(to_json(r));
            cj["policy"] = pol;
            nlohmann::json contrasts = nlohmann::json::array();
            if (values.size() == 2)
                for (int m = 0; m < 2; ++m) {
                    const FitMode mode = m == 0 ? FitMode::cross_fitted : FitMode::in_sample;
                    auto o = boot0;
                    o.seed = derive_seed(cseed, {"policy_contrast", std::string_view(to_string(mode))});
                    PolicyContrast pc{comp.name, mode, compare_policies(values[0][m], values[1][m], o)};
                    auto cjm = to_json(pc.comparison);
                    cjm["fit_mode"] = to_string(mode);
                    cjm["primary"] = mode == cfg.policy_mode;
                    contrasts.push_back(cjm);
                    rep.contrasts.push_back(std::move(pc));
                }
            cj["policy_contrasts"] = contrasts;
            rep.comparisons.push_back(std::move(cj));
        });
    }

    // Multi-arm policy.
    if (cfg.multi_arm && frame.n_arms() >= 3) {
        timer.run("multi_arm", [&] {
            const int A = frame.n_arms();
            const std::uint64_t mseed = derive_seed(cfg.seed, {"multi_arm"});
            const auto keys = detail::row_keys(frame.patient_ids, detail::all_rows(frame.n()));
            const auto folds = stratified_kfold(arm_outcome_strata(frame.arm, frame.outcome), cfg.k, derive_seed(mseed, {"folds"}), keys,
                                                "arm x outcome");
            const auto e = empirical_propensity(frame.arm, A);
            const auto bank = fit_outcome_models(all.X, frame.outcome, frame.arm, A, cfg.outcome.with_seed(derive_seed(mseed, {"stage1"})),
                                                 folds, FitMode::cross_fitted, "all");
            auto protocol = perm0;
            protocol.seed = derive_seed(mseed, {"importance"});
            auto gap = gap_importance(all.X, bank, frame.arm, cfg.effect.with_seed(derive_seed(mseed, {"gap_model"})), protocol, all.names);
            group_importance(gap.report, frame.groups);
            nlohmann::json mj{{"n", frame.n()}, {"propensities", e.e}, {"importance", to_json(gap.report)}};
            mj["gap_summary"] = to_json(summarize(gap.gap));
            rep.importance.push_back({"multi_arm", gap.report});

            const auto gap_pred = gap.model.predict(all.X);
            auto blp = blp_stage("multi_arm", all.X, gap_pred, "gap_model", derive_seed(mseed, {"blp"}));
            mj["blp"] = nlohmann::json::array({blp_json(blp)});
            rep.blp.push_back(std::move(blp));

            const auto plan = make_nested_plan(folds);
            std::vector<MultiArmValue> vals;
            nlohmann::json pol = nlohmann::json::array();
            for (const auto& fs : sets) {
                auto o = boot0;
                o.seed = derive_seed(mseed, {"policy", std::string_view(fs.name)});
                auto v = oof_multiarm_value(fs.sel.X, frame.outcome, frame.arm, A, cfg.outcome.with_seed(derive_seed(mseed, {"oof"})), plan,
                                            e, o, fs.name);
                rep.policy.push_back({"multi_arm", v.out_of_fold});
                rep.policy.push_back({"multi_arm", v.in_sample});
                pol.push_back(to_json(v.out_of_fold));
                pol.push_back(to_json(v.in_sample));
                vals.push_back(std::move(v));
            }
            mj["policy"] = pol;
            nlohmann::json gaps = nlohmann::json::object();
            for (const auto& v : vals) gaps[v.out_of_fold.feature_set] = v.overfitting_gap();
            mj["overfitting_gap"] = gaps;
            nlohmann::json contrasts = nlohmann::json::array();
            if (vals.size() == 2)
                for (int m = 0; m < 2; ++m) {
                    const FitMode mode = m == 0 ? FitMode::cross_fitted : FitMode::in_sample;
                    auto o = boot0;
                    o.seed = derive_seed(mseed, {"policy_contrast", std::string_view(to_string(mode))});
                    const auto& a = m == 0 ? vals[0].out_of_fold : vals[0].in_sample;
                    const auto& b = m == 0 ? vals[1].out_of_fold : vals[1].in_sample;
                    PolicyContrast pc{"multi_arm", mode, compare_policies(a, b, o)};
                    auto cjm = to_json(pc.comparison);
                    cjm["fit_mode"] = to_string(mode);
                    cjm["primary"] = mode == cfg.policy_mode;
                    contrasts.push_back(cjm);
                    rep.contrasts.push_back(std::move(pc));
                }
            mj["policy_contrasts"] = contrasts;
            rep.multi_arm = std::move(mj);
        });
    }

    // Prognostic models per cohort.
    if (cfg.run_prognostic) {
        if (sets.size() < 2) {
            rep.prognostic_note = "skipped: no contrast_group, so there is no reduced feature set to compare";
        } else {
            for (const auto& cohort : cfg.prognostic_cohorts) {
                timer.run("prognostic:" + cohort, [&] {
                    std::vector<std::size_t> rows;
                    const int code = cohort == "full" ? -1 : detail::arm_code(frame, cohort);
                    for (std::size_t i = 0; i < frame.n(); ++i)
                        if (code < 0 || frame.arm[i] == code) rows.push_back(i);
                    PrognosticOptions opt;
                    opt.model = cfg.prognostic;
                    opt.k = cfg.k;
                    opt.B = cfg.prognostic_B;
                    opt.calibration_fraction = cfg.calibration_fraction;
                    opt.seed = derive_seed(cfg.seed, {"prognostic", std::string_view(cohort)});
                    rep.prognostic.push_back(prognostic_report(sets[0].sel.X.take_rows(rows), sets[1].sel.X.take_rows(rows),
                                                               take(frame.outcome, rows), cohort, opt, sets[0].name, sets[1].name));
                });
            }
        }
    }

    // Model-free subgroup effects on the imputed, unstandardized values.
    if (cfg.subgroups.enabled) {
        timer.run("subgroups", [&] {
            const ComparisonSpec* comp = nullptr;
            for (const auto& c : cfg.comparisons)
                if (c.name == cfg.subgroups.comparison) comp = &c;
            rep.subgroup_comparison = comp->name;
            std::vector<int> treated;
            for (const auto& t : comp->treated) treated.push_back(detail::arm_code(frame, t));
            const int control = detail::arm_code(frame, comp->control);
            const auto specs = cfg.subgroups.specs.empty() ? default_subgroup_suite(trial.prep.imputed, cfg.subgroups.roles) : cfg.subgroups.specs;
            for (const auto& s : specs) {
                SubgroupRow row{s, std::nullopt, ""};
                try {
                    row.result = subgroup_ate_with_ci(trial.prep.imputed, s, treated, control, cfg.subgroup_B,
                                                      derive_seed(cfg.seed, {"subgroups"}));
                } catch (const ContractError& e) {
                    row.note = e.what();
                    rep.warnings.push_back(e.what());
                }
                rep.subgroups.push_back(std::move(row));
            }
        });
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json report_json(const RunReport& r) {
    nlohmann::json j;
    j["software"] = {{"name", kSoftwareName}, {"version", kSoftwareVersion}};
    j["config"] = r.config;
    j["data"] = r.data;
    j["comparisons"] = r.comparisons;
    j["multi_arm"] = r.multi_arm.is_null() ? nlohmann::json(nullptr) : r.multi_arm;
    nlohmann::json prog = nlohmann::json::array();
    for (const auto& p : r.prognostic) prog.push_back(to_json(p));
    j["prognostic"] = prog;
    if (!r.prognostic_note.empty()) j["prognostic_note"] = r.prognostic_note;
    nlohmann::json subs = nlohmann::json::array();
    for (const auto& s : r.subgroups) {
        if (s.result)
            subs.push_back(to_json(*s.result));
        else
            subs.push_back({{"subgroup", s.spec.name}, {"feature", s.spec.feature}, {"error", s.note}});
    }
    j["subgroups"] = {{"comparison", r.subgroup_comparison}, {"rows", subs}};
    j["warnings"] = r.warnings;
    return j;
}

namespace detail {

inline std::string num(double v) { return csv::format_double(v); }

inline std::string csv_line(const std::vector<std::string>& cells) {
    std::string s;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) s += ',';
        s += csv::quote(cells[i]);
    }
    return s + '\n';
}

}  // namespace detail

inline std::string importance_csv(const RunReport& r) {
    using detail::num;
    std::string s = detail::csv_line({"analysis", "target", "level", "name", "group", "mean", "se", "ci95_half_width", "rank", "trees_using"});
    for (const auto& row : r.importance) {
        for (const auto& f : row.report.features)
            s += detail::csv_line({row.analysis, row.report.target, "feature", f.name, f.group, num(f.mean), num(f.se), num(1.96 * f.se),
                                   std::to_string(f.rank), std::to_string(f.trees_using)});
        for (const auto& g : row.report.groups)
            s += detail::csv_line({row.analysis, row.report.target, "group", g.name, g.name, num(g.sum), num(g.se), num(1.96 * g.se), "",
                                   std::to_string(g.n_members)});
    }
    return s;
}

inline std::string blp_csv(const RunReport& r) {
    using detail::num;
    std::string s = detail::csv_line({"analysis", "target", "test_group", "z_mean", "z_sd", "W", "sqrt_W", "p", "p_bootstrap", "B", "seed", "note"});
    for (const auto& b : r.blp) {
        if (b.wald)
            s += detail::csv_line({b.analysis, b.target, b.wald->group, num(b.wald->z_mean), num(b.wald->z_sd), num(b.wald->W),
                                   num(b.wald->sqrt_W), num(b.wald->p), num(b.wald->p_bootstrap), std::to_string(b.result.B),
                                   std::to_string(b.result.seed), ""});
        else
            s += detail::csv_line({b.analysis, b.target, "", "", "", "", "", "", "", std::to_string(b.result.B), std::to_string(b.result.seed), b.note});
    }
    return s;
}

inline std::string policy_csv(const RunReport& r) {
    using detail::num;
    std::string s = detail::csv_line({"analysis", "kind", "feature_set", "fit_mode", "point", "lo", "hi", "B", "seed"});
    for (const auto& p : r.policy)
        s += detail::csv_line({p.analysis, "value", p.value.feature_set, to_string(p.value.mode), num(p.value.value), num(p.value.ci.lo),
                               num(p.value.ci.hi), std::to_string(p.value.B), std::to_string(p.value.seed)});
    for (const auto& c : r.contrasts)
        s += detail::csv_line({c.analysis, "difference", c.comparison.label_a + " - " + c.comparison.label_b, to_string(c.mode),
                               num(c.comparison.delta), num(c.comparison.ci.lo), num(c.comparison.ci.hi), std::to_string(c.comparison.B),
                               std::to_string(c.comparison.seed)});
    return s;
}

inline std::string prognostic_csv(const RunReport& r) {
    using detail::num;
    std::string s = detail::csv_line({"cohort", "feature_set", "n", "events", "auroc", "brier", "null_brier", "ipa", "delta_auroc",
                                      "delta_auroc_lo", "delta_auroc_hi", "incremental_brier"});
    for (const auto& p : r.prognostic) {
        s += detail::csv_line({p.cohort, p.reduced.feature_set, std::to_string(p.n), std::to_string(p.n_events), num(p.reduced.auroc),
                               num(p.reduced.brier), num(p.null_brier), num(p.reduced.ipa), "", "", "", ""});
        s += detail::csv_line({p.cohort, p.all.feature_set, std::to_string(p.n), std::to_string(p.n_events), num(p.all.auroc), num(p.all.brier),
                               num(p.null_brier), num(p.all.ipa), num(p.delta_auroc.delta), num(p.delta_auroc.ci.lo),
                               num(p.delta_auroc.ci.hi), num(p.incremental_brier)});
    }
    return s;
}

inline std::string subgroups_csv(const RunReport& r) {
    using detail::num;
    std::string s = detail::csv_line({"subgroup", "N", "N_treated", "N_control", "ATE", "CI_lo", "CI_hi", "threshold", "note"});
    for (const auto& row : r.subgroups) {
        if (!row.result) {
            s += detail::csv_line({row.spec.name, "", "", "", "", "", "", "", row.note});
            continue;
        }
        const auto& x = *row.result;
        s += detail::csv_line({x.name, std::to_string(x.n), std::to_string(x.n_treated), std::to_string(x.n_control), num(x.ate), num(x.ci.lo),
                               num(x.ci.hi), x.threshold ? num(*x.threshold) : "", ""});
    }
    return s;
}

inline std::string cate_csv(const RunReport& r) {
    using detail::num;
    std::string s = detail::csv_line({"analysis", "feature_set", "patient_id", "arm", "outcome", "tau", "tau_control", "tau_treated"});
    for (const auto& c : r.cates)
        for (std::size_t k = 0; k < c.rows.size(); ++k) {
            const std::size_t i = c.rows[k];
            s += detail::csv_line({c.analysis, c.feature_set, r.patient_ids[i], std::to_string(r.arm[i]), r.outcome[i] > 0.5 ? "1" : "0",
                                   num(c.cate.tau[k]), num(c.cate.tau_control[k]), num(c.cate.tau_treated[k])});
        }
    return s;
}

inline std::string summary_text(const RunReport& r) {
    std::ostringstream o;
    o.setf(std::ios::fixed);
    o.precision(4);
    o << kSoftwareName << ' ' << kSoftwareVersion << "\n";
    o << "patients: " << r.data.value("n", 0) << ", features: " << r.data.value("n_features", 0) << "\n\n";
    for (const auto& c : r.comparisons) {
        o << "[" << c.at("name").get<std::string>() << "] n = " << c.at("n").get<std::size_t>() << "\n";
        for (const auto& [fs, s] : c.at("cate").items())
            o << "  CATE (" << fs << "): mean " << s.at("mean").get<double>() << ", sd " << s.at("sd").get<double>() << "\n";
        for (const auto& b : c.at("blp")) {
            const auto& w = b.at("wald");
            if (w.contains("W"))
                o << "  BLP " << w.at("group").get<std::string>() << " (" << b.at("target").get<std::string>() << "): W " << w.at("W").get<double>()
                  << ", p " << w.at("p_chi2").get<double>() << "\n";
        }
        for (const auto& p : c.at("policy"))
            o << "  V(" << p.at("feature_set").get<std::string>() << ", " << p.at("fit_mode").get<std::string>()
              << ") = " << p.at("value").get<double>() << " [" << p.at("ci_lo").get<double>() << ", " << p.at("ci_hi").get<double>() << "]\n";
        for (const auto& d : c.at("policy_contrasts"))
            o << "  delta " << d.at("a").get<std::string>() << " - " << d.at("b").get<std::string>() << " ("
              << d.at("fit_mode").get<std::string>() << "): " << d.at("delta").get<double>() << " [" << d.at("ci_lo").get<double>() << ", "
              << d.at("ci_hi").get<double>() << "]\n";
        o << "\n";
    }
    if (!r.multi_arm.is_null()) {
        o << "[multi_arm]\n";
        for (const auto& p : r.multi_arm.at("policy"))
            o << "  V(" << p.at("feature_set").get<std::string>() << ", " << p.at("fit_mode").get<std::string>()
              << ") = " << p.at("value").get<double>() << " [" << p.at("ci_lo").get<double>() << ", " << p.at("ci_hi").get<double>() << "]\n";
        o << "\n";
    }
    for (const auto& p : r.prognostic)
        o << "[prognostic " << p.cohort << "] AUROC " << p.all.feature_set << " " << p.all.auroc << ", " << p.reduced.feature_set << " "
          << p.reduced.auroc << "; incremental Brier " << p.incremental_brier << "\n";
    if (!r.subgroups.empty()) {
        o << "\n[subgroups: " << r.subgroup_comparison << "]\n";
        for (const auto& s : r.subgroups) {
            if (s.result)
                o << "  " << s.spec.name << ": ATE " << s.result->ate << " [" << s.result->ci.lo << ", " << s.result->ci.hi << "] (N "
                  << s.result->n << ")\n";
            else
                o << "  " << s.spec.name << ": " << s.note << "\n";
        }
    }
    for (const auto& w : r.warnings) o << "warning: " << w << "\n";
    return o.str();
}

inline std::string timings_json(const RunReport& r) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& [stage, sec] : r.timings) j.push_back({{"stage", stage}, {"seconds", sec}});
    return j.dump(2) + "\n";
}

/// Writes every output file; on failure removes whatever this call wrote.
inline std::vector<std::string> write_outputs(const RunReport& r, const std::string& dir) {
    namespace fs = std::filesystem;
    const bool created = !fs::exists(dir);
    fs::create_directories(dir);
    const std::vector<std::pair<std::string, std::function<std::string()>>> files{
        {"report.json", [&] { return report_json(r).dump(2) + "\n"; }},
        {"importance.csv", [&] { return importance_csv(r); }},
        {"blp.csv", [&] { return blp_csv(r); }},
        {"policy.csv", [&] { return policy_csv(r); }},
        {"prognostic.csv", [&] { return prognostic_csv(r); }},
        {"subgroups.csv", [&] { return subgroups_csv(r); }},
        {"cate.csv", [&] { return cate_csv(r); }},
        {"summary.txt", [&] { return summary_text(r); }},
        {"timings.json", [&] { return timings_json(r); }},
    };
    std::vector<std::string> written;
    try {
        for (const auto& [name, render] : files) {
            const auto path = (fs::path(dir) / name).string();
            const auto text = render();
            std::ofstream out(path, std::ios::binary);
            out << text;
            out.close();
            written.push_back(path);
            if (!out) throw Error("could not write '" + path + "'");
        }
    } catch (...) {
        std::error_code ec;
        for (const auto& p : written) fs::remove(p, ec);
        if (created) fs::remove(dir, ec);
        throw;
    }
    return written;
}

}  // namespace causaltrial
