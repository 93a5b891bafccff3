#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "matrix.hpp"
#include "stats.hpp"

namespace causaltrial {

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

inline bool is_missing(double v) noexcept { return std::isnan(v); }

enum class FeatureKind { continuous, binary };

inline std::string to_string(FeatureKind k) { return k == FeatureKind::binary ? "binary" : "continuous"; }

inline FeatureKind parse_feature_kind(const std::string& s) {
    if (s == "binary") return FeatureKind::binary;
    if (s == "continuous") return FeatureKind::continuous;
    throw DataError("unknown feature kind '" + s + "'");
}

/// Named, ordered partition of the feature columns.
class FeatureGroups {
public:
    using Entry = std::pair<std::string, std::vector<std::string>>;

    FeatureGroups() = default;
    explicit FeatureGroups(std::vector<Entry> groups) : groups_(std::move(groups)) {}

    /// Single group named `name` containing every column.
    static FeatureGroups single(std::string name, std::vector<std::string> columns) {
        return FeatureGroups({{std::move(name), std::move(columns)}});
    }

    const std::vector<Entry>& entries() const noexcept { return groups_; }
    bool empty() const noexcept { return groups_.empty(); }

    bool contains(const std::string& name) const {
        return std::any_of(groups_.begin(), groups_.end(), [&](const Entry& e) { return e.first == name; });
    }

    const std::vector<std::string>& members(const std::string& name) const {
        for (const auto& e : groups_)
            if (e.first == name) return e.second;
        throw ContractError("unknown feature group '" + name + "'");
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (const auto& e : groups_) out.push_back(e.first);
        return out;
    }

    /// Group owning `feature`; throws if the feature is in no group.
    const std::string& group_of(const std::string& feature) const {
        for (const auto& e : groups_)
            if (std::find(e.second.begin(), e.second.end(), feature) != e.second.end()) return e.first;
        throw ContractError("feature '" + feature + "' belongs to no group");
    }

    /// Throws unless the groups partition `columns` exactly.
    void check_partition(const std::vector<std::string>& columns) const {
        std::map<std::string, int> seen;
        for (const auto& e : groups_)
            for (const auto& f : e.second) ++seen[f];
        for (const auto& c : columns) {
            auto it = seen.find(c);
            if (it == seen.end()) throw DataError("feature '" + c + "' is not assigned to any group");
            if (it->second > 1) throw DataError("feature '" + c + "' is assigned to more than one group");
        }
        for (const auto& [f, count] : seen)
            if (std::find(columns.begin(), columns.end(), f) == columns.end())
                throw DataError("group member '" + f + "' is not a feature column");
    }

private:
    std::vector<Entry> groups_;
};

/// Column roles for reading a trial CSV.
struct TrialSchema {
    std::string arm_column;
    std::map<std::string, int> arm_codes;  // raw value -> dense code, 0 = control
    std::map<int, std::string> arm_names;  // optional display names
    std::string outcome_column;
    std::string id_column;  // empty: ids are row numbers
    FeatureGroups feature_groups;
    std::map<std::string, FeatureKind> kind_overrides;
    std::vector<std::string> excluded_columns;
    std::map<std::string, double> impute_defaults;  // for columns with no observed value
};

inline TrialSchema schema_from_json(const nlohmann::json& j) {
    TrialSchema s;
    s.arm_column = j.at("arm_column").get<std::string>();
    for (const auto& [k, v] : j.at("arm_codes").items()) s.arm_codes[k] = v.get<int>();
    if (j.contains("arm_names"))
        for (const auto& [k, v] : j.at("arm_names").items()) s.arm_names[std::stoi(k)] = v.get<std::string>();
    s.outcome_column = j.at("outcome_column").get<std::string>();
    s.id_column = j.value("id_column", std::string{});
    if (j.contains("feature_groups")) {
        std::vector<FeatureGroups::Entry> groups;
        const auto& fg = j.at("feature_groups");
        // Arrays of {name, features} keep order; objects are read in key order.
        if (fg.is_array()) {
            for (const auto& g : fg)
                groups.emplace_back(g.at("name").get<std::string>(), g.at("features").get<std::vector<std::string>>());
        } else {
            for (const auto& [k, v] : fg.items()) groups.emplace_back(k, v.get<std::vector<std::string>>());
        }
        s.feature_groups = FeatureGroups(std::move(groups));
    }
    if (j.contains("kind_overrides"))
        for (const auto& [k, v] : j.at("kind_overrides").items()) s.kind_overrides[k] = parse_feature_kind(v.get<std::string>());
    if (j.contains("excluded_columns")) s.excluded_columns = j.at("excluded_columns").get<std::vector<std::string>>();
    if (j.contains("impute_defaults"))
        for (const auto& [k, v] : j.at("impute_defaults").items()) s.impute_defaults[k] = v.get<double>();
    return s;
}

inline nlohmann::json schema_to_json(const TrialSchema& s) {
    nlohmann::json j;
    j["arm_column"] = s.arm_column;
    j["arm_codes"] = s.arm_codes;
    nlohmann::json names = nlohmann::json::object();
    for (const auto& [k, v] : s.arm_names) names[std::to_string(k)] = v;
    j["arm_names"] = names;
    j["outcome_column"] = s.outcome_column;
    j["id_column"] = s.id_column;
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& [name, cols] : s.feature_groups.entries()) groups.push_back({{"name", name}, {"features", cols}});
    j["feature_groups"] = groups;
    nlohmann::json kinds = nlohmann::json::object();
    for (const auto& [k, v] : s.kind_overrides) kinds[k] = to_string(v);
    j["kind_overrides"] = kinds;
    j["excluded_columns"] = s.excluded_columns;
    j["impute_defaults"] = s.impute_defaults;
    return j;
}

/// Patient-level trial data: features (NaN = missing), dense arm codes, binary outcome.
struct TrialFrame {
    std::vector<std::string> patient_ids;
    std::vector<std::string> feature_names;
    Matrix features;
    std::vector<int> arm;
    std::vector<std::string> arm_names;  // indexed by arm code
    std::vector<double> outcome;         // 0 or 1
    FeatureGroups groups;

    std::size_t n() const noexcept { return arm.size(); }
    std::size_t n_features() const noexcept { return feature_names.size(); }
    int n_arms() const noexcept { return static_cast<int>(arm_names.size()); }

    std::size_t feature_index(const std::string& name) const {
        auto it = std::find(feature_names.begin(), feature_names.end(), name);
        if (it == feature_names.end()) throw ContractError("unknown feature '" + name + "'");
        return static_cast<std::size_t>(it - feature_names.begin());
    }

    /// Throws unless the frame satisfies its structural invariants.
    void validate() const {
        const std::size_t rows = arm.size();
        if (patient_ids.size() != rows || outcome.size() != rows || features.rows() != rows)
            throw DataError("trial frame columns have different lengths");
        if (features.cols() != feature_names.size()) throw DataError("feature matrix / name count mismatch");
        std::set<std::string> unique(feature_names.begin(), feature_names.end());
        if (unique.size() != feature_names.size()) throw DataError("duplicate feature column names");
        std::set<int> present;
        for (std::size_t i = 0; i < rows; ++i) {
            if (outcome[i] != 0.0 && outcome[i] != 1.0) throw DataError("outcome must be 0 or 1");
            if (arm[i] < 0 || arm[i] >= n_arms()) throw DataError("arm code out of range");
            present.insert(arm[i]);
        }
        if (present.size() < 2) throw DataError("trial frame needs at least two arms present");
        if (!groups.empty()) groups.check_partition(feature_names);
    }
};

// ---------------------------------------------------------------------------
// CSV

namespace csv {

/// Split CSV text into records. Supports quoted fields with "" escapes and CRLF.
inline std::vector<std::vector<std::string>> parse(const std::string& text) {
    std::vector<std::vector<std::string>> records;
    std::vector<std::string> record;
    std::string field;
    bool in_quotes = false;
    bool field_started = false;
    auto end_field = [&] {
        record.push_back(std::move(field));
        field.clear();
        field_started = false;
    };
    auto end_record = [&] {
        end_field();
        if (!(record.size() == 1 && record[0].empty())) records.push_back(std::move(record));
        record.clear();
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (in_quotes) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    in_quotes = false;
                }
            } else {
                field.push_back(c);
            }
            continue;
        }
        if (c == '"' && !field_started) {
            in_quotes = true;
            field_started = true;
        } else if (c == ',') {
            end_field();
        } else if (c == '\n') {
            end_record();
        } else if (c == '\r') {
            if (i + 1 < text.size() && text[i + 1] == '\n') continue;
            end_record();
        } else {
            field.push_back(c);
            field_started = true;
        }
    }
    if (in_quotes) throw DataError("unterminated quoted CSV field");
    if (!field.empty() || !record.empty()) end_record();
    return records;
}

inline std::string quote(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + '"';
}

/// 17 significant digits, enough to round-trip any finite double.
inline std::string format_double(double v) {
    if (is_missing(v)) return "NA";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace csv

inline bool is_missing_token(const std::string& s) {
    if (s.empty() || s == "NA") return true;
    if (s.size() == 3) {
        std::string lower;
        for (char c : s) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        return lower == "nan";
    }
    return false;
}

inline double parse_cell(const std::string& raw, const std::string& column, std::size_t row) {
    std::string s = raw;
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
    std::size_t start = 0;
    while (start < s.size() && std::isspace(static_cast<unsigned char>(s[start]))) ++start;
    s = s.substr(start);
    if (is_missing_token(s)) return kMissing;
    double v = 0.0;
    const char* first = s.data();
    if (!s.empty() && s[0] == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size() || !std::isfinite(v))
        throw DataError("non-numeric value '" + raw + "' in column '" + column + "' at data row " + std::to_string(row + 1));
    return v;
}

/// Build a TrialFrame from CSV text.
inline TrialFrame parse_trial_csv(const std::string& text, const TrialSchema& schema) {
    const auto records = csv::parse(text);
    if (records.empty()) throw DataError("CSV has no header row");
    const auto& header = records.front();
    {
        std::set<std::string> unique(header.begin(), header.end());
        if (unique.size() != header.size()) throw DataError("duplicate column names in CSV header");
    }
    auto col_of = [&](const std::string& name) -> std::optional<std::size_t> {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) return std::nullopt;
        return static_cast<std::size_t>(it - header.begin());
    };
    const auto arm_col = col_of(schema.arm_column);
    if (!arm_col) throw DataError("arm column '" + schema.arm_column + "' not found");
    const auto outcome_col = col_of(schema.outcome_column);
    if (!outcome_col) throw DataError("outcome column '" + schema.outcome_column + "' not found");
    std::optional<std::size_t> id_col;
    if (!schema.id_column.empty()) {
        id_col = col_of(schema.id_column);
        if (!id_col) throw DataError("id column '" + schema.id_column + "' not found");
    }
    for (const auto& ex : schema.excluded_columns)
        if (!col_of(ex)) throw DataError("excluded column '" + ex + "' not found");

    // Arm codes must be dense from 0.
    std::set<int> codes;
    for (const auto& [raw, code] : schema.arm_codes) codes.insert(code);
    if (codes.empty()) throw DataError("schema has no arm codes");
    int expect = 0;
    for (int c : codes)
        if (c != expect++) throw DataError("arm codes must be contiguous from 0 (0 = control)");

    TrialFrame f;
    f.arm_names.resize(codes.size());
    for (const auto& [raw, code] : schema.arm_codes)
        if (f.arm_names[static_cast<std::size_t>(code)].empty()) f.arm_names[static_cast<std::size_t>(code)] = raw;
    for (const auto& [code, name] : schema.arm_names)
        if (code >= 0 && code < static_cast<int>(f.arm_names.size())) f.arm_names[static_cast<std::size_t>(code)] = name;

    std::vector<std::size_t> feature_cols;
    for (std::size_t c = 0; c < header.size(); ++c) {
        const auto& name = header[c];
        if (c == *arm_col || c == *outcome_col || (id_col && c == *id_col)) continue;
        if (std::find(schema.excluded_columns.begin(), schema.excluded_columns.end(), name) != schema.excluded_columns.end())
            continue;
        feature_cols.push_back(c);
        f.feature_names.push_back(name);
    }

    const std::size_t n = records.size() - 1;
    f.features = Matrix(n, feature_cols.size());
    f.arm.resize(n);
    f.outcome.resize(n);
    f.patient_ids.resize(n);
    for (std::size_t r = 0; r < n; ++r) {
        const auto& rec = records[r + 1];
        if (rec.size() != header.size())
            throw DataError("row " + std::to_string(r + 1) + " has " + std::to_string(rec.size()) + " fields, header has " +
                            std::to_string(header.size()));
        auto arm_it = schema.arm_codes.find(rec[*arm_col]);
        if (arm_it == schema.arm_codes.end()) throw DataError("unknown arm value '" + rec[*arm_col] + "' at row " + std::to_string(r + 1));
        f.arm[r] = arm_it->second;
        const double y = parse_cell(rec[*outcome_col], schema.outcome_column, r);
        if (is_missing(y)) throw DataError("missing outcome at row " + std::to_string(r + 1));
        if (y != 0.0 && y != 1.0) throw DataError("outcome must be 0 or 1 (row " + std::to_string(r + 1) + ")");
        f.outcome[r] = y;
        f.patient_ids[r] = id_col ? rec[*id_col] : std::to_string(r + 1);
        for (std::size_t j = 0; j < feature_cols.size(); ++j) f.features(r, j) = parse_cell(rec[feature_cols[j]], f.feature_names[j], r);
    }
    f.groups = schema.feature_groups.empty() ? FeatureGroups::single("all", f.feature_names) : schema.feature_groups;
    f.validate();
    return f;
}

inline TrialFrame load_trial_csv(const std::string& path, const TrialSchema& schema) {
    return parse_trial_csv(csv::read_file(path), schema);
}

/// CSV text for a frame: id, arm (raw label), outcome, then features at 17 significant digits.
inline std::string format_trial_csv(const TrialFrame& f, const std::string& id_column = "id",
                                    const std::string& arm_column = "arm", const std::string& outcome_column = "outcome") {
    std::ostringstream out;
    out << csv::quote(id_column) << ',' << csv::quote(arm_column) << ',' << csv::quote(outcome_column);
    for (const auto& name : f.feature_names) out << ',' << csv::quote(name);
    out << '\n';
    for (std::size_t i = 0; i < f.n(); ++i) {
        out << csv::quote(f.patient_ids[i]) << ',' << csv::quote(f.arm_names[static_cast<std::size_t>(f.arm[i])]) << ','
            << (f.outcome[i] != 0.0 ? 1 : 0);
        for (std::size_t j = 0; j < f.n_features(); ++j) out << ',' << csv::format_double(f.features(i, j));
        out << '\n';
    }
    return out.str();
}

/// Schema that reads back what format_trial_csv writes.
inline TrialSchema schema_for(const TrialFrame& f, const std::string& id_column = "id", const std::string& arm_column = "arm",
                              const std::string& outcome_column = "outcome") {
    TrialSchema s;
    s.arm_column = arm_column;
    s.outcome_column = outcome_column;
    s.id_column = id_column;
    for (std::size_t c = 0; c < f.arm_names.size(); ++c) s.arm_codes[f.arm_names[c]] = static_cast<int>(c);
    s.feature_groups = f.groups;
    return s;
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Binary iff every observed value is 0 or 1; overrides win.
inline std::vector<FeatureKind> infer_feature_kinds(const TrialFrame& f,
                                                   const std::map<std::string, FeatureKind>& overrides = {}) {
    std::vector<FeatureKind> kinds(f.n_features());
    for (std::size_t j = 0; j < f.n_features(); ++j) {
        if (auto it = overrides.find(f.feature_names[j]); it != overrides.end()) {
            kinds[j] = it->second;
            continue;
        }
        bool any = false;
        bool binary = true;
        for (std::size_t i = 0; i < f.n(); ++i) {
            const double v = f.features(i, j);
            if (is_missing(v)) continue;
            any = true;
            if (v != 0.0 && v != 1.0) binary = false;
        }
        if (!any) throw DataError("feature '" + f.feature_names[j] + "' has no observed values");
        kinds[j] = binary ? FeatureKind::binary : FeatureKind::continuous;
    }
    return kinds;
}

struct FeaturePreprocess {
    std::string name;
    FeatureKind kind = FeatureKind::continuous;
    double impute_value = 0.0;
    std::size_t n_imputed = 0;
    bool standardized = false;
    double mean = 0.0;  // continuous features only
    double sd = 0.0;
};

struct PreprocessReport {
    std::vector<FeaturePreprocess> features;
};

inline nlohmann::json to_json(const PreprocessReport& r) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& f : r.features) {
        nlohmann::json j{{"name", f.name}, {"kind", to_string(f.kind)}, {"impute_value", f.impute_value}, {"n_imputed", f.n_imputed}};
        if (f.standardized) {
            j["mean"] = f.mean;
            j["sd"] = f.sd;
        }
        arr.push_back(j);
    }
    return arr;
}

namespace detail {
inline std::vector<std::size_t> all_rows(std::size_t n) {
    std::vector<std::size_t> r(n);
    for (std::size_t i = 0; i < n; ++i) r[i] = i;
    return r;
}
}  // namespace detail

/// Fill missing cells: median (continuous) or mode with ties to 0 (binary).
/// Statistics come from `stat_rows` (all rows when empty) and apply to every row.
inline std::pair<TrialFrame, PreprocessReport> impute(const TrialFrame& f, const std::vector<FeatureKind>& kinds,
                                                      const std::map<std::string, double>& defaults = {},
                                                      std::span<const std::size_t> stat_rows = {}) {
    detail::require(kinds.size() == f.n_features(), "impute: kinds must cover every feature");
    const std::vector<std::size_t> every = stat_rows.empty() ? detail::all_rows(f.n()) : std::vector<std::size_t>{};
    const std::span<const std::size_t> rows = stat_rows.empty() ? std::span<const std::size_t>(every) : stat_rows;
    TrialFrame out = f;
    PreprocessReport report;
    for (std::size_t j = 0; j < f.n_features(); ++j) {
        FeaturePreprocess fp;
        fp.name = f.feature_names[j];
        fp.kind = kinds[j];
        std::vector<double> observed;
        for (std::size_t i : rows)
            if (!is_missing(f.features(i, j))) observed.push_back(f.features(i, j));
        if (observed.empty()) {
            auto it = defaults.find(fp.name);
            if (it == defaults.end()) throw DataError("feature '" + fp.name + "' is entirely missing and has no default");
            fp.impute_value = it->second;
        } else if (kinds[j] == FeatureKind::binary) {
            const auto ones = static_cast<std::size_t>(std::count(observed.begin(), observed.end(), 1.0));
            fp.impute_value = ones > observed.size() - ones ? 1.0 : 0.0;
        } else {
            fp.impute_value = median(std::move(observed));
        }
        for (std::size_t i = 0; i < f.n(); ++i) {
            if (is_missing(out.features(i, j))) {
                out.features(i, j) = fp.impute_value;
                ++fp.n_imputed;
            }
        }
        report.features.push_back(fp);
    }
    return {std::move(out), std::move(report)};
}

/// z-score continuous columns (sample sd); binary columns keep their scale; constant columns are only centered.
inline std::pair<TrialFrame, PreprocessReport> standardize(const TrialFrame& f, const std::vector<FeatureKind>& kinds,
                                                           std::span<const std::size_t> stat_rows = {}) {
    detail::require(kinds.size() == f.n_features(), "standardize: kinds must cover every feature");
    const std::vector<std::size_t> every = stat_rows.empty() ? detail::all_rows(f.n()) : std::vector<std::size_t>{};
    const std::span<const std::size_t> rows = stat_rows.empty() ? std::span<const std::size_t>(every) : stat_rows;
    TrialFrame out = f;
    PreprocessReport report;
    for (std::size_t j = 0; j < f.n_features(); ++j) {
        FeaturePreprocess fp;
        fp.name = f.feature_names[j];
        fp.kind = kinds[j];
        if (kinds[j] == FeatureKind::continuous) {
            std::vector<double> col;
            col.reserve(rows.size());
            for (std::size_t i : rows) {
                const double v = f.features(i, j);
                if (is_missing(v)) throw ContractError("standardize: feature '" + fp.name + "' still has missing values");
                col.push_back(v);
            }
            fp.standardized = true;
            fp.mean = mean(col);
            fp.sd = sample_sd(col);
            const double scale = fp.sd > 0.0 ? fp.sd : 1.0;
            for (std::size_t i = 0; i < f.n(); ++i) out.features(i, j) = (f.features(i, j) - fp.mean) / scale;
        }
        report.features.push_back(fp);
    }
    return {std::move(out), std::move(report)};
}

struct Preprocessed {
    TrialFrame imputed;       // original scale, no missing values
    TrialFrame standardized;  // model-ready
    std::vector<FeatureKind> kinds;
    PreprocessReport report;
};

/// Kind inference, imputation and standardization in one pass, with a merged report.
inline Preprocessed preprocess(const TrialFrame& f, const std::map<std::string, FeatureKind>& overrides = {},
                               const std::map<std::string, double>& defaults = {}) {
    Preprocessed p;
    p.kinds = infer_feature_kinds(f, overrides);
    auto [imputed, rep_i] = impute(f, p.kinds, defaults);
    auto [standard, rep_s] = standardize(imputed, p.kinds);
    for (std::size_t j = 0; j < rep_i.features.size(); ++j) {
        rep_i.features[j].standardized = rep_s.features[j].standardized;
        rep_i.features[j].mean = rep_s.features[j].mean;
        rep_i.features[j].sd = rep_s.features[j].sd;
    }
    p.imputed = std::move(imputed);
    p.standardized = std::move(standard);
    p.report = std::move(rep_i);
    return p;
}

/// Column subset for a union of feature groups.
struct FeatureSelection {
    Matrix X;
    std::vector<std::string> names;
    std::vector<std::size_t> columns;  // indices into the frame's feature columns
    std::vector<std::string> group_names;
};

inline FeatureSelection select_features(const TrialFrame& f, const FeatureGroups& groups, const std::vector<std::string>& include) {
    if (include.empty()) throw ContractError("select_features: empty group selection");
    std::set<std::string> wanted;
    for (const auto& g : include) {
        if (!groups.contains(g)) throw ContractError("unknown feature group '" + g + "'");
        for (const auto& m : groups.members(g)) wanted.insert(m);
    }
    FeatureSelection sel;
    sel.group_names = include;
    for (std::size_t j = 0; j < f.n_features(); ++j) {
        if (wanted.count(f.feature_names[j])) {
            sel.columns.push_back(j);
            sel.names.push_back(f.feature_names[j]);
        }
    }
    if (sel.columns.size() != wanted.size()) throw ContractError("select_features: group member missing from frame");
    sel.X = f.features.take_cols(sel.columns);
    return sel;
}

}  // namespace causaltrial
