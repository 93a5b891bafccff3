#include <gtest/gtest.h>

#include <causaltrial/pipeline.hpp>

#include <filesystem>

using namespace causaltrial;
namespace fs = std::filesystem;

namespace {

nlohmann::json small_config() {
    DgpConfig d;
    d.n = 300;
    d.arm_probs = {0.34, 0.33, 0.33};
    d.n_continuous = 4;
    d.arm_shift = {0.0, 0.1, 0.2};
    d.modifiers = {{}, {0.1, 0, 0, 0}, {0, 0, 0.1, 0}};
    d.seed = 11;
    d.arm_names = {"PBO", "LOW", "HIGH"};
    d.feature_groups = {{"clin", {"x1", "x2"}}, {"endo", {"x3", "x4"}}};
    nlohmann::json small{{"n_trees", 20}, {"max_depth", 2}};
    return {{"data", {{"synthetic", to_json(d)}}},
            {"seed", 5},
            {"folds", 3},
            {"bootstrap", {{"policy", 50}, {"prognostic", 50}, {"subgroup", 50}, {"blp", 50}}},
            {"permutation", {{"n_perm", 2}, {"n_repeat", 2}}},
            {"models", {{"outcome", small}, {"effect", small}, {"prognostic", small}}},
            {"contrast_group", "endo"},
            {"reduced_name", "clinical"},
            {"subgroups", {{"specs", {{{"name", "Overall"}}, {{"name", "x1 <0"}, {"feature", "x1"}, {"comparator", "<"}, {"threshold", 0.0}}}}}}};
}

fs::path scratch(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("causaltrial_pipeline_" + name);
    fs::remove_all(p);
    return p;
}

std::map<std::string, std::string> read_outputs(const fs::path& dir) {
    std::map<std::string, std::string> m;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().filename() != "timings.json") m[e.path().filename().string()] = csv::read_file(e.path().string());
    return m;
}

}  // namespace

TEST(Pipeline, WritesEveryOutput) {
    const auto rep = run(analysis_config_from_json(small_config()));
    const auto dir = scratch("outputs");
    write_outputs(rep, dir.string());
    for (const char* f : {"report.json", "importance.csv", "blp.csv", "policy.csv", "prognostic.csv", "subgroups.csv", "cate.csv",
                          "summary.txt", "timings.json"})
        EXPECT_TRUE(fs::exists(dir / f)) << f;
    const auto j = nlohmann::json::parse(csv::read_file((dir / "report.json").string()));
    EXPECT_EQ(j["software"]["name"], kSoftwareName);
    EXPECT_EQ(j["comparisons"].size(), 1u);
    EXPECT_EQ(j["comparisons"][0]["policy"].size(), 4u);  // two feature sets x two fit modes
    EXPECT_FALSE(j["multi_arm"].is_null());
    EXPECT_EQ(j["prognostic"].size(), 4u);  // full + three arms
    EXPECT_EQ(j["subgroups"]["rows"].size(), 2u);
    EXPECT_FALSE(j.contains("timings"));
    EXPECT_FALSE(j["config"].contains("threads"));
    // cate.csv: header + one row per patient per feature set.
    const auto cate = csv::parse(csv::read_file((dir / "cate.csv").string()));
    EXPECT_EQ(cate.size(), 1u + 2u * 300u);
    fs::remove_all(dir);
}

TEST(Pipeline, ByteIdenticalAcrossRunsAndThreads) {
    const auto cfg = analysis_config_from_json(small_config());
    const auto a = scratch("det_a"), b = scratch("det_b");
    write_outputs(run(cfg), a.string());
    set_num_threads(3);
    write_outputs(run(cfg), b.string());
    set_num_threads(1);
    EXPECT_EQ(read_outputs(a), read_outputs(b));
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST(Pipeline, ArmCohortUsesOnlyThatArm) {
    const auto rep = run(analysis_config_from_json(small_config()));
    const std::vector<int>& arm = rep.arm;
    ASSERT_EQ(rep.prognostic.size(), 4u);
    EXPECT_EQ(rep.prognostic[0].cohort, "full");
    EXPECT_EQ(rep.prognostic[0].n, arm.size());
    for (int a = 0; a < 3; ++a) {
        const auto& p = rep.prognostic[static_cast<std::size_t>(a) + 1];
        EXPECT_EQ(p.n, static_cast<std::size_t>(std::count(arm.begin(), arm.end(), a)));
        std::size_t ev = 0;
        for (std::size_t i = 0; i < arm.size(); ++i) ev += arm[i] == a && rep.outcome[i] > 0.5 ? 1 : 0;
        EXPECT_EQ(p.n_events, ev);
    }
}

TEST(Pipeline, ConfigErrors) {
    auto j = small_config();
    j["contrast_group"] = "imaging";
    try {
        run(analysis_config_from_json(j));
        FAIL() << "expected StageError";
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "validate_config");
        EXPECT_NE(std::string(e.what()).find("unknown feature group 'imaging'"), std::string::npos);
    }
    auto k = small_config();
    k["folds_typo"] = 3;
    EXPECT_THROW(analysis_config_from_json(k), ContractError);
    auto c = small_config();
    c["comparisons"] = {{{"name", "x"}, {"treated", {"NOPE"}}, {"control", "PBO"}}};
    EXPECT_THROW(run(analysis_config_from_json(c)), StageError);
}

TEST(Pipeline, StageErrorsCarryStageName) {
    auto j = small_config();
    j["subgroups"] = {{"roles", {{"age", "x1"}}}};  // incomplete role map
    j["prognostic"] = {{"enabled", false}};
    j["multi_arm"] = false;
    try {
        run(analysis_config_from_json(j));
        FAIL() << "expected StageError";
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "subgroups");
    }
}

TEST(Pipeline, PrognosticSkippedWithoutContrastGroup) {
    auto j = small_config();
    j.erase("contrast_group");
    j["multi_arm"] = false;
    const auto rep = run(analysis_config_from_json(j));
    EXPECT_TRUE(rep.prognostic.empty());
    EXPECT_FALSE(rep.prognostic_note.empty());
    EXPECT_TRUE(rep.contrasts.empty());
}

TEST(Pipeline, FailedWriteRemovesPartialOutputs) {
    auto j = small_config();
    j["multi_arm"] = false;
    j["prognostic"] = {{"enabled", false}};
    const auto rep = run(analysis_config_from_json(j));
    const auto dir = scratch("partial");
    fs::create_directories(dir / "policy.csv");  // a directory where a file must go
    EXPECT_THROW(write_outputs(rep, dir.string()), Error);
    EXPECT_FALSE(fs::exists(dir / "report.json"));
    EXPECT_FALSE(fs::exists(dir / "importance.csv"));
    EXPECT_TRUE(fs::exists(dir));  // pre-existing directory is left alone
    fs::remove_all(dir);
}

TEST(Pipeline, ConfigEchoRoundTrips) {
    const auto rep = run([] {
        auto j = small_config();
        j["multi_arm"] = false;
        j["prognostic"] = {{"enabled", false}};
        return analysis_config_from_json(j);
    }());
    const auto again = to_json(analysis_config_from_json(rep.config));
    EXPECT_EQ(again, rep.config);
}

TEST(Pipeline, CsvInputResolvesRelativePaths) {
    DgpConfig d;
    d.n = 120;
    d.seed = 3;
    d.n_continuous = 2;
    d.feature_groups = {{"a", {"x1"}}, {"b", {"x2"}}};
    const auto t = generate(d);
    const auto dir = scratch("csv");
    fs::create_directories(dir / "data");
    {
        std::ofstream(dir / "data" / "t.csv") << format_trial_csv(t.frame);
        std::ofstream(dir / "data" / "t.schema.json") << schema_to_json(schema_for(t.frame)).dump();
        nlohmann::json c{{"data", {{"csv", "data/t.csv"}, {"schema", "data/t.schema.json"}}},
                         {"folds", 2},
                         {"bootstrap", {{"policy", 20}, {"blp", 20}}},
                         {"models", {{"outcome", {{"n_trees", 10}}}, {"effect", {{"n_trees", 10}}}}},
                         {"prognostic", {{"enabled", false}}}};
        std::ofstream(dir / "cfg.json") << c.dump();
    }
    const auto cfg = load_analysis_config((dir / "cfg.json").string());
    EXPECT_EQ(cfg.csv_path, (dir / "data" / "t.csv").lexically_normal().string());
    const auto rep = run(cfg);
    EXPECT_EQ(rep.data["n"], 120);
    EXPECT_EQ(rep.comparisons.size(), 1u);
    fs::remove_all(dir);
}
