#include <CLI11.hpp>

#include <causaltrial/pipeline.hpp>
#include <causaltrial/validation.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace ct = causaltrial;
namespace fs = std::filesystem;

namespace {

enum Exit { ok = 0, checks_failed = 1, usage = 2, data = 3, runtime = 4 };

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    int threads = 1;
};

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary);
    f << text;
    if (!f) throw ct::Error("could not write '" + p.string() + "'");
}

int analyze(const Common& c, bool in_sample) {
    if (c.config.empty()) throw ct::ContractError("analyze needs --config");
    auto cfg = ct::load_analysis_config(c.config);
    if (c.seed) cfg.seed = *c.seed;
    if (in_sample) cfg.policy_mode = ct::FitMode::in_sample;
    if (!c.out.empty()) cfg.output_dir = c.out;
    const auto report = ct::run(cfg);
    const auto files = ct::write_outputs(report, cfg.output_dir);
    std::cout << ct::summary_text(report);
    std::cout << "\nwrote " << files.size() << " files to " << cfg.output_dir << "\n";
    return ok;
}

/// Draws a synthetic trial and writes trial.csv, schema.json and dgp.json.
int simulate(const Common& c) {
    if (c.config.empty()) throw ct::ContractError("simulate needs --config (a DGP description)");
    auto j = nlohmann::json::parse(ct::csv::read_file(c.config));
    if (j.contains("synthetic")) j = j.at("synthetic");
    auto dgp = ct::dgp_config_from_json(j);
    if (c.seed) dgp.seed = *c.seed;
    const fs::path out = c.out.empty() ? fs::path("simulated") : fs::path(c.out);
    fs::create_directories(out);
    const auto trial = ct::generate(dgp);
    write_text(out / "trial.csv", ct::format_trial_csv(trial.frame));
    write_text(out / "schema.json", ct::schema_to_json(ct::schema_for(trial.frame)).dump(2) + "\n");
    write_text(out / "dgp.json", ct::to_json(dgp).dump(2) + "\n");
    std::cout << "wrote " << trial.frame.n() << " patients, " << trial.frame.n_features() << " features, " << trial.frame.n_arms()
              << " arms to " << out.string() << "\n";
    return ok;
}

int validate(const Common& c, const std::vector<std::string>& only, bool quick) {
    ct::ValidationOptions opt;
    if (c.seed) opt.seed = *c.seed;
    opt.only = {only.begin(), only.end()};
    if (quick) {
        // Smoke-test sizes: exercises every check, thresholds are not meaningful here.
        opt.xl_n = 800;
        opt.dr_reps = 20;
        opt.dr_B = 500;
        opt.blp_null_reps = opt.blp_power_reps = 10;
        opt.blp_B = 200;
        opt.imp_seeds = 3;
        opt.imp_n = 600;
        opt.gap_seeds = 5;
    }
    const auto s = ct::validate_suite(opt, [](const ct::ValidationCheck& k) { std::cout << ct::format_check(k) << std::endl; });
    std::size_t passed = 0;
    for (const auto& k : s.checks) passed += k.pass ? 1 : 0;
    std::cout << passed << "/" << s.checks.size() << " checks passed\n";
    return s.all_pass() ? ok : checks_failed;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Heterogeneous treatment effect analysis for randomized trials"};
    app.set_version_flag("--version", std::string(ct::kSoftwareName) + " " + ct::kSoftwareVersion);
    app.require_subcommand(1);
    Common common;
    bool in_sample = false, quick = false;
    std::vector<std::string> only;
    auto add_common = [&](CLI::App* s) {
        s->add_option("--config", common.config, "Config file (JSON)");
        s->add_option("--seed", common.seed, "Master seed override");
        s->add_option("--out", common.out, "Output directory");
        s->add_option("--threads", common.threads, "Worker threads; output does not depend on it")->check(CLI::PositiveNumber);
    };
    auto* an = app.add_subcommand("analyze", "Run the configured analyses and write reports");
    add_common(an);
    an->add_flag("--in-sample", in_sample, "Use in-sample outcome models for the headline policy contrast");
    auto* sim = app.add_subcommand("simulate", "Write a synthetic trial CSV and schema from a DGP description");
    add_common(sim);
    auto* val = app.add_subcommand("validate", "Run the simulation checks and print pass/fail per check");
    add_common(val);
    val->add_option("--only", only, "Criteria to run, e.g. AC1 AC4")->delimiter(',');
    val->add_flag("--quick", quick, "Small replicate counts for a smoke run");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }
    ct::set_num_threads(common.threads);
    try {
        if (*an) return analyze(common, in_sample);
        if (*sim) return simulate(common);
        return validate(common, only, quick);
    } catch (const ct::StageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return runtime;
    } catch (const ct::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return data;
    } catch (const ct::ContractError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return usage;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return usage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return runtime;
    }
}
