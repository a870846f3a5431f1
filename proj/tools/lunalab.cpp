// lunalab command-line entry point.
//
// Exit codes: 0 success, 1 usage error, 2 config error, 3 input error,
// 4 numeric failure (e.g. non-finite loss), 5 unexpected internal error.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lunalab/experiment.hpp"

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kConfig = 2, kInput = 3, kNumeric = 4, kInternal = 5 };

// "a,b,c" lists treatment directories of one group; a single path is a suite
// directory whose subdirectories are the treatments.
lunalab::TreatmentGroup parse_group(const std::string& arg) {
    if (arg.find(',') == std::string::npos) {
        auto g = lunalab::group_from_suite(arg);
        if (g.treatments.empty()) throw lunalab::UsageError("compare: " + arg + " contains no treatment directories");
        return g;
    }
    lunalab::TreatmentGroup g;
    std::stringstream ss(arg);
    std::string part;
    while (std::getline(ss, part, ',')) {
        if (part.empty()) continue;
        if (!lunalab::fs::is_directory(part)) throw lunalab::UsageError("compare: not a directory: " + part);
        g.treatments.emplace_back(part);
        g.name += (g.name.empty() ? "" : "_vs_") + g.treatments.back().filename().string();
    }
    return g;
}

int run_main(int argc, char** argv) {
    CLI::App app{"lunalab: Luna / ConvLuna encoder experiments"};
    app.require_subcommand(1);

    auto* run = app.add_subcommand("run", "train every (memory size, seed) cell of an experiment config");
    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<std::string> output;
    std::optional<std::uint64_t> seed;
    bool resume = false;
    run->add_option("--config", config_path, "experiment config (JSON)")->required();
    run->add_option("--set", overrides, "override a field, e.g. --set train.total_steps=500")->take_all();
    run->add_option("--output", output, "output root (default: config output_dir, $LUNALAB_OUTPUT_ROOT, ./runs)");
    run->add_option("--seed", seed, "run only this seed instead of the config's seed list");
    run->add_flag("--resume", resume, "continue a suite: skip complete runs, redo incomplete ones");

    auto* compare = app.add_subcommand("compare", "Friedman test per group, Holm-adjusted across groups");
    std::vector<std::string> groups;
    std::string metric = "final";
    std::optional<std::string> compare_output;
    compare->add_option("groups", groups, "suite directory, or comma-separated treatment directories")->required();
    compare->add_option("--metric", metric, "final | best validation accuracy")->check(CLI::IsMember({"final", "best"}));
    compare->add_option("--output", compare_output, "report directory (default: <output root>/comparisons)");

    auto* diagnose = app.add_subcommand("diagnose", "memory degradation and entropy tables for one run");
    std::string run_dir;
    std::optional<std::string> diagnose_output;
    double tol = lunalab::kDefaultDegradationTol;
    diagnose->add_option("run_dir", run_dir, "seed directory of a finished run")->required();
    diagnose->add_option("--output", diagnose_output, "table directory (default: <run_dir>/diagnostics)");
    diagnose->add_option("--tol", tol, "rank / uniqueness tolerance");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    if (run->parsed()) {
        auto cfg = lunalab::load_experiment(config_path, overrides);
        if (seed) cfg.seeds = {*seed};
        const auto root = lunalab::resolve_output_root(output, cfg.output_dir);
        lunalab::RunOptions opts;
        opts.resume = resume;
        opts.log = &std::cout;
        const auto artifacts = lunalab::cmd_run(cfg, root, opts);
        std::cout << artifacts.size() << " run(s) under " << (root / cfg.run_name).string() << '\n';
    } else if (compare->parsed()) {
        std::vector<lunalab::TreatmentGroup> parsed;
        for (const auto& g : groups) parsed.push_back(parse_group(g));
        const auto which = lunalab::parse_compare_metric(metric);
        const auto outcome = lunalab::cmd_compare(parsed, which);
        const auto dir = compare_output ? lunalab::fs::path(*compare_output)
                                        : lunalab::resolve_output_root(std::nullopt, "") / "comparisons";
        lunalab::write_compare_report(dir, outcome, which);
        for (std::size_t i = 0; i < outcome.report.hypotheses.size(); ++i) {
            std::cout << outcome.report.hypotheses[i] << ": chi2=" << outcome.report.friedman_chi2[i]
                      << " p=" << outcome.report.raw_p[i] << " holm_p=" << outcome.report.holm_p[i] << '\n';
        }
        std::cout << "report: " << (dir / "significance.json").string() << '\n';
    } else if (diagnose->parsed()) {
        std::optional<lunalab::fs::path> out;
        if (diagnose_output) out = *diagnose_output;
        const auto result = lunalab::cmd_diagnose(run_dir, out, tol);
        std::cout << result.snapshot_count << " snapshot(s) -> " << result.degradation.parent_path().string() << '\n';
    }
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run_main(argc, argv);
    } catch (const lunalab::UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kUsage;
    } catch (const lunalab::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const lunalab::InputError& e) {
        std::cerr << "input error: " << e.what() << '\n';
        return kInput;
    } catch (const lunalab::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return kNumeric;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "input error: " << e.what() << '\n';
        return kInput;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return kInternal;
    }
}
