#pragma once

// Experiment suites on disk and the analyses behind `lunalab compare` and
// `lunalab diagnose`.
//
// Run layout:
//   <root>/<run_name>/[mem<M>/]seed<S>/
//       config.json           resolved single-run config
//       metrics.jsonl
//       snapshots/step_*.ckpt
//       checkpoints/{final,best}.ckpt
//       report/summary.json
//       COMPLETE              written last; absent means the run did not finish

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "lunalab/config.hpp"
#include "lunalab/training.hpp"

namespace lunalab {

namespace fs = std::filesystem;

inline constexpr const char* kCompleteMarker = "COMPLETE";
inline constexpr const char* kOutputRootEnv = "LUNALAB_OUTPUT_ROOT";

// Parameter initialization stream of a run; data order and dropout use streams 10 and 11.
inline std::uint64_t model_init_seed(std::uint64_t run_seed) { return detail::split_seed(run_seed, 12); }

// --output, then the config's output_dir, then $LUNALAB_OUTPUT_ROOT, then ./runs.
inline fs::path resolve_output_root(const std::optional<std::string>& flag, const std::string& config_dir) {
    if (flag && !flag->empty()) return *flag;
    if (!config_dir.empty()) return config_dir;
    if (const char* env = std::getenv(kOutputRootEnv); env && *env) return env;
    return "runs";
}

struct PlannedRun {
    fs::path dir;
    ExperimentConfig config;  // single seed, single memory size
};

inline std::vector<PlannedRun> plan_runs(const ExperimentConfig& e, const fs::path& root) {
    std::vector<PlannedRun> out;
    const fs::path base = root / e.run_name;
    std::vector<std::optional<std::size_t>> sizes;
    if (e.memory_sizes.empty()) sizes.push_back(std::nullopt);
    for (auto m : e.memory_sizes) sizes.push_back(m);
    for (const auto& m : sizes) {
        for (auto seed : e.seeds) {
            PlannedRun r;
            r.config = e;
            r.config.seeds = {seed};
            r.config.memory_sizes.clear();
            r.config.train.seed = seed;
            fs::path dir = base;
            if (m) {
                r.config.model.memory_size = *m;
                dir /= "mem" + std::to_string(*m);
            }
            r.dir = dir / ("seed" + std::to_string(seed));
            out.push_back(std::move(r));
        }
    }
    return out;
}

struct RunOptions {
    bool resume = false;
    std::ostream* log = nullptr;
};

template <typename T>
TrainResult execute_run(const PlannedRun& run) {
    auto model = assemble_model<T>(run.config.model, model_init_seed(run.config.train.seed));
    const TaskData data = generate_task(run.config.task);
    return train(*model, data, run.config.train, run.dir);
}

// Trains every (memory size, seed) cell. Existing run directories are refused
// unless resuming; a resume skips complete runs and redoes incomplete ones.
inline std::vector<RunArtifacts> cmd_run(const ExperimentConfig& e, const fs::path& root, const RunOptions& opts = {}) {
    validate_experiment(e);
    const auto runs = plan_runs(e, root);
    if (!opts.resume) {
        for (const auto& r : runs) {
            if (fs::exists(r.dir)) {
                throw UsageError("run directory " + r.dir.string() + " already exists (use --resume to continue the suite)");
            }
        }
    }
    std::vector<RunArtifacts> out;
    for (const auto& r : runs) {
        if (fs::exists(r.dir / kCompleteMarker)) {
            if (opts.log) *opts.log << "skip " << r.dir.string() << " (complete)\n";
            out.push_back(artifact_paths(r.dir));
            continue;
        }
        if (fs::exists(r.dir)) fs::remove_all(r.dir);
        fs::create_directories(r.dir);
        std::ofstream(r.dir / "config.json") << to_json(r.config).dump(2) << '\n';
        if (opts.log) *opts.log << "run " << r.dir.string() << std::endl;
        const TrainResult result = e.precision == Precision::high ? execute_run<double>(r) : execute_run<float>(r);
        if (opts.log && result.final_val_accuracy) {
            *opts.log << "  val accuracy " << *result.final_val_accuracy << " (best " << *result.best_val_accuracy
                      << " at step " << result.best_step << ")\n";
        }
        std::ofstream(r.dir / kCompleteMarker) << "ok\n";
        out.push_back(*result.artifacts);
    }
    return out;
}

// ---------------------------------------------------------------------------
// compare

enum class CompareMetric { final_accuracy, best_accuracy };

inline CompareMetric parse_compare_metric(const std::string& s) {
    if (s == "final") return CompareMetric::final_accuracy;
    if (s == "best") return CompareMetric::best_accuracy;
    throw UsageError("compare: metric must be 'final' or 'best', got '" + s + "'");
}

// One hypothesis: k treatment directories, each holding seed*/report/summary.json.
struct TreatmentGroup {
    std::string name;
    std::vector<fs::path> treatments;
};

namespace detail {

inline std::vector<fs::path> sorted_subdirs(const fs::path& dir, const std::string& prefix) {
    std::vector<fs::path> out;
    if (!fs::is_directory(dir)) return out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const auto name = entry.path().filename().string();
        if (entry.is_directory() && name.rfind(prefix, 0) == 0) out.push_back(entry.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

// Numeric suffix after a prefix, so mem16 sorts after mem2.
inline std::optional<long long> numeric_suffix(const std::string& name, const std::string& prefix) {
    if (name.rfind(prefix, 0) != 0 || name.size() == prefix.size()) return std::nullopt;
    const std::string digits = name.substr(prefix.size());
    if (!std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; })) return std::nullopt;
    return std::stoll(digits);
}

inline double read_summary_metric(const fs::path& seed_dir, CompareMetric metric) {
    const fs::path path = artifact_paths(seed_dir).report;
    std::ifstream in(path);
    if (!in) throw UsageError("compare: missing " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw InputError("compare: " + path.string() + ": " + e.what());
    }
    const char* key = metric == CompareMetric::final_accuracy ? "final_val_accuracy" : "best_val_accuracy";
    if (!j.contains(key) || !j[key].is_number()) {
        throw UsageError("compare: " + path.string() + " has no " + key + " (run had no validation evaluation)");
    }
    return j[key].get<double>();
}

} // namespace detail

// A suite directory whose children are treatments (e.g. mem1/, mem16/, mem256/).
inline TreatmentGroup group_from_suite(const fs::path& suite) {
    TreatmentGroup g;
    g.name = suite.filename().string();
    if (g.name.empty()) g.name = suite.parent_path().filename().string();
    for (const auto& entry : detail::sorted_subdirs(suite, "")) {
        if (!detail::sorted_subdirs(entry, "seed").empty()) g.treatments.push_back(entry);
    }
    std::stable_sort(g.treatments.begin(), g.treatments.end(), [](const fs::path& a, const fs::path& b) {
        const auto na = detail::numeric_suffix(a.filename().string(), "mem");
        const auto nb = detail::numeric_suffix(b.filename().string(), "mem");
        if (na && nb) return *na < *nb;
        return false;
    });
    return g;
}

struct CompareOutcome {
    SignificanceReport report;
    std::vector<std::vector<std::vector<double>>> score_matrices;  // per hypothesis, n_blocks x k
    std::vector<std::vector<std::string>> block_names;
};

// Builds one n x k score matrix per group (blocks = shared seed directories),
// runs the Friedman test per group and Holm-adjusts across the family.
inline CompareOutcome cmd_compare(const std::vector<TreatmentGroup>& groups, CompareMetric metric) {
    if (groups.empty()) throw UsageError("compare: no treatment groups given");
    CompareOutcome out;
    for (const auto& g : groups) {
        if (g.treatments.size() < 2) {
            throw UsageError("compare: group '" + g.name + "' needs at least two treatments, found " +
                             std::to_string(g.treatments.size()));
        }
        std::vector<std::string> seeds;
        for (std::size_t t = 0; t < g.treatments.size(); ++t) {
            std::vector<std::string> names;
            for (const auto& s : detail::sorted_subdirs(g.treatments[t], "seed")) names.push_back(s.filename().string());
            if (t == 0) {
                seeds = names;
            } else if (names != seeds) {
                throw UsageError("compare: group '" + g.name + "' is ragged: " + g.treatments[t].string() +
                                 " has a different seed set than " + g.treatments[0].string());
            }
        }
        if (seeds.size() < 2) throw UsageError("compare: group '" + g.name + "' needs at least two seeds per treatment");
        std::vector<std::vector<double>> scores(seeds.size(), std::vector<double>(g.treatments.size()));
        for (std::size_t b = 0; b < seeds.size(); ++b) {
            for (std::size_t t = 0; t < g.treatments.size(); ++t) {
                scores[b][t] = detail::read_summary_metric(g.treatments[t] / seeds[b], metric);
            }
        }
        const auto f = friedman_test(scores);
        out.report.hypotheses.push_back(g.name);
        std::vector<std::string> treatment_names;
        for (const auto& t : g.treatments) treatment_names.push_back(t.filename().string());
        out.report.treatments.push_back(treatment_names);
        out.report.blocks.push_back(seeds.size());
        out.report.friedman_chi2.push_back(f.chi2);
        out.report.raw_p.push_back(f.p_value);
        out.score_matrices.push_back(std::move(scores));
        out.block_names.push_back(seeds);
    }
    out.report.holm_p = holm_adjust(out.report.raw_p);
    return out;
}

inline nlohmann::json to_json(const CompareOutcome& c, CompareMetric metric) {
    nlohmann::json j;
    j["metric"] = metric == CompareMetric::final_accuracy ? "final" : "best";
    j["hypotheses"] = nlohmann::json::array();
    for (std::size_t i = 0; i < c.report.hypotheses.size(); ++i) {
        j["hypotheses"].push_back({{"name", c.report.hypotheses[i]},
                                   {"treatments", c.report.treatments[i]},
                                   {"blocks", c.block_names[i]},
                                   {"scores", c.score_matrices[i]},
                                   {"friedman_chi2", c.report.friedman_chi2[i]},
                                   {"p", c.report.raw_p[i]},
                                   {"holm_p", c.report.holm_p[i]}});
    }
    return j;
}

inline void write_compare_report(const fs::path& dir, const CompareOutcome& c, CompareMetric metric) {
    fs::create_directories(dir);
    std::ofstream(dir / "significance.json") << to_json(c, metric).dump(2) << '\n';
    std::ofstream tsv(dir / "significance.tsv");
    tsv << "hypothesis\ttreatments\tblocks\tfriedman_chi2\tp\tholm_p\n";
    tsv << std::setprecision(17);
    for (std::size_t i = 0; i < c.report.hypotheses.size(); ++i) {
        std::string treatments;
        for (const auto& t : c.report.treatments[i]) treatments += (treatments.empty() ? "" : ",") + t;
        tsv << c.report.hypotheses[i] << '\t' << treatments << '\t' << c.report.blocks[i] << '\t'
            << c.report.friedman_chi2[i] << '\t' << c.report.raw_p[i] << '\t' << c.report.holm_p[i] << '\n';
    }
}

// ---------------------------------------------------------------------------
// diagnose

struct DiagnoseOutput {
    fs::path degradation;
    fs::path entropy;
    fs::path heatmap;
    std::size_t snapshot_count = 0;
};

// Degradation series, packing-entropy series and a long-format memory heatmap
// table for one seed directory. Everything is computed before the first file is written.
inline DiagnoseOutput cmd_diagnose(const fs::path& run_dir, const std::optional<fs::path>& out_dir = std::nullopt,
                                   double tol = kDefaultDegradationTol) {
    const RunArtifacts paths = artifact_paths(run_dir);
    std::vector<fs::path> files;
    if (fs::is_directory(paths.snapshots_dir)) {
        for (const auto& entry : fs::directory_iterator(paths.snapshots_dir)) {
            if (entry.is_regular_file() && entry.path().extension() == ".ckpt") files.push_back(entry.path());
        }
    }
    if (files.empty()) {
        throw UsageError("diagnose: no memory snapshots under " + paths.snapshots_dir.string() +
                         " (set train.snapshot_every > 0 on a memory architecture)");
    }
    std::sort(files.begin(), files.end());

    std::ostringstream degradation, heatmap, entropy;
    degradation << std::setprecision(17);
    heatmap << std::setprecision(17);
    entropy << std::setprecision(17);
    degradation << "step\tblock\tvalue_mean_cosine\tvalue_rank\tvalue_unique\tvalue_degenerate"
                   "\tgrad_mean_cosine\tgrad_rank\tgrad_unique\tgrad_degenerate\n";
    heatmap << "step\ttag\trow\tcol\tvalue\n";
    for (const auto& file : files) {
        const auto snaps = read_snapshot_file(file);
        degradation << snaps.front().step << '\t' << snaps.front().block;
        for (const auto& s : snaps) {
            const auto r = degradation_metrics(s, tol);
            degradation << '\t' << r.mean_pairwise_cosine << '\t' << r.numerical_rank << '\t' << r.unique_vector_count
                        << '\t' << (r.degenerate ? 1 : 0);
            for (std::size_t i = 0; i < s.rows; ++i)
                for (std::size_t j = 0; j < s.cols; ++j)
                    heatmap << s.step << '\t' << snapshot_tag_name(s.tag) << '\t' << i << '\t' << j << '\t' << s.at(i, j)
                            << '\n';
        }
        degradation << '\n';
    }
    entropy << "step\tpack_entropy\n";
    if (fs::exists(paths.metrics_log)) {
        for (const auto& m : read_metric_log(paths.metrics_log)) {
            if (m.metric == "pack_entropy") entropy << m.step << '\t' << m.value << '\n';
        }
    }

    DiagnoseOutput out;
    const fs::path dir = out_dir.value_or(run_dir / "diagnostics");
    fs::create_directories(dir);
    out.degradation = dir / "degradation.tsv";
    out.entropy = dir / "entropy.tsv";
    out.heatmap = dir / "memory_heatmap.tsv";
    out.snapshot_count = files.size();
    std::ofstream(out.degradation) << degradation.str();
    std::ofstream(out.entropy) << entropy.str();
    std::ofstream(out.heatmap) << heatmap.str();
    return out;
}

} // namespace lunalab
