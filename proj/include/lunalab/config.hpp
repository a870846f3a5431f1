#pragma once

// JSON experiment configuration. Every object rejects unknown keys; missing
// keys keep their defaults. See docs/config_schema.md.

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lunalab/model.hpp"
#include "lunalab/tasks.hpp"
#include "lunalab/training.hpp"

namespace lunalab {

enum class Precision { standard, high };

struct ExperimentConfig {
    std::string run_name = "experiment";
    std::string output_dir;  // empty: --output, $LUNALAB_OUTPUT_ROOT, then ./runs
    Precision precision = Precision::standard;
    std::vector<std::uint64_t> seeds{0};
    std::vector<std::size_t> memory_sizes;  // optional sweep; empty = model.memory_size only
    ModelConfig model;
    TrainConfig train;
    TaskSpec task;

    bool operator==(const ExperimentConfig&) const = default;
};

namespace detail {

// Reads fields of one JSON object, remembering which keys were consumed.
class FieldReader {
public:
    FieldReader(const nlohmann::json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
        if (!obj_.is_object()) throw ConfigError(where("") + " must be an object");
    }

    template <typename V>
    void read(const char* key, V& out) {
        seen_.insert(key);
        auto it = obj_.find(key);
        if (it == obj_.end()) return;
        try {
            out = it->template get<V>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(where(key) + ": expected " + type_hint<V>() + ", got " + it->dump());
        }
        if constexpr (std::is_unsigned_v<V>) {
            if (it->is_number_integer() && it->template get<long long>() < 0) throw ConfigError(where(key) + ": must be non-negative");
        }
    }

    template <typename E>
    void read_enum(const char* key, E& out, const std::vector<std::pair<std::string, E>>& names) {
        std::string text;
        bool present = obj_.contains(key);
        read(key, text);
        if (!present) return;
        for (const auto& [name, value] : names) {
            if (name == text) {
                out = value;
                return;
            }
        }
        std::string options;
        for (const auto& [name, value] : names) options += (options.empty() ? "" : "|") + name;
        throw ConfigError(where(key) + ": unknown value '" + text + "' (expected " + options + ")");
    }

    const nlohmann::json* child(const char* key) {
        seen_.insert(key);
        auto it = obj_.find(key);
        return it == obj_.end() ? nullptr : &*it;
    }

    void finish() const {
        for (auto it = obj_.begin(); it != obj_.end(); ++it) {
            if (!seen_.count(it.key())) throw ConfigError(where(it.key()) + ": unknown key");
        }
    }

    std::string where(const std::string& key) const {
        if (key.empty()) return path_.empty() ? "<root>" : path_;
        return path_.empty() ? key : path_ + "." + key;
    }

private:
    template <typename V>
    static const char* type_hint() {
        if constexpr (std::is_same_v<V, bool>) return "a boolean";
        else if constexpr (std::is_integral_v<V>) return "an integer";
        else if constexpr (std::is_floating_point_v<V>) return "a number";
        else if constexpr (std::is_same_v<V, std::string>) return "a string";
        else return "a list";
    }

    const nlohmann::json& obj_;
    std::string path_;
    std::set<std::string> seen_;
};

inline const std::vector<std::pair<std::string, Arch>>& arch_names() {
    static const std::vector<std::pair<std::string, Arch>> v{{"vanilla", Arch::vanilla},
                                                             {"luna", Arch::luna},
                                                             {"convluna", Arch::convluna},
                                                             {"luna-only-scaling", Arch::luna_only_scaling},
                                                             {"luna-only-filtering", Arch::luna_only_filtering}};
    return v;
}

inline const std::vector<std::pair<std::string, Pooling>>& pooling_names() {
    static const std::vector<std::pair<std::string, Pooling>> v{
        {"memory-average", Pooling::memory_average}, {"token-mean", Pooling::token_mean}, {"cls", Pooling::cls}};
    return v;
}

inline const std::vector<std::pair<std::string, FilterKind>>& filter_names() {
    static const std::vector<std::pair<std::string, FilterKind>> v{
        {"identity", FilterKind::identity}, {"conv", FilterKind::conv}, {"maxpool", FilterKind::maxpool}};
    return v;
}

inline const std::vector<std::pair<std::string, TaskKind>>& task_names() {
    static const std::vector<std::pair<std::string, TaskKind>> v{{"listops", TaskKind::listops},
                                                                 {"marker", TaskKind::marker},
                                                                 {"pixel-grid", TaskKind::pixel_grid},
                                                                 {"file-ingest", TaskKind::file_ingest}};
    return v;
}

inline const std::vector<std::pair<std::string, Precision>>& precision_names() {
    static const std::vector<std::pair<std::string, Precision>> v{{"standard", Precision::standard},
                                                                  {"high", Precision::high}};
    return v;
}

} // namespace detail

inline nlohmann::json to_json(const FilterSpec& f) {
    return {{"kind", filter_kind_name(f.kind)}, {"kernel", f.kernel}, {"stride", f.stride}};
}

inline nlohmann::json to_json(const ModelConfig& m) {
    return {{"arch", arch_name(m.arch)},
            {"blocks", m.blocks},
            {"d", m.d},
            {"h", m.h},
            {"mlp_dim", m.mlp_dim},
            {"memory_size", m.memory_size},
            {"filter", to_json(m.filter)},
            {"vocab_size", m.vocab_size},
            {"max_len", m.max_len},
            {"num_classes", m.num_classes},
            {"dropout", m.dropout},
            {"pooling", pooling_name(m.pooling)},
            {"dual_input", m.dual_input},
            {"share_projections", m.share_projections},
            {"identity_value", m.identity_value}};
}

inline nlohmann::json to_json(const TrainConfig& t) {
    return {{"base_lr", t.base_lr},
            {"weight_decay", t.weight_decay},
            {"warmup_steps", t.warmup_steps},
            {"total_steps", t.total_steps},
            {"batch_size", t.batch_size},
            {"beta1", t.beta1},
            {"beta2", t.beta2},
            {"adam_eps", t.adam_eps},
            {"seed", t.seed},
            {"snapshot_every", t.snapshot_every},
            {"eval_every", t.eval_every},
            {"grad_clip", t.grad_clip},
            {"log_wall_time", t.log_wall_time},
            {"entropy_samples", t.entropy_samples}};
}

inline nlohmann::json to_json(const TaskSpec& t) {
    return {{"kind", task_kind_name(t.kind)},
            {"min_len", t.min_len},
            {"max_len", t.max_len},
            {"min_depth", t.min_depth},
            {"max_depth", t.max_depth},
            {"vocab_size", t.vocab_size},
            {"num_classes", t.num_classes},
            {"seed", t.seed},
            {"dual_input", t.dual_input},
            {"n_train", t.n_train},
            {"n_val", t.n_val},
            {"grid_side", t.grid_side},
            {"noise", t.noise},
            {"train_path", t.train_path},
            {"val_path", t.val_path}};
}

inline nlohmann::json to_json(const ExperimentConfig& e) {
    return {{"run_name", e.run_name},
            {"output_dir", e.output_dir},
            {"precision", e.precision == Precision::high ? "high" : "standard"},
            {"seeds", e.seeds},
            {"memory_sizes", e.memory_sizes},
            {"model", to_json(e.model)},
            {"train", to_json(e.train)},
            {"task", to_json(e.task)}};
}

inline FilterSpec filter_from_json(const nlohmann::json& j, const std::string& path) {
    FilterSpec f;
    detail::FieldReader r(j, path);
    r.read_enum("kind", f.kind, detail::filter_names());
    r.read("kernel", f.kernel);
    r.read("stride", f.stride);
    r.finish();
    return f;
}

inline ModelConfig model_from_json(const nlohmann::json& j, const std::string& path = "model") {
    ModelConfig m;
    detail::FieldReader r(j, path);
    r.read_enum("arch", m.arch, detail::arch_names());
    r.read("blocks", m.blocks);
    r.read("d", m.d);
    r.read("h", m.h);
    r.read("mlp_dim", m.mlp_dim);
    r.read("memory_size", m.memory_size);
    if (const auto* f = r.child("filter")) m.filter = filter_from_json(*f, r.where("filter"));
    r.read("vocab_size", m.vocab_size);
    r.read("max_len", m.max_len);
    r.read("num_classes", m.num_classes);
    r.read("dropout", m.dropout);
    if (!j.contains("pooling") && m.arch == Arch::vanilla) m.pooling = Pooling::token_mean;
    r.read_enum("pooling", m.pooling, detail::pooling_names());
    r.read("dual_input", m.dual_input);
    r.read("share_projections", m.share_projections);
    r.read("identity_value", m.identity_value);
    r.finish();
    return m;
}

inline TrainConfig train_from_json(const nlohmann::json& j, const std::string& path = "train") {
    TrainConfig t;
    detail::FieldReader r(j, path);
    r.read("base_lr", t.base_lr);
    r.read("weight_decay", t.weight_decay);
    r.read("warmup_steps", t.warmup_steps);
    r.read("total_steps", t.total_steps);
    r.read("batch_size", t.batch_size);
    r.read("beta1", t.beta1);
    r.read("beta2", t.beta2);
    r.read("adam_eps", t.adam_eps);
    r.read("seed", t.seed);
    r.read("snapshot_every", t.snapshot_every);
    r.read("eval_every", t.eval_every);
    r.read("grad_clip", t.grad_clip);
    r.read("log_wall_time", t.log_wall_time);
    r.read("entropy_samples", t.entropy_samples);
    r.finish();
    return t;
}

inline TaskSpec task_from_json(const nlohmann::json& j, const std::string& path = "task") {
    TaskSpec t;
    detail::FieldReader r(j, path);
    r.read_enum("kind", t.kind, detail::task_names());
    r.read("min_len", t.min_len);
    r.read("max_len", t.max_len);
    r.read("min_depth", t.min_depth);
    r.read("max_depth", t.max_depth);
    r.read("vocab_size", t.vocab_size);
    r.read("num_classes", t.num_classes);
    r.read("seed", t.seed);
    r.read("dual_input", t.dual_input);
    r.read("n_train", t.n_train);
    r.read("n_val", t.n_val);
    r.read("grid_side", t.grid_side);
    r.read("noise", t.noise);
    r.read("train_path", t.train_path);
    r.read("val_path", t.val_path);
    r.finish();
    return t;
}

// Cross-section consistency between model, task and training settings.
inline void validate_experiment(const ExperimentConfig& e) {
    if (e.run_name.empty()) throw ConfigError("run_name must not be empty");
    if (e.run_name.find('/') != std::string::npos) throw ConfigError("run_name must not contain '/'");
    if (e.seeds.empty()) throw ConfigError("seeds must list at least one seed");
    e.train.validate();
    validate_task(e.task);
    auto check_model = [&](const ModelConfig& m) {
        m.validate();
        if (m.vocab_size != e.task.vocab_size) throw ConfigError("model.vocab_size must equal task.vocab_size");
        if (m.num_classes != e.task.num_classes) throw ConfigError("model.num_classes must equal task.num_classes");
        if (m.dual_input != e.task.dual_input) throw ConfigError("model.dual_input must equal task.dual_input");
        const std::size_t task_len = e.task.kind == TaskKind::pixel_grid ? e.task.grid_side * e.task.grid_side : e.task.max_len;
        if (task_len > m.max_len) throw ConfigError("task sequences can exceed model.max_len");
    };
    if (e.memory_sizes.empty()) {
        check_model(e.model);
    } else {
        if (!uses_memory(e.model.arch)) throw ConfigError("memory_sizes requires a memory architecture");
        for (auto m : e.memory_sizes) {
            ModelConfig copy = e.model;
            copy.memory_size = m;
            check_model(copy);
        }
    }
}

inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
    ExperimentConfig e;
    detail::FieldReader r(j, "");
    r.read("run_name", e.run_name);
    r.read("output_dir", e.output_dir);
    r.read_enum("precision", e.precision, detail::precision_names());
    r.read("seeds", e.seeds);
    r.read("memory_sizes", e.memory_sizes);
    if (const auto* m = r.child("model")) e.model = model_from_json(*m);
    if (const auto* t = r.child("train")) e.train = train_from_json(*t);
    if (const auto* t = r.child("task")) e.task = task_from_json(*t);
    r.finish();
    validate_experiment(e);
    return e;
}

inline nlohmann::json parse_json_text(const std::string& text, const std::string& origin) {
    try {
        return nlohmann::json::parse(text, nullptr, true, /*ignore_comments=*/true);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(origin + ": " + e.what());
    }
}

// Applies "a.b.c=value" overrides; the value is parsed as JSON, falling back to a plain string.
inline void apply_override(nlohmann::json& root, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' must look like key.path=value");
    const std::string path = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    nlohmann::json value;
    try {
        value = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error&) {
        value = text;
    }
    nlohmann::json* node = &root;
    std::size_t start = 0;
    for (;;) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) throw ConfigError("override '" + assignment + "' has an empty path segment");
        if (!node->is_object()) throw ConfigError("override '" + assignment + "' descends into a non-object");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        if (node->is_null()) *node = nlohmann::json::object();
        start = dot + 1;
    }
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    std::stringstream buffer;
    buffer << in.rdbuf();
    auto json = parse_json_text(buffer.str(), path.string());
    for (const auto& o : overrides) apply_override(json, o);
    return experiment_from_json(json);
}

} // namespace lunalab
