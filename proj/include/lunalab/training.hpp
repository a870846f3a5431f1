#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lunalab/checkpoint.hpp"
#include "lunalab/diagnostics.hpp"
#include "lunalab/model.hpp"
#include "lunalab/tasks.hpp"

namespace lunalab {

struct TrainConfig {
    double base_lr = 0.005;
    double weight_decay = 0.01;
    std::size_t warmup_steps = 100;
    std::size_t total_steps = 1000;
    std::size_t batch_size = 32;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    std::size_t snapshot_every = 0;  // 0 disables memory snapshots
    std::size_t eval_every = 100;
    double grad_clip = 0.0;      // global-norm clipping, 0 = off
    bool log_wall_time = false;  // off keeps metric logs bit-reproducible
    std::size_t entropy_samples = 8;

    bool operator==(const TrainConfig&) const = default;

    void validate() const {
        if (!(base_lr > 0)) throw ConfigError("train.base_lr must be positive");
        if (weight_decay < 0) throw ConfigError("train.weight_decay must be non-negative");
        if (warmup_steps > total_steps) throw ConfigError("train.warmup_steps must not exceed train.total_steps");
        if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
        if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("train.beta1/beta2 must lie in [0, 1)");
        if (!(adam_eps > 0)) throw ConfigError("train.adam_eps must be positive");
        if (eval_every == 0) throw ConfigError("train.eval_every must be positive");
        if (grad_clip < 0) throw ConfigError("train.grad_clip must be non-negative");
    }
};

// base_lr * min(1, step / warmup) / sqrt(max(step, warmup))
inline double lr_at(std::size_t step, const TrainConfig& cfg) {
    if (step < 1) throw UsageError("lr_at: steps are 1-based");
    const double s = static_cast<double>(step);
    const double w = static_cast<double>(cfg.warmup_steps);
    const double warm = cfg.warmup_steps == 0 ? 1.0 : std::min(1.0, s / w);
    return cfg.base_lr * warm / std::sqrt(std::max(s, w));
}

template <typename T>
struct OptimizerState {
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;
    std::uint64_t t = 0;
};

// Decoupled weight decay; parameters flagged decay=false (norm gains/biases,
// biases, tau) are only moved by the adaptive term.
template <typename T>
void adamw_step(ParameterStore<T>& params, OptimizerState<T>& state, double lr, const TrainConfig& cfg) {
    auto& all = params.all();
    for (const auto& p : all) {
        if (!p.tensor.has_grad()) throw UsageError("adamw_step: parameter " + p.name + " has no gradient");
    }
    if (state.m.empty()) {
        for (const auto& p : all) {
            state.m.emplace_back(p.tensor.numel(), T(0));
            state.v.emplace_back(p.tensor.numel(), T(0));
        }
    }
    if (state.m.size() != all.size()) throw UsageError("adamw_step: optimizer state does not match parameters");
    ++state.t;
    const double b1 = cfg.beta1, b2 = cfg.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
    for (std::size_t k = 0; k < all.size(); ++k) {
        auto& p = all[k];
        auto theta = p.tensor.mutable_data();
        auto grad = p.tensor.grad();
        auto& m = state.m[k];
        auto& v = state.v[k];
        const double decay = p.decay ? cfg.weight_decay : 0.0;
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double g = grad[i];
            m[i] = static_cast<T>(b1 * m[i] + (1.0 - b1) * g);
            v[i] = static_cast<T>(b2 * v[i] + (1.0 - b2) * g * g);
            const double m_hat = m[i] / c1;
            const double v_hat = v[i] / c2;
            theta[i] = static_cast<T>(theta[i] - lr * (m_hat / (std::sqrt(v_hat) + cfg.adam_eps) + decay * theta[i]));
        }
    }
}

// Mean over rows of -log softmax(logits)[target].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets) {
    detail::require_matrix(logits, "cross_entropy");
    const std::size_t b = logits.rows(), c = logits.cols();
    if (targets.size() != b) throw InputError("cross_entropy: target count does not match batch");
    for (int t : targets) {
        if (t < 0 || static_cast<std::size_t>(t) >= c) {
            throw InputError("cross_entropy: target " + std::to_string(t) + " outside [0, " + std::to_string(c) + ")");
        }
    }
    std::vector<T> probs(b * c);
    T loss = 0;
    for (std::size_t i = 0; i < b; ++i) {
        const T* row = logits.data().data() + i * c;
        T peak = *std::max_element(row, row + c);
        T total = 0;
        for (std::size_t j = 0; j < c; ++j) total += std::exp(row[j] - peak);
        const T log_total = std::log(total) + peak;
        for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(row[j] - log_total);
        loss += log_total - row[targets[i]];
    }
    loss /= static_cast<T>(b);
    return Tensor<T>::from_op({1}, {loss}, {logits.node()},
                              [b, c, targets, probs = std::move(probs)](TensorNode<T>& self) {
                                  auto& nl = *self.parents[0];
                                  const T g = self.grad[0] / static_cast<T>(b);
                                  for (std::size_t i = 0; i < b; ++i)
                                      for (std::size_t j = 0; j < c; ++j) {
                                          const T onehot = static_cast<int>(j) == targets[i] ? T(1) : T(0);
                                          nl.grad[i * c + j] += g * (probs[i * c + j] - onehot);
                                      }
                              });
}

// ---------------------------------------------------------------------------

struct MetricRecord {
    std::size_t step = 0;
    std::string split;
    std::string metric;
    double value = 0.0;
    double wall_time = 0.0;
};

inline nlohmann::json to_json(const MetricRecord& r) {
    nlohmann::json j;
    j["step"] = r.step;
    j["split"] = r.split;
    j["metric"] = r.metric;
    if (std::isfinite(r.value)) j["value"] = r.value;
    else j["value"] = nullptr;
    j["wall_time"] = r.wall_time;
    return j;
}

inline MetricRecord metric_from_json(const nlohmann::json& j) {
    MetricRecord r;
    r.step = j.at("step").get<std::size_t>();
    r.split = j.at("split").get<std::string>();
    r.metric = j.at("metric").get<std::string>();
    r.value = j.at("value").is_null() ? std::nan("") : j.at("value").get<double>();
    r.wall_time = j.value("wall_time", 0.0);
    return r;
}

inline std::vector<MetricRecord> read_metric_log(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("metric log: cannot open " + path.string());
    std::vector<MetricRecord> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        try {
            out.push_back(metric_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw InputError("metric log line " + std::to_string(n) + ": " + e.what());
        }
    }
    return out;
}

struct RunArtifacts {
    std::filesystem::path run_dir;
    std::filesystem::path metrics_log;
    std::filesystem::path snapshots_dir;
    std::filesystem::path final_checkpoint;
    std::filesystem::path best_checkpoint;
    std::filesystem::path report;
};

inline RunArtifacts artifact_paths(const std::filesystem::path& run_dir) {
    return {run_dir,
            run_dir / "metrics.jsonl",
            run_dir / "snapshots",
            run_dir / "checkpoints" / "final.ckpt",
            run_dir / "checkpoints" / "best.ckpt",
            run_dir / "report" / "summary.json"};
}

struct TrainResult {
    std::vector<MetricRecord> metrics;
    std::vector<MemorySnapshot> snapshots;
    Checkpoint final_checkpoint;
    Checkpoint best_checkpoint;
    std::optional<double> final_val_accuracy;
    std::optional<double> best_val_accuracy;
    std::size_t best_step = 0;
    std::optional<RunArtifacts> artifacts;
};

// Thrown after a non-finite loss; the offending step is in the metric log.
class TrainingAborted : public NumericError {
public:
    TrainingAborted(const std::string& what, std::size_t step) : NumericError(what), step_(step) {}
    std::size_t step() const { return step_; }

private:
    std::size_t step_;
};

template <typename T>
Tensor<T> sample_logits(const Model<T>& model, const SequenceSample& s, ForwardContext<T>& ctx) {
    if (model.config().dual_input) return model.logits_pair(s.tokens, s.mask, s.tokens_b, s.mask_b, ctx);
    return model.logits(s.tokens, s.mask, ctx);
}

template <typename T>
int predict(const Model<T>& model, const SequenceSample& s) {
    NoGradGuard no_grad;
    ForwardContext<T> ctx;
    const auto logits = sample_logits(model, s, ctx);
    const auto data = logits.data();
    return static_cast<int>(std::max_element(data.begin(), data.end()) - data.begin());
}

template <typename T>
double evaluate_accuracy(const Model<T>& model, const Dataset& data) {
    if (data.empty()) return 0.0;
    std::size_t correct = 0;
    for (const auto& s : data) correct += predict(model, s) == s.label ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

// Mean normalized entropy of block-0 packing attention over the first samples.
template <typename T>
std::optional<double> packing_entropy(const Model<T>& model, const Dataset& data, std::size_t samples) {
    if (!uses_memory(model.config().arch) || data.empty() || samples == 0) return std::nullopt;
    NoGradGuard no_grad;
    double total = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < std::min(samples, data.size()); ++i) {
        std::vector<AttentionTrace<T>> traces;
        ForwardContext<T> ctx;
        ctx.pack_traces = &traces;
        model.encode(data[i].tokens, data[i].mask, ctx);
        for (const auto& head : traces.front().head_scores) {
            std::vector<double> scores(head.data().begin(), head.data().end());
            // single-precision rows can miss 1 by a few ulps; renormalize in double
            const std::size_t keys = head.cols();
            for (std::size_t r = 0; r < head.rows(); ++r) {
                double row_sum = 0;
                for (std::size_t k = 0; k < keys; ++k) row_sum += scores[r * keys + k];
                for (std::size_t k = 0; k < keys; ++k) scores[r * keys + k] /= row_sum;
            }
            total += attention_entropy(scores, head.cols());
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

template <typename T>
std::uint64_t forward_flops(const Model<T>& model, const SequenceSample& s) {
    NoGradGuard no_grad;
    FlopCounter counter;
    FlopCounter::Activate active(counter);
    ForwardContext<T> ctx;
    sample_logits(model, s, ctx);
    return counter.total();
}

namespace detail {

inline std::string step_file(std::size_t step) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "step_%08zu.ckpt", step);
    return buf;
}

} // namespace detail

inline void write_snapshot_file(const std::filesystem::path& path, const MemorySnapshot& value,
                                const MemorySnapshot& gradient) {
    Checkpoint ckpt;
    ckpt.meta = {{"kind", "memory_snapshot"}, {"step", value.step}, {"block", value.block}};
    ckpt.tensors.push_back({"memory.value", {value.rows, value.cols}, DType::f64, value.matrix});
    ckpt.tensors.push_back({"memory.gradient", {gradient.rows, gradient.cols}, DType::f64, gradient.matrix});
    write_checkpoint(path, ckpt);
}

inline std::vector<MemorySnapshot> read_snapshot_file(const std::filesystem::path& path) {
    const auto ckpt = read_checkpoint(path);
    if (ckpt.meta.value("kind", "") != "memory_snapshot") throw InputError("not a memory snapshot: " + path.string());
    std::vector<MemorySnapshot> out;
    for (const auto& [name, tag] : {std::pair{"memory.value", SnapshotTag::value},
                                    std::pair{"memory.gradient", SnapshotTag::gradient}}) {
        const auto* t = ckpt.find(name);
        if (!t || t->shape.size() != 2) throw InputError("snapshot " + path.string() + " lacks " + name);
        MemorySnapshot s;
        s.step = ckpt.meta.at("step").get<std::size_t>();
        s.block = ckpt.meta.at("block").get<std::size_t>();
        s.tag = tag;
        s.rows = t->shape[0];
        s.cols = t->shape[1];
        s.matrix = t->values;
        out.push_back(std::move(s));
    }
    return out;
}

// Seeded AdamW training. Writes artifacts under run_dir when given:
//   metrics.jsonl, snapshots/step_*.ckpt, checkpoints/{final,best}.ckpt, report/summary.json
template <typename T>
TrainResult train(Model<T>& model, const TaskData& data, const TrainConfig& cfg,
                  const std::optional<std::filesystem::path>& run_dir = std::nullopt) {
    cfg.validate();
    if (cfg.total_steps > 0 && data.train.empty()) throw InputError("train: empty training set");
    const auto started = std::chrono::steady_clock::now();
    TrainResult result;

    std::ofstream log;
    if (run_dir) {
        result.artifacts = artifact_paths(*run_dir);
        std::filesystem::create_directories(*run_dir);
        std::filesystem::create_directories(result.artifacts->snapshots_dir);
        std::filesystem::create_directories(result.artifacts->final_checkpoint.parent_path());
        std::filesystem::create_directories(result.artifacts->report.parent_path());
        log.open(result.artifacts->metrics_log, std::ios::trunc);
        if (!log) throw UsageError("train: cannot write " + result.artifacts->metrics_log.string());
    }
    auto emit = [&](std::size_t step, const std::string& split, const std::string& metric, double value) {
        MetricRecord r{step, split, metric, value, 0.0};
        if (cfg.log_wall_time) {
            r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        }
        result.metrics.push_back(r);
        if (log) log << to_json(r).dump() << '\n' << std::flush;
    };
    auto checkpoint_meta = [&](std::size_t step) {
        return nlohmann::json{{"kind", "model"}, {"step", step}, {"arch", arch_name(model.config().arch)}};
    };

    auto& params = model.params();
    OptimizerState<T> opt;
    std::mt19937_64 batch_rng(detail::split_seed(cfg.seed, 10));
    std::mt19937_64 dropout_rng(detail::split_seed(cfg.seed, 11));
    std::uniform_int_distribution<std::size_t> pick(0, data.train.empty() ? 0 : data.train.size() - 1);

    result.best_checkpoint = checkpoint_from(params, checkpoint_meta(0));
    double window_loss = 0;
    std::size_t window_correct = 0, window_count = 0, window_steps = 0;

    for (std::size_t step = 1; step <= cfg.total_steps; ++step) {
        for (auto& p : params.all()) {
            auto g = p.tensor.mutable_grad();
            std::fill(g.begin(), g.end(), T(0));
        }
        std::vector<Tensor<T>> rows;
        std::vector<int> targets;
        ForwardContext<T> ctx;
        ctx.training = true;
        ctx.dropout = model.config().dropout;
        ctx.rng = &dropout_rng;
        Tensor<T> logits, loss;
        double loss_value = 0;
        try {
            for (std::size_t b = 0; b < cfg.batch_size; ++b) {
                const auto& s = data.train[pick(batch_rng)];
                rows.push_back(sample_logits(model, s, ctx));
                targets.push_back(s.label);
            }
            logits = concat_rows(rows);
            loss = cross_entropy(logits, targets);
            loss_value = loss.item();
        } catch (const NumericError&) {
            // diverged parameters can trip a NaN check inside the forward pass
            loss_value = std::nan("");
        }
        if (!std::isfinite(loss_value)) {
            emit(step, "train", "nan_abort", loss_value);
            throw TrainingAborted("train: non-finite loss at step " + std::to_string(step), step);
        }
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            const auto row = logits.data().subspan(b * logits.cols(), logits.cols());
            const int pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
            window_correct += pred == targets[b] ? 1 : 0;
        }
        window_count += cfg.batch_size;
        window_loss += loss_value;
        ++window_steps;

        backward(loss);

        if (cfg.grad_clip > 0) {
            double sq = 0;
            for (const auto& p : params.all())
                for (T g : p.tensor.grad()) sq += static_cast<double>(g) * g;
            const double norm = std::sqrt(sq);
            if (norm > cfg.grad_clip) {
                const T factor = static_cast<T>(cfg.grad_clip / norm);
                for (auto& p : params.all())
                    for (T& g : p.tensor.mutable_grad()) g *= factor;
            }
        }

        if (cfg.snapshot_every > 0 && step % cfg.snapshot_every == 0 && model.memory().defined()) {
            const auto& mem = model.memory();
            MemorySnapshot value{step, 0, SnapshotTag::value, mem.rows(), mem.cols(),
                                 std::vector<double>(mem.data().begin(), mem.data().end())};
            MemorySnapshot gradient{step, 0, SnapshotTag::gradient, mem.rows(), mem.cols(),
                                    std::vector<double>(mem.grad().begin(), mem.grad().end())};
            if (run_dir) write_snapshot_file(result.artifacts->snapshots_dir / detail::step_file(step), value, gradient);
            result.snapshots.push_back(std::move(value));
            result.snapshots.push_back(std::move(gradient));
        }

        const double lr = lr_at(step, cfg);
        adamw_step(params, opt, lr, cfg);

        if (step % cfg.eval_every == 0 || step == cfg.total_steps) {
            emit(step, "train", "loss", window_loss / static_cast<double>(window_steps));
            emit(step, "train", "accuracy", static_cast<double>(window_correct) / static_cast<double>(window_count));
            emit(step, "train", "lr", lr);
            for (const auto& [name, tau] : model.taus()) emit(step, "train", "tau/" + name, tau.item());
            window_loss = 0;
            window_correct = window_count = window_steps = 0;
            if (!data.val.empty()) {
                double acc = 0;
                std::optional<double> entropy;
                try {
                    acc = evaluate_accuracy(model, data.val);
                    entropy = packing_entropy(model, data.val, cfg.entropy_samples);
                } catch (const NumericError& e) {
                    emit(step, "val", "nan_abort", std::nan(""));
                    throw TrainingAborted(std::string("train: evaluation diverged at step ") + std::to_string(step) + ": " +
                                              e.what(),
                                          step);
                }
                emit(step, "val", "accuracy", acc);
                if (entropy) emit(step, "val", "pack_entropy", *entropy);
                emit(step, "val", "forward_flops", static_cast<double>(forward_flops(model, data.val.front())));
                result.final_val_accuracy = acc;
                if (!result.best_val_accuracy || acc > *result.best_val_accuracy) {
                    result.best_val_accuracy = acc;
                    result.best_step = step;
                    result.best_checkpoint = checkpoint_from(params, checkpoint_meta(step));
                }
            }
        }
    }

    result.final_checkpoint = checkpoint_from(params, checkpoint_meta(cfg.total_steps));
    if (!result.best_val_accuracy) result.best_checkpoint = result.final_checkpoint;
    if (run_dir) {
        write_checkpoint(result.artifacts->final_checkpoint, result.final_checkpoint);
        write_checkpoint(result.artifacts->best_checkpoint, result.best_checkpoint);
        nlohmann::json summary;
        summary["steps"] = cfg.total_steps;
        summary["seed"] = cfg.seed;
        summary["final_val_accuracy"] = result.final_val_accuracy ? nlohmann::json(*result.final_val_accuracy) : nlohmann::json(nullptr);
        summary["best_val_accuracy"] = result.best_val_accuracy ? nlohmann::json(*result.best_val_accuracy) : nlohmann::json(nullptr);
        summary["best_step"] = result.best_step;
        summary["parameter_count"] = params.count();
        std::ofstream(result.artifacts->report) << summary.dump(2) << '\n';
    }
    return result;
}

} // namespace lunalab
