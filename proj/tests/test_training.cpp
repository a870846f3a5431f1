#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>

#include "lunalab/training.hpp"
#include "support.hpp"

using namespace lunalab;
namespace fs = std::filesystem;
using lunalab::testing::check_gradients;
using lunalab::testing::random_matrix;

namespace {

fs::path scratch_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("lunalab_training_" + name);
    fs::remove_all(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ModelConfig tiny_model() {
    ModelConfig c;
    c.arch = Arch::convluna;
    c.blocks = 1;
    c.d = 8;
    c.h = 2;
    c.mlp_dim = 16;
    c.memory_size = 4;
    c.vocab_size = 16;
    c.max_len = 16;
    c.num_classes = 2;
    return c;
}

TaskData tiny_task() {
    TaskSpec t;
    t.kind = TaskKind::marker;
    t.min_len = 8;
    t.max_len = 16;
    t.vocab_size = 16;
    t.n_train = 64;
    t.n_val = 16;
    return generate_task(t);
}

TrainConfig tiny_train(std::size_t steps = 12) {
    TrainConfig c;
    c.total_steps = steps;
    c.warmup_steps = std::min<std::size_t>(4, steps);
    c.batch_size = 4;
    c.eval_every = 4;
    c.snapshot_every = 5;
    c.seed = 3;
    return c;
}

} // namespace

TEST(Schedule, WarmupThenInverseSqrt) {
    TrainConfig c;
    c.base_lr = 0.01;
    c.warmup_steps = 700;
    const double w = 700.0;
    EXPECT_NEAR(lr_at(1, c), 0.01 * (1.0 / w) / std::sqrt(w), 1e-15);
    EXPECT_NEAR(lr_at(350, c), 0.01 * 0.5 / std::sqrt(w), 1e-15);
    EXPECT_NEAR(lr_at(700, c), 0.01 / std::sqrt(w), 1e-15);
    EXPECT_NEAR(lr_at(700, c), 3.7796e-4, 1e-8);
    EXPECT_NEAR(lr_at(10000, c), 0.01 / 100.0, 1e-15);
    EXPECT_THROW(lr_at(0, c), UsageError);
}

TEST(Schedule, PeakAtEndOfWarmup) {
    TrainConfig c;
    c.base_lr = 0.02;
    c.warmup_steps = 50;
    double prev = 0;
    for (std::size_t s = 1; s <= 50; ++s) {
        EXPECT_GT(lr_at(s, c), prev);
        prev = lr_at(s, c);
    }
    for (std::size_t s = 51; s <= 200; ++s) {
        EXPECT_LT(lr_at(s, c), prev);
        prev = lr_at(s, c);
    }
    c.warmup_steps = 0;
    EXPECT_NEAR(lr_at(4, c), 0.01, 1e-15);
}

// Hand-coded AdamW over plain vectors.
TEST(AdamW, MatchesReferenceUpdateWithDecayExclusions) {
    ParameterStore<double> store;
    auto w = store.add("w", {2, 2}, Init::zeros, true);
    auto b = store.add("b", {2}, Init::zeros, false);
    const std::vector<double> w0{0.5, -1.0, 2.0, 0.25}, b0{1.0, -2.0};
    std::copy(w0.begin(), w0.end(), w.mutable_data().begin());
    std::copy(b0.begin(), b0.end(), b.mutable_data().begin());
    TrainConfig cfg;
    cfg.weight_decay = 0.1;
    OptimizerState<double> state;

    std::vector<double> rw = w0, rb = b0, mw(4, 0), vw(4, 0), mb(2, 0), vb(2, 0);
    std::mt19937_64 rng(5);
    std::normal_distribution<double> dist;
    for (int t = 1; t <= 4; ++t) {
        std::vector<double> gw(4), gb(2);
        for (auto& g : gw) g = dist(rng);
        for (auto& g : gb) g = dist(rng);
        std::copy(gw.begin(), gw.end(), w.mutable_grad().begin());
        std::copy(gb.begin(), gb.end(), b.mutable_grad().begin());
        const double lr = 0.01 * t;
        adamw_step(store, state, lr, cfg);

        auto ref_step = [&](std::vector<double>& theta, std::vector<double>& m, std::vector<double>& v,
                            const std::vector<double>& g, double decay) {
            for (std::size_t i = 0; i < theta.size(); ++i) {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
                theta[i] -= lr * (mh / (std::sqrt(vh) + 1e-8) + decay * theta[i]);
            }
        };
        ref_step(rw, mw, vw, gw, 0.1);
        ref_step(rb, mb, vb, gb, 0.0);
        for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(w.data()[i], rw[i], 1e-15);
        for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(b.data()[i], rb[i], 1e-15);
    }
}

TEST(AdamW, ModelDecayFlags) {
    Model<double> model(tiny_model());
    for (const auto& p : model.params().all()) {
        const bool excluded = p.name.ends_with(".gamma") || p.name.ends_with(".beta") || p.name.find("bias") != std::string::npos ||
                              p.name.ends_with(".b1") || p.name.ends_with(".b2") || p.name.ends_with(".tau");
        EXPECT_EQ(p.decay, !excluded) << p.name;
    }
}

TEST(AdamW, MissingGradientIsUsageError) {
    ParameterStore<double> store;
    store.add("w", {2}, Init::zeros);
    store.all()[0].tensor = Tensor<double>::zeros({2});
    OptimizerState<double> state;
    EXPECT_THROW(adamw_step(store, state, 0.1, TrainConfig{}), UsageError);
}

TEST(CrossEntropy, MatchesLogSumExpOracle) {
    const auto logits = Tensor<double>::matrix(2, 3, {1.0, 2.0, 3.0, -1.0, 0.0, 5.0});
    const std::vector<int> targets{0, 2};
    double expected = 0;
    for (int i = 0; i < 2; ++i) {
        double z = 0;
        for (int j = 0; j < 3; ++j) z += std::exp(logits.at(i, j));
        expected += std::log(z) - logits.at(i, targets[i]);
    }
    EXPECT_NEAR(cross_entropy(logits, targets).item(), expected / 2, 1e-14);
    // uniform logits give ln C
    EXPECT_NEAR(cross_entropy(Tensor<double>::zeros({1, 4}), {3}).item(), std::log(4.0), 1e-15);
}

TEST(CrossEntropy, GradientAndErrors) {
    std::mt19937_64 rng(8);
    auto logits = random_matrix(rng, 3, 4, true, 2.0);
    const std::vector<int> targets{1, 0, 3};
    const auto report = check_gradients([&] { return cross_entropy(logits, targets); }, {{"logits", logits}});
    EXPECT_LE(report.worst_rel, 1e-6) << report.worst_name;
    EXPECT_THROW(cross_entropy(Tensor<double>::zeros({2, 3}), {0}), InputError);
    EXPECT_THROW(cross_entropy(Tensor<double>::zeros({1, 3}), {3}), InputError);
}

TEST(Train, ZeroStepsWritesEmptyLogAndArtifacts) {
    const auto dir = scratch_dir("zero");
    auto model = assemble_model<double>(tiny_model(), 1);
    const auto result = train(*model, tiny_task(), tiny_train(0), dir);
    EXPECT_TRUE(result.metrics.empty());
    EXPECT_TRUE(fs::exists(dir / "metrics.jsonl"));
    EXPECT_EQ(fs::file_size(dir / "metrics.jsonl"), 0u);
    EXPECT_TRUE(fs::exists(dir / "checkpoints" / "final.ckpt"));
    EXPECT_TRUE(fs::exists(dir / "checkpoints" / "best.ckpt"));
    EXPECT_TRUE(fs::exists(dir / "report" / "summary.json"));
    EXPECT_FALSE(result.final_val_accuracy.has_value());
}

TEST(Train, LogsExpectedRecords) {
    const auto dir = scratch_dir("records");
    auto model = assemble_model<double>(tiny_model(), 1);
    const auto result = train(*model, tiny_task(), tiny_train(), dir);
    const auto log = read_metric_log(dir / "metrics.jsonl");
    ASSERT_EQ(log.size(), result.metrics.size());
    std::size_t val_acc = 0;
    for (std::size_t i = 0; i < log.size(); ++i) {
        EXPECT_EQ(log[i].step, result.metrics[i].step);
        EXPECT_EQ(log[i].metric, result.metrics[i].metric);
        EXPECT_EQ(log[i].value, result.metrics[i].value);
        EXPECT_EQ(log[i].wall_time, 0.0);
        if (log[i].split == "val" && log[i].metric == "accuracy") ++val_acc;
    }
    EXPECT_EQ(val_acc, 3u);  // steps 4, 8, 12
    const bool has_tau = std::any_of(log.begin(), log.end(), [](const auto& r) { return r.metric.starts_with("tau/"); });
    EXPECT_TRUE(has_tau);
    ASSERT_TRUE(result.final_val_accuracy.has_value());
    EXPECT_GE(*result.best_val_accuracy, *result.final_val_accuracy);
}

TEST(Train, SnapshotsCaptureMemoryAndGradient) {
    const auto dir = scratch_dir("snapshots");
    auto model = assemble_model<double>(tiny_model(), 1);
    const auto result = train(*model, tiny_task(), tiny_train(), dir);
    ASSERT_EQ(result.snapshots.size(), 4u);  // steps 5 and 10, value and gradient
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir / "snapshots")) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    ASSERT_EQ(files.size(), 2u);
    const auto read = read_snapshot_file(files[0]);
    ASSERT_EQ(read.size(), 2u);
    EXPECT_EQ(read[0].step, 5u);
    EXPECT_EQ(read[0].tag, SnapshotTag::value);
    EXPECT_EQ(read[1].tag, SnapshotTag::gradient);
    EXPECT_EQ(read[0].rows, 4u);
    EXPECT_EQ(read[0].cols, 8u);
    EXPECT_EQ(read[0].matrix, result.snapshots[0].matrix);
    EXPECT_EQ(read[1].matrix, result.snapshots[1].matrix);
    const bool nonzero_grad = std::any_of(read[1].matrix.begin(), read[1].matrix.end(), [](double g) { return g != 0; });
    EXPECT_TRUE(nonzero_grad);
}

TEST(Train, SameSeedIsBitIdentical) {
    const auto a = scratch_dir("det_a"), b = scratch_dir("det_b");
    for (const auto& dir : {a, b}) {
        auto model = assemble_model<double>(tiny_model(), 7);
        train(*model, tiny_task(), tiny_train(), dir);
    }
    EXPECT_EQ(slurp(a / "metrics.jsonl"), slurp(b / "metrics.jsonl"));
    EXPECT_EQ(slurp(a / "checkpoints" / "final.ckpt"), slurp(b / "checkpoints" / "final.ckpt"));

    const auto c = scratch_dir("det_c");
    auto model = assemble_model<double>(tiny_model(), 7);
    auto cfg = tiny_train();
    cfg.seed = 4;
    train(*model, tiny_task(), cfg, c);
    EXPECT_NE(slurp(a / "checkpoints" / "final.ckpt"), slurp(c / "checkpoints" / "final.ckpt"));
}

TEST(Train, FinalCheckpointReloads) {
    const auto dir = scratch_dir("reload");
    auto model = assemble_model<double>(tiny_model(), 2);
    const auto data = tiny_task();
    const auto result = train(*model, data, tiny_train(), dir);
    auto fresh = assemble_model<double>(tiny_model(), 99);
    load_parameters(fresh->params(), read_checkpoint(dir / "checkpoints" / "final.ckpt"));
    EXPECT_EQ(evaluate_accuracy(*fresh, data.val), *result.final_val_accuracy);
}

TEST(Train, NonFiniteLossAbortsKeepingLog) {
    const auto dir = scratch_dir("nan");
    auto model = assemble_model<double>(tiny_model(), 1);
    auto cfg = tiny_train(50);
    cfg.base_lr = 1e300;
    cfg.warmup_steps = 0;
    cfg.eval_every = 1;
    try {
        train(*model, tiny_task(), cfg, dir);
        FAIL() << "expected TrainingAborted";
    } catch (const TrainingAborted& e) {
        const auto log = read_metric_log(dir / "metrics.jsonl");
        ASSERT_FALSE(log.empty());
        EXPECT_EQ(log.back().metric, "nan_abort");
        EXPECT_EQ(log.back().step, e.step());
        EXPECT_TRUE(std::isnan(log.back().value) || std::isinf(log.back().value));
    }
}

TEST(Train, InvalidConfigs) {
    auto model = assemble_model<double>(tiny_model(), 1);
    auto cfg = tiny_train();
    cfg.warmup_steps = 100;
    EXPECT_THROW(train(*model, tiny_task(), cfg), ConfigError);
    cfg = tiny_train();
    cfg.batch_size = 0;
    EXPECT_THROW(train(*model, tiny_task(), cfg), ConfigError);
    EXPECT_THROW(train(*model, TaskData{}, tiny_train()), InputError);
}

TEST(MetricLog, MalformedLineIsInputError) {
    const auto dir = scratch_dir("log");
    fs::create_directories(dir);
    std::ofstream(dir / "m.jsonl") << R"({"step":1,"split":"train","metric":"loss","value":0.5})" << "\n{oops\n";
    EXPECT_THROW(read_metric_log(dir / "m.jsonl"), InputError);
    EXPECT_THROW(read_metric_log(dir / "absent.jsonl"), InputError);
}
