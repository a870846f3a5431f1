// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fails.
// Optional arguments select criteria by number, e.g. `lunalab_acceptance 1 4 9`.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "lunalab/experiment.hpp"
#include "reference.hpp"
#include "support.hpp"

using namespace lunalab;
namespace ref = lunalab::reference;
using lunalab::testing::check_gradients;
using lunalab::testing::max_abs_diff;
using lunalab::testing::random_matrix;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* pattern, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), pattern, args...);
    return buf;
}

AttentionWeights<double> random_weights(std::mt19937_64& rng, std::size_t d) {
    return {random_matrix(rng, d, d, false, 0.5), random_matrix(rng, d, d, false, 0.5),
            random_matrix(rng, d, d, false, 0.5), random_matrix(rng, d, d, false, 0.5)};
}

Outcome oracle_equivalence() {
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<std::size_t> len(1, 9);
    const std::size_t heads[] = {1, 2, 4};
    double worst = 0;
    const auto t0 = std::chrono::steady_clock::now();
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t h = heads[trial % 3];
        const std::size_t d = h * (1 + trial % (8 / h));
        const std::size_t lq = len(rng), lk = len(rng);
        auto q = random_matrix(rng, lq, d), k = random_matrix(rng, lk, d), v = random_matrix(rng, lk, d);
        const auto w = random_weights(rng, d);
        const auto out = multi_head_attention(q, k, v, w, AttentionSpec{d, h});
        const auto expected = ref::multi_head(ref::of(q), ref::of(k), ref::of(v), ref::of(w.wq), ref::of(w.wk),
                                              ref::of(w.wv), ref::of(w.wo), h, std::sqrt(static_cast<double>(d / h)));
        worst = std::max(worst, max_abs_diff(out.data(), expected.v));
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {worst <= 1e-10 && secs < 10, fmt("max abs diff %.3g over 50 cases (tol 1e-10), %.2f s", worst, secs)};
}

Outcome reduction_identity() {
    std::mt19937_64 rng(2025);
    int identical = 0;
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t h = 1u << (trial % 3), d = h * (1 + trial % 2) * 2;
        const auto w = random_weights(rng, d);
        auto q = random_matrix(rng, 1 + trial % 5, d), k = random_matrix(rng, 2 + trial % 7, d);
        auto v = random_matrix(rng, k.rows(), d);
        const AttentionSpec spec{d, h};
        const auto tau = Tensor<double>::scalar(std::log(std::sqrt(static_cast<double>(spec.head_dim()))));
        const auto a = rescaled_attention(q, k, v, w, spec, FilterSpec{}, FilterWeights<double>{}, tau);
        const auto b = multi_head_attention(q, k, v, w, spec);
        identical += a.values() == b.values() ? 1 : 0;
    }
    return {identical == 10, fmt("%d/10 cases bit-identical", identical)};
}

Outcome gradient_audit() {
    const auto t0 = std::chrono::steady_clock::now();
    ParameterStore<double> s;
    ConvLunaOptions options;
    options.filter = FilterSpec{FilterKind::conv, 3, 1};
    ConvLunaBlock<double> block(s, "b", 8, 2, 16, options);
    std::mt19937_64 rng(2026);
    std::normal_distribution<double> dist(0.0, 0.4);
    for (auto& p : s.all()) {
        for (auto& v : p.tensor.mutable_data()) v = dist(rng) + (p.name.ends_with(".gamma") ? 1.0 : 0.0);
    }
    auto x = random_matrix(rng, 7, 8, true), p = random_matrix(rng, 3, 8, true);
    auto wx = random_matrix(rng, 7, 8), wp = random_matrix(rng, 3, 8);
    ForwardContext<double> ctx;
    auto loss = [&] {
        const auto out = block.forward({x, p}, ctx);
        return add(sum(mul(out.x, wx)), sum(mul(out.p, wp)));
    };
    std::vector<std::pair<std::string, Tensor<double>>> inputs;
    bool has_tau = false, has_kernel = false;
    for (const auto& param : s.all()) {
        inputs.emplace_back(param.name, param.tensor);
        has_tau = has_tau || param.name.ends_with("tau");
        has_kernel = has_kernel || param.name.find("kernel") != std::string::npos;
    }
    const auto r = check_gradients(loss, inputs, 1e-5, 1e-5);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {r.worst_rel <= 1e-4 && has_tau && has_kernel && secs < 60,
            fmt("%zu elements, worst rel err %.3g at %s (tol 1e-4), %.2f s", r.checked, r.worst_rel, r.worst_name.c_str(), secs)};
}

Outcome complexity() {
    const std::size_t lengths[] = {128, 256, 512, 1024};
    ModelConfig c;
    c.arch = Arch::convluna;
    c.blocks = 1;
    c.d = 16;
    c.h = 2;
    c.mlp_dim = 32;
    c.memory_size = 16;
    c.filter = FilterSpec{FilterKind::maxpool, 4, 1};
    c.max_len = 1024;
    const auto model = assemble_model<float>(c, 1);
    std::vector<double> flops;
    bool lxl = false;
    for (auto len : lengths) {
        FlopCounter counter;
        AllocationProbe probe;
        {
            FlopCounter::Activate a(counter);
            AllocationProbe::Activate b(probe);
            ForwardContext<float> ctx;
            model->logits(std::vector<int>(len, 1), {}, ctx);
        }
        flops.push_back(static_cast<double>(counter.total()));
        lxl = lxl || probe.saw_matrix(len, len);
    }
    // unequal spacing: second divided differences must vanish
    std::vector<double> slopes;
    for (int i = 0; i < 3; ++i) slopes.push_back((flops[i + 1] - flops[i]) / static_cast<double>(lengths[i + 1] - lengths[i]));
    const bool affine = slopes[0] == slopes[1] && slopes[1] == slopes[2];

    ModelConfig v = c;
    v.arch = Arch::vanilla;
    v.memory_size = 0;
    v.pooling = Pooling::token_mean;
    const auto vanilla = assemble_model<float>(v, 1);
    auto score_flops = [&](std::size_t len) {
        FlopCounter counter;
        FlopCounter::Activate a(counter);
        ForwardContext<float> ctx;
        vanilla->logits(std::vector<int>(len, 1), {}, ctx);
        return counter.total_matching("scores");
    };
    const auto s128 = score_flops(128), s1024 = score_flops(1024);
    const bool quadratic = s1024 == 64 * s128;
    return {affine && quadratic && !lxl,
            fmt("ConvLuna slopes %.0f/%.0f/%.0f flops per token, vanilla score ratio %.6g, LxL matrix %s", slopes[0],
                slopes[1], slopes[2], static_cast<double>(s1024) / static_cast<double>(s128), lxl ? "seen" : "absent")};
}

ModelConfig convluna16(std::size_t vocab, std::size_t max_len, std::size_t classes) {
    ModelConfig c;
    c.arch = Arch::convluna;
    c.blocks = 2;
    c.d = 32;
    c.h = 4;
    c.mlp_dim = 64;
    c.memory_size = 16;
    c.filter = FilterSpec{FilterKind::maxpool, 4, 1};
    c.vocab_size = vocab;
    c.max_len = max_len;
    c.num_classes = classes;
    return c;
}

Outcome marker_smoke() {
    TaskSpec t;
    t.kind = TaskKind::marker;
    t.min_len = t.max_len = 128;
    t.vocab_size = 32;
    t.n_train = 4096;
    t.n_val = 512;
    TrainConfig tc;
    tc.total_steps = 1000;
    tc.warmup_steps = 100;
    tc.batch_size = 32;
    tc.eval_every = 100;
    tc.entropy_samples = 0;
    const auto t0 = std::chrono::steady_clock::now();
    auto model = assemble_model<float>(convluna16(32, 128, 2), model_init_seed(0));
    const auto r = train(*model, generate_task(t), tc);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double acc = r.best_val_accuracy.value_or(0);
    return {acc >= 0.95, fmt("val accuracy %.4f at step %zu of %zu (need 0.95 within 2000), %.0f s", acc, r.best_step,
                             tc.total_steps, secs)};
}

Outcome listops_smoke() {
    TaskSpec t;
    t.kind = TaskKind::listops;
    t.min_len = 5;
    t.max_len = 64;
    t.min_depth = 1;
    t.max_depth = 3;
    t.vocab_size = 16;
    t.num_classes = 10;
    t.n_train = 20000;
    t.n_val = 1000;
    const TaskData data = generate_task(t);
    TrainConfig tc;
    tc.total_steps = 2000;
    tc.warmup_steps = 200;
    tc.base_lr = 0.05;
    tc.batch_size = 32;
    tc.eval_every = 250;
    tc.entropy_samples = 0;
    const auto t0 = std::chrono::steady_clock::now();
    double mean[2] = {0, 0};
    double primary = 0;
    std::size_t primary_step = 0;
    std::string per_seed;
    for (int arch = 0; arch < 2; ++arch) {
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
            ModelConfig c = convluna16(16, 64, 10);
            if (arch == 1) c.arch = Arch::luna;
            auto model = assemble_model<float>(c, model_init_seed(seed));
            tc.seed = seed;
            const auto r = train(*model, data, tc);
            const double acc = r.best_val_accuracy.value_or(0);
            mean[arch] += acc / 3;
            per_seed += fmt(" %s/s%llu=%.3f", arch == 0 ? "convluna" : "luna", static_cast<unsigned long long>(seed), acc);
            if (arch == 0 && seed == 0) {
                primary = acc;
                primary_step = r.best_step;
            }
        }
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {primary >= 0.50 && mean[0] >= mean[1],
            fmt("ConvLuna seed 0 val accuracy %.3f at step %zu (need 0.50 within 5000); 3-seed mean ConvLuna %.4f vs "
                "Luna %.4f;%s; %.0f s",
                primary, primary_step, mean[0], mean[1], per_seed.c_str(), secs)};
}

MemorySnapshot snapshot(std::size_t rows, std::size_t cols, std::vector<double> values) {
    MemorySnapshot s;
    s.rows = rows;
    s.cols = cols;
    s.matrix = std::move(values);
    return s;
}

Outcome diagnostics() {
    const auto same = degradation_metrics(snapshot(3, 2, {1, 2, 1, 2, 1, 2}));
    const auto basis = degradation_metrics(snapshot(4, 4, {3, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0.2, 0, 0, 0, 0, 9}));
    const auto mixed = degradation_metrics(snapshot(3, 2, {1, 0, 1, 0, 0, 1}));
    const double uniform = attention_entropy(std::vector<double>(40, 0.125), 8);
    const bool ok = std::abs(same.mean_pairwise_cosine - 1.0) <= 1e-9 && same.numerical_rank == 1 &&
                    std::abs(basis.mean_pairwise_cosine) <= 1e-9 && basis.numerical_rank == 4 &&
                    std::abs(mixed.mean_pairwise_cosine - 1.0 / 3.0) <= 1e-9 && std::abs(uniform - 1.0) <= 1e-12;
    return {ok, fmt("identical cos %.12g rank %zu; basis cos %.3g rank %zu/4; {e1,e1,e2} cos %.12g; uniform entropy %.15g",
                    same.mean_pairwise_cosine, same.numerical_rank, basis.mean_pairwise_cosine, basis.numerical_rank,
                    mixed.mean_pairwise_cosine, uniform)};
}

Outcome statistics() {
    const auto f = friedman_test({{1, 2, 3}, {1, 2, 3}, {1, 2, 3}});
    const auto holm = holm_adjust({0.01, 0.04, 0.03});
    const bool holm_ok = holm == std::vector<double>{0.03, 0.06, 0.06};
    std::mt19937_64 rng(2027);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    int invariant = 0;
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::vector<double>> s(3 + trial % 5, std::vector<double>(2 + trial % 4));
        for (auto& row : s)
            for (auto& x : row) x = std::round(u(rng) * 10) / 10;
        auto t = s;
        for (auto& row : t)
            for (auto& x : row) x = std::log1p(x) * 5 + std::pow(x, 3);
        const auto a = friedman_test(s), b = friedman_test(t);
        invariant += a.chi2 == b.chi2 && a.p_value == b.p_value ? 1 : 0;
    }
    const bool ok = std::abs(f.chi2 - 6.0) <= 1e-12 && std::abs(f.p_value - 0.049787) <= 1e-5 && holm_ok && invariant == 20;
    return {ok, fmt("chi2 %.12g p %.8f; holm [%.17g, %.17g, %.17g]; monotone invariance %d/20", f.chi2, f.p_value, holm[0],
                    holm[1], holm[2], invariant)};
}

Outcome schedule() {
    TrainConfig c;
    c.base_lr = 0.01;
    c.warmup_steps = 700;
    // independent evaluation of base * min(1, s/w) / sqrt(max(s, w))
    auto formula = [](double s) { return 0.01 * std::min(1.0, s / 700.0) / std::sqrt(std::max(s, 700.0)); };
    double worst = 0;
    for (std::size_t s : {1u, 350u, 700u, 10000u}) worst = std::max(worst, std::abs(lr_at(s, c) - formula(static_cast<double>(s))));
    const double peak = lr_at(700, c);
    return {worst <= 1e-12 && std::abs(peak - 3.7796e-4) <= 5e-9,
            fmt("max deviation %.3g (tol 1e-12); lr(700) = %.8g", worst, peak)};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome determinism() {
    const auto base = fs::temp_directory_path() / "lunalab_acceptance_determinism";
    fs::remove_all(base);
    ExperimentConfig e;
    e.run_name = "det";
    e.seeds = {5};
    e.model = convluna16(32, 64, 2);
    e.task.kind = TaskKind::marker;
    e.task.min_len = 32;
    e.task.max_len = 64;
    e.task.vocab_size = 32;
    e.task.n_train = 256;
    e.task.n_val = 64;
    e.train.total_steps = 60;
    e.train.warmup_steps = 10;
    e.train.eval_every = 20;
    e.train.snapshot_every = 20;
    cmd_run(e, base / "a");
    cmd_run(e, base / "b");
    const auto a = base / "a" / "det" / "seed5", b = base / "b" / "det" / "seed5";
    const bool logs = !slurp(a / "metrics.jsonl").empty() && slurp(a / "metrics.jsonl") == slurp(b / "metrics.jsonl");
    const bool ckpt = slurp(a / "checkpoints" / "final.ckpt") == slurp(b / "checkpoints" / "final.ckpt");
    fs::remove_all(base);
    return {logs && ckpt, fmt("metric logs %s, final checkpoints %s", logs ? "identical" : "DIFFER", ckpt ? "identical" : "DIFFER")};
}

} // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"oracle equivalence", oracle_equivalence}, {"reduction identity", reduction_identity},
        {"gradient audit", gradient_audit},         {"complexity", complexity},
        {"training smoke A (marker)", marker_smoke}, {"training smoke B (listops)", listops_smoke},
        {"diagnostics", diagnostics},               {"statistics", statistics},
        {"schedule", schedule},                     {"determinism", determinism},
    };
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int number = static_cast<int>(i + 1);
        if (!selected.empty() && !selected.count(number)) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += o.pass ? 0 : 1;
        std::printf("criterion %2d %-28s %s  %s\n", number, criteria[i].first, o.pass ? "PASS" : "FAIL", o.detail.c_str());
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
