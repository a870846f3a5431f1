#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "lunalab/tensor.hpp"

namespace lunalab::testing {

inline Tensor<double> random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, bool grad = false,
                                    double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    std::vector<double> v(rows * cols);
    for (auto& x : v) x = dist(rng);
    return Tensor<double>::matrix(rows, cols, std::move(v), grad);
}

inline Tensor<double> random_vector(std::mt19937_64& rng, std::size_t n, bool grad = false, double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    std::vector<double> v(n);
    for (auto& x : v) x = dist(rng);
    return Tensor<double>({n}, std::move(v), grad);
}

struct GradCheck {
    std::string worst_name;
    double worst_rel = 0.0;
    std::size_t checked = 0;
};

// Central differences against backward() for every element of `inputs`.
// Relative error per element: |a - n| / max(|a|, |n|, floor).
inline GradCheck check_gradients(const std::function<Tensor<double>()>& loss_fn,
                                 std::vector<std::pair<std::string, Tensor<double>>> inputs, double step = 1e-5,
                                 double floor = 1e-6) {
    for (auto& [name, t] : inputs) t.zero_grad();
    const Tensor<double> loss = loss_fn();
    backward(loss);
    GradCheck report;
    for (auto& [name, t] : inputs) {
        const std::vector<double> analytic = t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                                          : std::vector<double>(t.numel(), 0.0);
        auto values = t.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double original = values[i];
            double plus, minus;
            {
                NoGradGuard guard;
                values[i] = original + step;
                plus = loss_fn().item();
                values[i] = original - step;
                minus = loss_fn().item();
                values[i] = original;
            }
            const double numeric = (plus - minus) / (2 * step);
            const double rel = std::abs(analytic[i] - numeric) / std::max({std::abs(analytic[i]), std::abs(numeric), floor});
            ++report.checked;
            if (rel > report.worst_rel) {
                report.worst_rel = rel;
                report.worst_name = name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return report;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

} // namespace lunalab::testing
