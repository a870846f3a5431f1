#pragma once

// Memory-degradation metrics over captured memory matrices, attention
// entropy, and the Friedman / Holm comparison across memory sizes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/SVD>
#include <boost/math/special_functions/gamma.hpp>

#include "lunalab/errors.hpp"

namespace lunalab {

enum class SnapshotTag { value, gradient };

inline const char* snapshot_tag_name(SnapshotTag t) { return t == SnapshotTag::value ? "value" : "gradient"; }

// Memory matrix (or its gradient) captured at one training step.
struct MemorySnapshot {
    std::size_t step = 0;
    std::size_t block = 0;
    SnapshotTag tag = SnapshotTag::value;
    std::size_t rows = 0;  // M
    std::size_t cols = 0;  // d
    std::vector<double> matrix;

    double at(std::size_t r, std::size_t c) const { return matrix[r * cols + c]; }
};

struct DegradationReport {
    double mean_pairwise_cosine = 0.0;
    std::size_t numerical_rank = 0;
    std::size_t unique_vector_count = 0;
    bool degenerate = false;  // all-zero matrix; the other fields are 0
};

inline constexpr double kDefaultDegradationTol = 1e-3;

namespace detail {

inline std::vector<double> row_norms(const MemorySnapshot& s) {
    std::vector<double> norms(s.rows);
    for (std::size_t i = 0; i < s.rows; ++i) {
        double acc = 0;
        for (std::size_t j = 0; j < s.cols; ++j) acc += s.at(i, j) * s.at(i, j);
        norms[i] = std::sqrt(acc);
    }
    return norms;
}

// Cosine similarity matrix; a zero row has similarity 0 to every other row and 1 to itself.
inline std::vector<double> cosine_matrix(const MemorySnapshot& s) {
    const auto norms = row_norms(s);
    const std::size_t m = s.rows;
    std::vector<double> cos(m * m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        cos[i * m + i] = 1.0;
        for (std::size_t j = i + 1; j < m; ++j) {
            double dot = 0;
            for (std::size_t c = 0; c < s.cols; ++c) dot += s.at(i, c) * s.at(j, c);
            const double denom = norms[i] * norms[j];
            const double v = denom > 0 ? std::clamp(dot / denom, -1.0, 1.0) : 0.0;
            cos[i * m + j] = cos[j * m + i] = v;
        }
    }
    return cos;
}

// Complete-linkage agglomerative clustering; clusters merge while their
// largest pairwise cosine distance stays within tol.
inline std::size_t complete_linkage_clusters(const std::vector<double>& cos, std::size_t m, double tol) {
    std::vector<std::vector<std::size_t>> clusters(m);
    for (std::size_t i = 0; i < m; ++i) clusters[i] = {i};
    // linkage[a][b] = max distance between members
    std::vector<double> link(m * m, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j) link[i * m + j] = 1.0 - cos[i * m + j];
    std::vector<bool> alive(m, true);
    std::size_t count = m;
    while (count > 1) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t ba = 0, bb = 0;
        for (std::size_t a = 0; a < m; ++a) {
            if (!alive[a]) continue;
            for (std::size_t b = a + 1; b < m; ++b) {
                if (alive[b] && link[a * m + b] < best) {
                    best = link[a * m + b];
                    ba = a;
                    bb = b;
                }
            }
        }
        if (best > tol) break;
        alive[bb] = false;
        --count;
        for (std::size_t c = 0; c < m; ++c) {
            if (!alive[c] || c == ba) continue;
            const double merged = std::max(link[ba * m + c], link[bb * m + c]);
            link[ba * m + c] = link[c * m + ba] = merged;
        }
    }
    return count;
}

} // namespace detail

inline DegradationReport degradation_metrics(const MemorySnapshot& s, double tol = kDefaultDegradationTol) {
    if (s.rows < 1 || s.cols < 1 || s.matrix.size() != s.rows * s.cols) {
        throw InputError("degradation_metrics: snapshot matrix is empty or inconsistent");
    }
    DegradationReport report;
    if (std::all_of(s.matrix.begin(), s.matrix.end(), [](double v) { return v == 0.0; })) {
        report.degenerate = true;
        return report;
    }
    const std::size_t m = s.rows;
    const auto cos = detail::cosine_matrix(s);
    if (m == 1) {
        report.mean_pairwise_cosine = 1.0;
    } else {
        double total = 0;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = i + 1; j < m; ++j) total += cos[i * m + j];
        report.mean_pairwise_cosine = total / (static_cast<double>(m * (m - 1)) / 2.0);
    }

    Eigen::MatrixXd mat(static_cast<Eigen::Index>(s.rows), static_cast<Eigen::Index>(s.cols));
    for (std::size_t i = 0; i < s.rows; ++i)
        for (std::size_t j = 0; j < s.cols; ++j) mat(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = s.at(i, j);
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(mat);
    const auto& sv = svd.singularValues();
    const double sigma_max = sv.size() ? sv(0) : 0.0;
    for (Eigen::Index i = 0; i < sv.size(); ++i)
        if (sv(i) > tol * sigma_max) ++report.numerical_rank;

    report.unique_vector_count = detail::complete_linkage_clusters(cos, m, tol);
    return report;
}

// Mean over rows of normalized Shannon entropy -sum p ln p / ln(L_keys).
// `scores` is row-major [rows x keys].
inline double attention_entropy(const std::vector<double>& scores, std::size_t keys) {
    if (keys == 0 || scores.size() % keys != 0 || scores.empty()) throw InputError("attention_entropy: bad score shape");
    const std::size_t rows = scores.size() / keys;
    double total = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        double row_sum = 0, h = 0;
        for (std::size_t k = 0; k < keys; ++k) {
            const double p = scores[r * keys + k];
            if (p < 0) throw InputError("attention_entropy: negative probability");
            row_sum += p;
            if (p > 0) h -= p * std::log(p);
        }
        if (std::abs(row_sum - 1.0) > 1e-6) {
            throw InputError("attention_entropy: row " + std::to_string(r) + " sums to " + std::to_string(row_sum));
        }
        if (keys > 1) total += h / std::log(static_cast<double>(keys));
    }
    return total / static_cast<double>(rows);
}

// ---------------------------------------------------------------------------
// Friedman test over an n_blocks x k_treatments score matrix.

struct FriedmanResult {
    double chi2 = 0.0;
    double p_value = 1.0;
    std::vector<double> rank_sums;
};

// Ascending ranks within one block; ties share their mean rank.
inline std::vector<double> average_ranks(const std::vector<double>& values) {
    const std::size_t k = values.size();
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(k);
    std::size_t i = 0;
    while (i < k) {
        std::size_t j = i;
        while (j + 1 < k && values[order[j + 1]] == values[order[i]]) ++j;
        const double mean_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = mean_rank;
        i = j + 1;
    }
    return ranks;
}

namespace detail {

inline void check_score_matrix(const std::vector<std::vector<double>>& scores) {
    if (scores.size() < 2) throw InputError("friedman_test: need at least 2 blocks");
    const std::size_t k = scores.front().size();
    if (k < 2) throw InputError("friedman_test: need at least 2 treatments");
    for (const auto& row : scores) {
        if (row.size() != k) throw InputError("friedman_test: ragged score matrix");
    }
}

inline double friedman_statistic(const std::vector<std::vector<double>>& ranks) {
    const double n = static_cast<double>(ranks.size());
    const std::size_t k = ranks.front().size();
    double sum_sq = 0;
    for (std::size_t j = 0; j < k; ++j) {
        double r = 0;
        for (const auto& row : ranks) r += row[j];
        sum_sq += r * r;
    }
    const double kd = static_cast<double>(k);
    return 12.0 / (n * kd * (kd + 1.0)) * sum_sq - 3.0 * n * (kd + 1.0);
}

} // namespace detail

// chi2_F = 12 / (n k (k+1)) * sum_j R_j^2 - 3 n (k+1); p from chi-square(k-1).
inline FriedmanResult friedman_test(const std::vector<std::vector<double>>& scores) {
    detail::check_score_matrix(scores);
    const std::size_t k = scores.front().size();
    std::vector<std::vector<double>> ranks;
    for (const auto& row : scores) ranks.push_back(average_ranks(row));
    FriedmanResult r;
    r.rank_sums.assign(k, 0.0);
    for (const auto& row : ranks)
        for (std::size_t j = 0; j < k; ++j) r.rank_sums[j] += row[j];
    // clamp tiny negative round-off from fully tied designs
    r.chi2 = std::max(0.0, detail::friedman_statistic(ranks));
    r.p_value = r.chi2 <= 0.0 ? 1.0 : boost::math::gamma_q(static_cast<double>(k - 1) / 2.0, r.chi2 / 2.0);
    return r;
}

// Exact permutation p-value: fraction of within-block rank permutations whose
// statistic reaches the observed one. Enumerates (k!)^n arrangements.
inline double friedman_exact_p(const std::vector<std::vector<double>>& scores) {
    detail::check_score_matrix(scores);
    const std::size_t n = scores.size();
    const std::size_t k = scores.front().size();
    std::vector<std::vector<double>> ranks;
    for (const auto& row : scores) ranks.push_back(average_ranks(row));
    double total_arrangements = 1;
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t f = 2; f <= k; ++f) total_arrangements *= static_cast<double>(f);
    if (total_arrangements > 5e7) throw UsageError("friedman_exact_p: too many arrangements to enumerate");

    const double observed = detail::friedman_statistic(ranks);
    std::vector<std::vector<std::vector<double>>> perms(n);
    for (std::size_t b = 0; b < n; ++b) {
        auto row = ranks[b];
        std::sort(row.begin(), row.end());
        do perms[b].push_back(row);
        while (std::next_permutation(row.begin(), row.end()));
    }
    // Permutations of tied ranks repeat identically; weight each distinct
    // arrangement by k!/|distinct| so every labelling counts once.
    std::vector<double> weight(n);
    double fact_k = 1;
    for (std::size_t f = 2; f <= k; ++f) fact_k *= static_cast<double>(f);
    for (std::size_t b = 0; b < n; ++b) weight[b] = fact_k / static_cast<double>(perms[b].size());

    std::vector<std::size_t> idx(n, 0);
    std::vector<std::vector<double>> current(n);
    double hits = 0, total = 0;
    for (;;) {
        double w = 1;
        for (std::size_t b = 0; b < n; ++b) {
            current[b] = perms[b][idx[b]];
            w *= weight[b];
        }
        total += w;
        if (detail::friedman_statistic(current) >= observed - 1e-9) hits += w;
        std::size_t b = 0;
        while (b < n && ++idx[b] == perms[b].size()) idx[b++] = 0;
        if (b == n) break;
    }
    return hits / total;
}

// Holm step-down adjustment; results are returned in input order.
inline std::vector<double> holm_adjust(const std::vector<double>& p) {
    for (double v : p) {
        if (!(v >= 0.0 && v <= 1.0)) throw InputError("holm_adjust: p-values must lie in [0, 1]");
    }
    const std::size_t m = p.size();
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
    std::vector<double> adjusted(m);
    double running = 0;
    for (std::size_t i = 0; i < m; ++i) {
        const double candidate = static_cast<double>(m - i) * p[order[i]];
        running = std::max(running, candidate);
        adjusted[order[i]] = std::min(1.0, running);
    }
    return adjusted;
}

struct SignificanceReport {
    std::vector<std::string> hypotheses;             // one Friedman test per hypothesis
    std::vector<std::vector<std::string>> treatments;
    std::vector<std::size_t> blocks;
    std::vector<double> friedman_chi2;
    std::vector<double> raw_p;
    std::vector<double> holm_p;
};

} // namespace lunalab
