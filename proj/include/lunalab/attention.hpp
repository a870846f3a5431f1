#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "lunalab/ops.hpp"

namespace lunalab {

enum class TemperatureMode {
    fixed_sqrt,         // logits / sqrt(d_h)
    learnable_exp_tau,  // logits / exp(tau), tau a trained scalar starting at 0
};

enum class ValueProjection { learned, identity };

struct AttentionSpec {
    std::size_t d = 0;
    std::size_t h = 1;
    TemperatureMode temperature = TemperatureMode::fixed_sqrt;
    ValueProjection value = ValueProjection::learned;
    // Name of the attention layer whose projections this one reuses, if any.
    std::optional<std::string> share_kv_projection_with;

    AttentionSpec() = default;
    AttentionSpec(std::size_t d_, std::size_t h_, TemperatureMode t = TemperatureMode::fixed_sqrt,
                  ValueProjection v = ValueProjection::learned)
        : d(d_), h(h_), temperature(t), value(v) {}

    std::size_t head_dim() const { return d / h; }

    void validate() const {
        if (d == 0 || h == 0) throw ConfigError("attention: d and h must be positive");
        if (d % h != 0) {
            throw ConfigError("attention: width d=" + std::to_string(d) + " is not divisible by h=" + std::to_string(h));
        }
    }
};

enum class FilterKind { identity, conv, maxpool };

struct FilterSpec {
    FilterKind kind = FilterKind::identity;
    std::size_t kernel = 1;
    std::size_t stride = 1;

    void validate() const {
        if (kernel < 1 || stride < 1) {
            throw ConfigError("filter: kernel and stride must be >= 1 (got K=" + std::to_string(kernel) +
                              ", S=" + std::to_string(stride) + ")");
        }
    }

    bool operator==(const FilterSpec&) const = default;

    std::size_t output_length(std::size_t len) const {
        return kind == FilterKind::identity ? len : (len + stride - 1) / stride;
    }
};

// Projection matrices, [d x d] each. An undefined wv means identity values.
template <typename T>
struct AttentionWeights {
    Tensor<T> wq;
    Tensor<T> wk;
    Tensor<T> wv;
    Tensor<T> wo;
};

// Depthwise kernels [K x d] and biases [d], independent for keys and values.
template <typename T>
struct FilterWeights {
    Tensor<T> key_kernel;
    Tensor<T> key_bias;
    Tensor<T> value_kernel;
    Tensor<T> value_bias;
};

// Score matrices of one attention call, one [L_q x L_k] matrix per head.
template <typename T>
struct AttentionTrace {
    std::vector<Tensor<T>> head_scores;
};

// Shapes of every attention score matrix built while active.
class ScoreProbe {
public:
    class Activate {
    public:
        explicit Activate(ScoreProbe& probe) : previous_(current()) { current() = &probe; }
        ~Activate() { current() = previous_; }
        Activate(const Activate&) = delete;
        Activate& operator=(const Activate&) = delete;

    private:
        ScoreProbe* previous_;
    };

    void record(std::size_t rows, std::size_t cols) { shapes_.push_back({rows, cols}); }
    const std::vector<Shape>& shapes() const { return shapes_; }

    std::size_t largest() const {
        std::size_t best = 0;
        for (const auto& s : shapes_) best = std::max(best, s[0] * s[1]);
        return best;
    }

    static ScoreProbe*& current() {
        thread_local ScoreProbe* active = nullptr;
        return active;
    }

private:
    std::vector<Shape> shapes_;
};

// log(sqrt(d_h)) as a constant scalar. The fixed divisor goes through the
// same exp() path as the learned one, so tau = log(sqrt(d_h)) reproduces it exactly.
template <typename T>
Tensor<T> fixed_log_temperature(std::size_t head_dim) {
    return Tensor<T>::scalar(std::log(std::sqrt(static_cast<T>(head_dim))));
}

// A key position survives filtering if its window covers any valid input.
inline std::vector<bool> filter_mask(const std::vector<bool>& mask, const FilterSpec& spec) {
    if (spec.kind == FilterKind::identity) return mask;
    const auto geo = detail::window_geometry(mask.size(), spec.kernel, spec.stride);
    std::vector<bool> out(geo.out_len, false);
    for (std::size_t t = 0; t < geo.out_len; ++t) {
        const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(t * spec.stride) - geo.left_pad;
        for (std::size_t k = 0; k < spec.kernel; ++k) {
            const std::ptrdiff_t pos = start + static_cast<std::ptrdiff_t>(k);
            if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(mask.size()) && mask[static_cast<std::size_t>(pos)]) {
                out[t] = true;
                break;
            }
        }
    }
    return out;
}

// Length-wise filter on x[L x d] -> [L' x d].
template <typename T>
Tensor<T> filter_op(const Tensor<T>& x, const FilterSpec& spec, const Tensor<T>& kernel = {},
                    const Tensor<T>& bias = {}) {
    spec.validate();
    switch (spec.kind) {
    case FilterKind::identity:
        return x;
    case FilterKind::maxpool:
        return maxpool_length(x, spec.kernel, spec.stride);
    case FilterKind::conv:
        if (!kernel.defined() || !bias.defined()) throw ConfigError("filter_op: conv filter needs kernel and bias");
        if (kernel.rows() != spec.kernel) throw ConfigError("filter_op: conv kernel length does not match spec");
        return conv_length(x, kernel, bias, spec.stride);
    }
    throw ConfigError("filter_op: unknown filter kind");
}

namespace detail {

template <typename T>
void check_attention_inputs(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const AttentionSpec& spec) {
    spec.validate();
    require_matrix(q, "attention");
    require_matrix(k, "attention");
    require_matrix(v, "attention");
    if (q.cols() != spec.d || k.cols() != spec.d || v.cols() != spec.d) {
        throw ConfigError("attention: input widths " + shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                          shape_str(v.shape()) + " do not match d=" + std::to_string(spec.d));
    }
    if (k.rows() != v.rows()) throw ConfigError("attention: key and value lengths differ");
}

// Per-head softmax(q_h k_h^T / exp(log_temp)) v_h over projected inputs, heads
// concatenated and projected by wo.
template <typename T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& wo,
                 const AttentionSpec& spec, const Tensor<T>& log_temperature, const std::vector<bool>* key_mask,
                 AttentionTrace<T>* trace) {
    const std::size_t dh = spec.head_dim();
    std::vector<Tensor<T>> heads;
    heads.reserve(spec.h);
    for (std::size_t head = 0; head < spec.h; ++head) {
        Tensor<T> qh = spec.h == 1 ? q : slice_cols(q, head * dh, dh);
        Tensor<T> kh = spec.h == 1 ? k : slice_cols(k, head * dh, dh);
        Tensor<T> vh = spec.h == 1 ? v : slice_cols(v, head * dh, dh);
        Tensor<T> scores;
        {
            FlopScope scope("scores");
            scores = matmul_nt(qh, kh);
        }
        if (auto* probe = ScoreProbe::current()) probe->record(scores.rows(), scores.cols());
        Tensor<T> probs = softmax_rows(div_exp(scores, log_temperature), key_mask);
        if (trace) trace->head_scores.push_back(probs.detach());
        FlopScope scope("mix");
        heads.push_back(matmul(probs, vh));
    }
    Tensor<T> joined = spec.h == 1 ? heads.front() : concat_cols(heads);
    FlopScope scope("out_proj");
    return matmul(joined, wo);
}

template <typename T>
Tensor<T> project(const Tensor<T>& x, const Tensor<T>& w, const char* name) {
    if (!w.defined()) return x;
    FlopScope scope(name);
    return matmul(x, w);
}

} // namespace detail

// softmax(Q_h K_h^T / sqrt(d_h)) V_h per head, concatenated, times W^O.
// key_mask (length L_k) excludes keys from every query's softmax.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               const AttentionWeights<T>& w, const AttentionSpec& spec,
                               const std::vector<bool>* key_mask = nullptr, AttentionTrace<T>* trace = nullptr) {
    detail::check_attention_inputs(q, k, v, spec);
    if (key_mask && key_mask->size() != k.rows()) throw ConfigError("attention: key mask length mismatch");
    const Tensor<T> qp = detail::project(q, w.wq, "q_proj");
    const Tensor<T> kp = detail::project(k, w.wk, "k_proj");
    const Tensor<T> vp = detail::project(v, w.wv, "v_proj");
    return detail::attend(qp, kp, vp, w.wo, spec, fixed_log_temperature<T>(spec.head_dim()), key_mask, trace);
}

// Packing attention with filtered keys/values and divisor exp(tau):
//   softmax(Q_h FilterOp(K W^K)_h^T / exp(tau)) FilterOp(V W^V)_h
// tau is shared by all heads. An undefined tau falls back to the fixed sqrt(d_h) divisor.
template <typename T>
Tensor<T> rescaled_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                             const AttentionWeights<T>& w, const AttentionSpec& spec, const FilterSpec& filter,
                             const FilterWeights<T>& filter_weights, const Tensor<T>& tau,
                             const std::vector<bool>* key_mask = nullptr, AttentionTrace<T>* trace = nullptr) {
    detail::check_attention_inputs(q, k, v, spec);
    filter.validate();
    if (key_mask && key_mask->size() != k.rows()) throw ConfigError("attention: key mask length mismatch");
    if (tau.defined() && tau.numel() != 1) throw ConfigError("rescaled_attention: tau must be a scalar");

    Tensor<T> kp = detail::project(k, w.wk, "k_proj");
    Tensor<T> vp = detail::project(v, w.wv, "v_proj");
    std::vector<bool> filtered_mask;
    const std::vector<bool>* mask = key_mask;
    if (filter.kind != FilterKind::identity) {
        if (key_mask) {
            kp = mask_rows(kp, *key_mask);
            vp = mask_rows(vp, *key_mask);
            filtered_mask = filter_mask(*key_mask, filter);
            mask = &filtered_mask;
        }
        FlopScope scope("filter");
        kp = filter_op(kp, filter, filter_weights.key_kernel, filter_weights.key_bias);
        vp = filter_op(vp, filter, filter_weights.value_kernel, filter_weights.value_bias);
    }
    const Tensor<T> qp = detail::project(q, w.wq, "q_proj");
    const Tensor<T> log_temp = tau.defined() ? tau : fixed_log_temperature<T>(spec.head_dim());
    return detail::attend(qp, kp, vp, w.wo, spec, log_temp, mask, trace);
}

} // namespace lunalab
