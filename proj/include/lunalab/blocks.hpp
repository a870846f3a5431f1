#pragma once

// Encoder modules: pre-norm vanilla Transformer block, post-norm Luna block
// and the ConvLuna block whose packing attention filters keys/values and
// divides logits by a learned exp(tau).

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "lunalab/attention.hpp"
#include "lunalab/parameters.hpp"

namespace lunalab {

// Sequence activations X [L x d] and memory activations P [M x d].
template <typename T>
struct LunaState {
    Tensor<T> x;
    Tensor<T> p;
};

template <typename T>
struct ForwardContext {
    bool training = false;
    double dropout = 0.0;
    std::mt19937_64* rng = nullptr;
    const std::vector<bool>* mask = nullptr;  // valid sequence positions, null = all valid
    std::vector<AttentionTrace<T>>* pack_traces = nullptr;

    Tensor<T> drop(const Tensor<T>& t) const {
        if (!training || dropout <= 0.0) return t;
        if (!rng) throw UsageError("dropout in training mode needs a generator");
        return lunalab::dropout(t, dropout, *rng);
    }
};

template <typename T>
struct LayerNormParams {
    Tensor<T> gamma;
    Tensor<T> beta;

    static LayerNormParams make(ParameterStore<T>& store, const std::string& prefix, std::size_t d) {
        return {store.add(prefix + ".gamma", {d}, Init::ones, false),
                store.add(prefix + ".beta", {d}, Init::zeros, false)};
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }
};

template <typename T>
struct FeedForward {
    Tensor<T> w1, b1, w2, b2;

    static FeedForward make(ParameterStore<T>& store, const std::string& prefix, std::size_t d, std::size_t hidden) {
        FeedForward f;
        f.w1 = store.add(prefix + ".w1", {d, hidden}, Init::glorot_uniform, true, d, hidden);
        f.b1 = store.add(prefix + ".b1", {hidden}, Init::zeros, false);
        f.w2 = store.add(prefix + ".w2", {hidden, d}, Init::glorot_uniform, true, hidden, d);
        f.b2 = store.add(prefix + ".b2", {d}, Init::zeros, false);
        return f;
    }

    Tensor<T> operator()(const Tensor<T>& x, const ForwardContext<T>& ctx) const {
        FlopScope scope("ffn");
        Tensor<T> hidden = ctx.drop(gelu(add_row(matmul(x, w1), b1)));
        return add_row(matmul(hidden, w2), b2);
    }
};

template <typename T>
AttentionWeights<T> make_attention_weights(ParameterStore<T>& store, const std::string& prefix, std::size_t d,
                                           bool learned_value = true) {
    AttentionWeights<T> w;
    w.wq = store.add(prefix + ".wq", {d, d}, Init::glorot_uniform, true, d, d);
    w.wk = store.add(prefix + ".wk", {d, d}, Init::glorot_uniform, true, d, d);
    if (learned_value) w.wv = store.add(prefix + ".wv", {d, d}, Init::glorot_uniform, true, d, d);
    w.wo = store.add(prefix + ".wo", {d, d}, Init::glorot_uniform, true, d, d);
    return w;
}

template <typename T>
class EncoderBlock {
public:
    virtual ~EncoderBlock() = default;
    virtual LunaState<T> forward(const LunaState<T>& state, ForwardContext<T>& ctx) const = 0;
};

// X_norm = LN(X); I = X + MHA(X_norm, X_norm, X_norm); X' = I + FFN(LN(I)).
template <typename T>
class VanillaBlock : public EncoderBlock<T> {
public:
    VanillaBlock(ParameterStore<T>& store, const std::string& prefix, std::size_t d, std::size_t h, std::size_t mlp_dim)
        : spec_{d, h} {
        spec_.validate();
        ln1_ = LayerNormParams<T>::make(store, prefix + ".ln1", d);
        attn_ = make_attention_weights(store, prefix + ".attn", d);
        ln2_ = LayerNormParams<T>::make(store, prefix + ".ln2", d);
        ffn_ = FeedForward<T>::make(store, prefix + ".ffn", d, mlp_dim);
    }

    LunaState<T> forward(const LunaState<T>& state, ForwardContext<T>& ctx) const override {
        const Tensor<T> x_norm = ln1_(state.x);
        Tensor<T> attended;
        {
            FlopScope scope("attn");
            attended = multi_head_attention(x_norm, x_norm, x_norm, attn_, spec_, ctx.mask);
        }
        const Tensor<T> inner = add(state.x, ctx.drop(attended));
        return {add(inner, ffn_(ln2_(inner), ctx)), state.p};
    }

    const AttentionWeights<T>& attention() const { return attn_; }
    const FeedForward<T>& ffn() const { return ffn_; }

private:
    AttentionSpec spec_;
    LayerNormParams<T> ln1_, ln2_;
    AttentionWeights<T> attn_;
    FeedForward<T> ffn_;
};

// P_packed = MHA(P, X, X); X_unpacked = MHA(X, P_packed, P_packed);
// I = LN(X + X_unpacked); P' = LN(P + P_packed); X' = LN(FFN(I) + I).
template <typename T>
class LunaBlock : public EncoderBlock<T> {
public:
    LunaBlock(ParameterStore<T>& store, const std::string& prefix, std::size_t d, std::size_t h, std::size_t mlp_dim)
        : spec_{d, h} {
        spec_.validate();
        pack_ = make_attention_weights(store, prefix + ".pack", d);
        unpack_ = make_attention_weights(store, prefix + ".unpack", d);
        ln_x1_ = LayerNormParams<T>::make(store, prefix + ".ln_unpacked", d);
        ln_p_ = LayerNormParams<T>::make(store, prefix + ".ln_memory", d);
        ln_x2_ = LayerNormParams<T>::make(store, prefix + ".ln_ffn", d);
        ffn_ = FeedForward<T>::make(store, prefix + ".ffn", d, mlp_dim);
    }

    LunaState<T> forward(const LunaState<T>& state, ForwardContext<T>& ctx) const override {
        Tensor<T> packed, unpacked;
        AttentionTrace<T> trace;
        {
            FlopScope scope("pack");
            packed = ctx.drop(multi_head_attention(state.p, state.x, state.x, pack_, spec_, ctx.mask,
                                                   ctx.pack_traces ? &trace : nullptr));
        }
        {
            FlopScope scope("unpack");
            unpacked = ctx.drop(multi_head_attention(state.x, packed, packed, unpack_, spec_));
        }
        if (ctx.pack_traces) ctx.pack_traces->push_back(std::move(trace));
        const Tensor<T> inner = ln_x1_(add(state.x, unpacked));
        const Tensor<T> p_next = ln_p_(add(state.p, packed));
        const Tensor<T> x_next = ln_x2_(add(ffn_(inner, ctx), inner));
        return {x_next, p_next};
    }

    const AttentionWeights<T>& pack() const { return pack_; }
    const AttentionWeights<T>& unpack() const { return unpack_; }
    const FeedForward<T>& ffn() const { return ffn_; }

private:
    AttentionSpec spec_;
    AttentionWeights<T> pack_, unpack_;
    LayerNormParams<T> ln_x1_, ln_p_, ln_x2_;
    FeedForward<T> ffn_;
};

struct ConvLunaOptions {
    bool learnable_tau = true;
    FilterSpec filter{FilterKind::maxpool, 4, 1};
    bool share_projections = true;  // packing and unpacking reuse W^Q, W^K, W^O
    bool identity_value = true;     // W^V = I_d in both attentions
};

// Luna dataflow with the packing attention replaced by rescaled_attention.
// Unpacking keeps the fixed sqrt(d_h) divisor.
template <typename T>
class ConvLunaBlock : public EncoderBlock<T> {
public:
    ConvLunaBlock(ParameterStore<T>& store, const std::string& prefix, std::size_t d, std::size_t h,
                  std::size_t mlp_dim, const ConvLunaOptions& options)
        : spec_{d, h}, options_(options) {
        spec_.validate();
        options_.filter.validate();
        spec_.temperature = options.learnable_tau ? TemperatureMode::learnable_exp_tau : TemperatureMode::fixed_sqrt;
        spec_.value = options.identity_value ? ValueProjection::identity : ValueProjection::learned;
        pack_ = make_attention_weights(store, prefix + ".pack", d, !options.identity_value);
        if (options.share_projections) {
            unpack_ = pack_;
            spec_.share_kv_projection_with = prefix + ".pack";
        } else {
            unpack_ = make_attention_weights(store, prefix + ".unpack", d, !options.identity_value);
        }
        if (options.learnable_tau) tau_ = store.add(prefix + ".pack.tau", {1}, Init::zeros, false);
        if (options.filter.kind == FilterKind::conv) {
            const std::size_t k = options.filter.kernel;
            filter_.key_kernel = store.add(prefix + ".pack.filter.key_kernel", {k, d}, Init::glorot_uniform, true, k, k);
            filter_.key_bias = store.add(prefix + ".pack.filter.key_bias", {d}, Init::zeros, false);
            filter_.value_kernel =
                store.add(prefix + ".pack.filter.value_kernel", {k, d}, Init::glorot_uniform, true, k, k);
            filter_.value_bias = store.add(prefix + ".pack.filter.value_bias", {d}, Init::zeros, false);
        }
        ln_x1_ = LayerNormParams<T>::make(store, prefix + ".ln_unpacked", d);
        ln_p_ = LayerNormParams<T>::make(store, prefix + ".ln_memory", d);
        ln_x2_ = LayerNormParams<T>::make(store, prefix + ".ln_ffn", d);
        ffn_ = FeedForward<T>::make(store, prefix + ".ffn", d, mlp_dim);
    }

    LunaState<T> forward(const LunaState<T>& state, ForwardContext<T>& ctx) const override {
        Tensor<T> packed, unpacked;
        AttentionTrace<T> trace;
        {
            FlopScope scope("pack");
            packed = ctx.drop(rescaled_attention(state.p, state.x, state.x, pack_, spec_, options_.filter, filter_,
                                                 tau_, ctx.mask, ctx.pack_traces ? &trace : nullptr));
        }
        {
            FlopScope scope("unpack");
            AttentionSpec unpack_spec = spec_;
            unpack_spec.temperature = TemperatureMode::fixed_sqrt;
            unpacked = ctx.drop(multi_head_attention(state.x, packed, packed, unpack_, unpack_spec));
        }
        if (ctx.pack_traces) ctx.pack_traces->push_back(std::move(trace));
        const Tensor<T> inner = ln_x1_(add(state.x, unpacked));
        const Tensor<T> p_next = ln_p_(add(state.p, packed));
        const Tensor<T> x_next = ln_x2_(add(ffn_(inner, ctx), inner));
        return {x_next, p_next};
    }

    const Tensor<T>& tau() const { return tau_; }
    const AttentionWeights<T>& pack() const { return pack_; }
    const AttentionWeights<T>& unpack() const { return unpack_; }
    const FilterWeights<T>& filter() const { return filter_; }
    const FeedForward<T>& ffn() const { return ffn_; }
    const ConvLunaOptions& options() const { return options_; }

private:
    AttentionSpec spec_;
    ConvLunaOptions options_;
    AttentionWeights<T> pack_, unpack_;
    FilterWeights<T> filter_;
    Tensor<T> tau_;
    LayerNormParams<T> ln_x1_, ln_p_, ln_x2_;
    FeedForward<T> ffn_;
};

} // namespace lunalab
