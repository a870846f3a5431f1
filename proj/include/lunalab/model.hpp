#pragma once

#include <memory>
#include <string>
#include <vector>

#include "lunalab/blocks.hpp"

namespace lunalab {

enum class Arch { vanilla, luna, convluna, luna_only_scaling, luna_only_filtering };
enum class Pooling { memory_average, token_mean, cls };

inline const char* arch_name(Arch a) {
    switch (a) {
    case Arch::vanilla: return "vanilla";
    case Arch::luna: return "luna";
    case Arch::convluna: return "convluna";
    case Arch::luna_only_scaling: return "luna-only-scaling";
    case Arch::luna_only_filtering: return "luna-only-filtering";
    }
    return "?";
}

inline const char* pooling_name(Pooling p) {
    switch (p) {
    case Pooling::memory_average: return "memory-average";
    case Pooling::token_mean: return "token-mean";
    case Pooling::cls: return "cls";
    }
    return "?";
}

inline const char* filter_kind_name(FilterKind k) {
    switch (k) {
    case FilterKind::identity: return "identity";
    case FilterKind::conv: return "conv";
    case FilterKind::maxpool: return "maxpool";
    }
    return "?";
}

inline bool uses_memory(Arch a) { return a != Arch::vanilla; }
inline bool is_convluna_family(Arch a) {
    return a == Arch::convluna || a == Arch::luna_only_scaling || a == Arch::luna_only_filtering;
}

struct ModelConfig {
    Arch arch = Arch::convluna;
    std::size_t blocks = 2;
    std::size_t d = 32;
    std::size_t h = 4;
    std::size_t mlp_dim = 64;
    std::size_t memory_size = 16;
    FilterSpec filter{FilterKind::maxpool, 4, 1};
    std::size_t vocab_size = 32;
    std::size_t max_len = 128;
    std::size_t num_classes = 2;
    double dropout = 0.0;
    Pooling pooling = Pooling::memory_average;
    bool dual_input = false;
    bool share_projections = true;
    bool identity_value = true;

    bool operator==(const ModelConfig&) const = default;

    void validate() const {
        if (blocks == 0) throw ConfigError("model.blocks must be positive");
        AttentionSpec{d, h}.validate();
        if (mlp_dim == 0) throw ConfigError("model.mlp_dim must be positive");
        if (vocab_size == 0 || max_len == 0) throw ConfigError("model.vocab_size and model.max_len must be positive");
        if (num_classes < 2) throw ConfigError("model.num_classes must be at least 2");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model.dropout must lie in [0, 1)");
        if (arch == Arch::vanilla && memory_size != 0) {
            throw ConfigError("model.memory_size must be 0 for arch=vanilla (vanilla blocks have no memory)");
        }
        if (uses_memory(arch) && memory_size == 0) {
            throw ConfigError(std::string("model.memory_size must be positive for arch=") + arch_name(arch));
        }
        if (pooling == Pooling::memory_average && !uses_memory(arch)) {
            throw ConfigError("model.pooling=memory-average requires a memory architecture");
        }
        filter.validate();
        if (arch == Arch::luna_only_filtering && filter.kind == FilterKind::identity) {
            throw ConfigError("model.filter must be conv or maxpool for arch=luna-only-filtering");
        }
    }

    // Block options implied by the architecture.
    ConvLunaOptions convluna_options() const {
        ConvLunaOptions o;
        o.learnable_tau = arch != Arch::luna_only_filtering;
        o.filter = arch == Arch::luna_only_scaling ? FilterSpec{} : filter;
        o.share_projections = share_projections;
        o.identity_value = identity_value;
        return o;
    }
};

// Embeddings, memory, block stack and linear classifier.
template <typename T>
class Model {
public:
    explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        const std::size_t d = cfg_.d;
        token_embedding_ = params_.add("embed.tokens", {cfg_.vocab_size, d}, Init::normal_002);
        position_embedding_ = params_.add("embed.positions", {cfg_.max_len, d}, Init::normal_002);
        if (uses_memory(cfg_.arch)) memory_ = params_.add("memory", {cfg_.memory_size, d}, Init::normal_002);
        if (cfg_.pooling == Pooling::cls) cls_ = params_.add("cls", {1, d}, Init::normal_002);
        for (std::size_t i = 0; i < cfg_.blocks; ++i) {
            const std::string prefix = "blocks." + std::to_string(i);
            switch (cfg_.arch) {
            case Arch::vanilla:
                blocks_.push_back(std::make_unique<VanillaBlock<T>>(params_, prefix, d, cfg_.h, cfg_.mlp_dim));
                break;
            case Arch::luna:
                blocks_.push_back(std::make_unique<LunaBlock<T>>(params_, prefix, d, cfg_.h, cfg_.mlp_dim));
                break;
            default:
                blocks_.push_back(std::make_unique<ConvLunaBlock<T>>(params_, prefix, d, cfg_.h, cfg_.mlp_dim,
                                                                     cfg_.convluna_options()));
                break;
            }
        }
        const std::size_t head_in = cfg_.dual_input ? 2 * d : d;
        head_weight_ = params_.add("head.weight", {head_in, cfg_.num_classes}, Init::glorot_uniform, true, head_in,
                                   cfg_.num_classes);
        head_bias_ = params_.add("head.bias", {cfg_.num_classes}, Init::zeros, false);
    }

    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    void initialize(std::uint64_t seed) { params_.initialize(seed); }

    const ModelConfig& config() const { return cfg_; }
    ParameterStore<T>& params() { return params_; }
    const ParameterStore<T>& params() const { return params_; }
    const Tensor<T>& memory() const { return memory_; }
    const EncoderBlock<T>& block(std::size_t i) const { return *blocks_.at(i); }

    // (name, tau) for every learnable temperature.
    std::vector<std::pair<std::string, Tensor<T>>> taus() const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            if (auto* b = dynamic_cast<const ConvLunaBlock<T>*>(blocks_[i].get()); b && b->tau().defined()) {
                out.emplace_back("blocks." + std::to_string(i) + ".pack.tau", b->tau());
            }
        }
        return out;
    }

    // Pooled representation [1 x d] of one sequence. `mask` may be empty (all valid).
    Tensor<T> encode(const std::vector<int>& tokens, const std::vector<bool>& mask, ForwardContext<T>& ctx) const {
        const std::size_t len = tokens.size();
        if (len == 0) throw InputError("model: empty input sequence");
        if (len > cfg_.max_len) {
            throw InputError("model: sequence length " + std::to_string(len) + " exceeds max_len " +
                             std::to_string(cfg_.max_len));
        }
        if (!mask.empty() && mask.size() != len) throw InputError("model: mask length does not match tokens");

        std::vector<bool> valid = mask.empty() ? std::vector<bool>(len, true) : mask;
        Tensor<T> x = add(embedding(token_embedding_, tokens), slice_rows(position_embedding_, 0, len));
        if (cfg_.pooling == Pooling::cls) {
            x = concat_rows<T>({cls_, x});
            valid.insert(valid.begin(), true);
        }
        x = ctx.drop(x);
        const bool all_valid = std::all_of(valid.begin(), valid.end(), [](bool b) { return b; });
        const std::vector<bool>* saved_mask = ctx.mask;
        ctx.mask = all_valid ? nullptr : &valid;

        LunaState<T> state{x, memory_};
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            FlopScope scope("block" + std::to_string(i));
            state = blocks_[i]->forward(state, ctx);
        }
        ctx.mask = saved_mask;

        switch (cfg_.pooling) {
        case Pooling::memory_average: return mean_rows(state.p);
        case Pooling::token_mean: return mean_rows(state.x, all_valid ? nullptr : &valid);
        case Pooling::cls: return slice_rows(state.x, 0, 1);
        }
        throw ConfigError("model: unknown pooling");
    }

    Tensor<T> classify(const Tensor<T>& pooled) const {
        FlopScope scope("head");
        return add_row(matmul(pooled, head_weight_), head_bias_);
    }

    // Logits [1 x num_classes] for a single-input model.
    Tensor<T> logits(const std::vector<int>& tokens, const std::vector<bool>& mask, ForwardContext<T>& ctx) const {
        if (cfg_.dual_input) throw UsageError("model: dual-input model needs two sequences");
        return classify(encode(tokens, mask, ctx));
    }

    // Shared encoder on both inputs; the classifier sees [r_a, r_b].
    Tensor<T> logits_pair(const std::vector<int>& a, const std::vector<bool>& mask_a, const std::vector<int>& b,
                          const std::vector<bool>& mask_b, ForwardContext<T>& ctx) const {
        if (!cfg_.dual_input) throw UsageError("model: single-input model given two sequences");
        return classify(concat_cols<T>({encode(a, mask_a, ctx), encode(b, mask_b, ctx)}));
    }

private:
    ModelConfig cfg_;
    ParameterStore<T> params_;
    Tensor<T> token_embedding_, position_embedding_, memory_, cls_;
    std::vector<std::unique_ptr<EncoderBlock<T>>> blocks_;
    Tensor<T> head_weight_, head_bias_;
};

template <typename T>
std::unique_ptr<Model<T>> assemble_model(const ModelConfig& cfg, std::uint64_t seed) {
    auto model = std::make_unique<Model<T>>(cfg);
    model->initialize(seed);
    return model;
}

} // namespace lunalab
