#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "lunalab/tensor.hpp"

namespace lunalab {

enum class Init {
    zeros,
    ones,
    glorot_uniform,  // U(-l, l), l = sqrt(6 / (fan_in + fan_out))
    normal_002,      // N(0, 0.02)
};

inline const char* init_name(Init init) {
    switch (init) {
    case Init::zeros: return "zeros";
    case Init::ones: return "ones";
    case Init::glorot_uniform: return "glorot_uniform";
    case Init::normal_002: return "normal_0.02";
    }
    return "?";
}

// FNV-1a; stable across platforms so per-parameter seeds never move.
inline std::uint64_t stable_hash(std::string_view text) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> tensor;
    Init init = Init::zeros;
    std::size_t fan_in = 0;
    std::size_t fan_out = 0;
    bool decay = true;  // participates in decoupled weight decay
};

// Ordered registry of named trainable tensors.
template <typename T>
class ParameterStore {
public:
    Tensor<T> add(const std::string& name, Shape shape, Init init, bool decay = true, std::size_t fan_in = 0,
                  std::size_t fan_out = 0) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        Parameter<T> p;
        p.name = name;
        p.tensor = Tensor<T>::zeros(std::move(shape), true);
        p.init = init;
        p.fan_in = fan_in;
        p.fan_out = fan_out;
        p.decay = decay;
        index_[name] = params_.size();
        params_.push_back(std::move(p));
        return params_.back().tensor;
    }

    // Re-initializes every parameter from `seed`. Each parameter draws from
    // its own generator keyed by (seed, name), so results are independent of
    // registration order and bit-identical for equal seeds.
    void initialize(std::uint64_t seed) {
        for (auto& p : params_) initialize_one(p, seed);
    }

    const std::vector<Parameter<T>>& all() const { return params_; }
    std::vector<Parameter<T>>& all() { return params_; }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Tensor<T> get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw UsageError("unknown parameter: " + name);
        return params_[it->second].tensor;
    }

    std::size_t count() const {
        std::size_t total = 0;
        for (const auto& p : params_) total += p.tensor.numel();
        return total;
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

private:
    static void initialize_one(Parameter<T>& p, std::uint64_t seed) {
        std::mt19937_64 rng(seed ^ stable_hash(p.name));
        auto values = p.tensor.mutable_data();
        switch (p.init) {
        case Init::zeros:
            std::fill(values.begin(), values.end(), T(0));
            break;
        case Init::ones:
            std::fill(values.begin(), values.end(), T(1));
            break;
        case Init::glorot_uniform: {
            const double limit = std::sqrt(6.0 / static_cast<double>(p.fan_in + p.fan_out));
            std::uniform_real_distribution<double> dist(-limit, limit);
            for (auto& v : values) v = static_cast<T>(dist(rng));
            break;
        }
        case Init::normal_002: {
            std::normal_distribution<double> dist(0.0, 0.02);
            for (auto& v : values) v = static_cast<T>(dist(rng));
            break;
        }
        }
        p.tensor.zero_grad();
    }

    std::vector<Parameter<T>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

} // namespace lunalab
