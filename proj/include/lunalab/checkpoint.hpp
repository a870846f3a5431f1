#pragma once

// Checkpoint / snapshot container. Layout (all integers little-endian):
//
//   bytes 0..7    magic "LUNACKPT"
//   u32           format version (1)
//   u64           manifest length N in bytes
//   N bytes       UTF-8 JSON manifest:
//                   {"meta": {...},
//                    "tensors": [{"name", "shape", "dtype": "f32"|"f64",
//                                 "offset", "nbytes"}, ...]}
//                 offsets are relative to the first byte after the manifest
//   ...           raw little-endian IEEE-754 arrays, row-major
//
// See docs/checkpoint_format.md.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lunalab/parameters.hpp"

namespace lunalab {

enum class DType { f32, f64 };

inline const char* dtype_name(DType t) { return t == DType::f32 ? "f32" : "f64"; }

template <typename T>
constexpr DType dtype_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

struct StoredTensor {
    std::string name;
    Shape shape;
    DType dtype = DType::f64;
    std::vector<double> values;  // widened; f32 round-trips exactly
};

struct Checkpoint {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<StoredTensor> tensors;

    const StoredTensor* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }
};

inline constexpr char kCheckpointMagic[8] = {'L', 'U', 'N', 'A', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename U>
void write_le(std::ostream& os, U value) {
    static_assert(std::is_trivially_copyable_v<U>);
    unsigned char bytes[sizeof(U)];
    std::memcpy(bytes, &value, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
    os.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U read_le(std::istream& is) {
    unsigned char bytes[sizeof(U)];
    if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw InputError("checkpoint: truncated file");
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
    U value;
    std::memcpy(&value, bytes, sizeof(U));
    return value;
}

} // namespace detail

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    nlohmann::json manifest;
    manifest["meta"] = ckpt.meta;
    manifest["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& t : ckpt.tensors) {
        if (shape_numel(t.shape) != t.values.size()) throw UsageError("checkpoint: tensor " + t.name + " has inconsistent shape");
        const std::uint64_t width = t.dtype == DType::f32 ? 4 : 8;
        const std::uint64_t nbytes = width * t.values.size();
        manifest["tensors"].push_back({{"name", t.name},
                                       {"shape", t.shape},
                                       {"dtype", dtype_name(t.dtype)},
                                       {"offset", offset},
                                       {"nbytes", nbytes}});
        offset += nbytes;
    }
    const std::string text = manifest.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw UsageError("checkpoint: cannot open " + path.string() + " for writing");
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::write_le<std::uint32_t>(os, kCheckpointVersion);
    detail::write_le<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : ckpt.tensors) {
        for (double v : t.values) {
            if (t.dtype == DType::f32) detail::write_le<float>(os, static_cast<float>(v));
            else detail::write_le<double>(os, v);
        }
    }
    if (!os) throw UsageError("checkpoint: write failed for " + path.string());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("checkpoint: cannot open " + path.string());
    char magic[8];
    if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
        throw InputError("checkpoint: bad magic in " + path.string());
    }
    const auto version = detail::read_le<std::uint32_t>(is);
    if (version != kCheckpointVersion) throw InputError("checkpoint: unsupported version " + std::to_string(version));
    const auto manifest_len = detail::read_le<std::uint64_t>(is);
    if (manifest_len > std::filesystem::file_size(path)) throw InputError("checkpoint: truncated manifest");
    std::string text(manifest_len, '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(manifest_len))) throw InputError("checkpoint: truncated manifest");
    const auto data_start = static_cast<std::uint64_t>(is.tellg());

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("checkpoint: malformed manifest: ") + e.what());
    }
    Checkpoint ckpt;
    try {
        ckpt.meta = manifest.value("meta", nlohmann::json::object());
        for (const auto& entry : manifest.at("tensors")) {
            StoredTensor t;
            t.name = entry.at("name").get<std::string>();
            t.shape = entry.at("shape").get<Shape>();
            const auto dtype = entry.at("dtype").get<std::string>();
            if (dtype != "f32" && dtype != "f64") throw InputError("checkpoint: unknown dtype " + dtype);
            t.dtype = dtype == "f32" ? DType::f32 : DType::f64;
            const std::size_t n = shape_numel(t.shape);
            if (entry.at("nbytes").get<std::uint64_t>() != n * (t.dtype == DType::f32 ? 4 : 8)) {
                throw InputError("checkpoint: tensor " + t.name + " byte count does not match its shape");
            }
            is.seekg(static_cast<std::streamoff>(data_start + entry.at("offset").get<std::uint64_t>()));
            t.values.resize(n);
            for (auto& v : t.values) v = t.dtype == DType::f32 ? detail::read_le<float>(is) : detail::read_le<double>(is);
            ckpt.tensors.push_back(std::move(t));
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("checkpoint: malformed manifest: ") + e.what());
    }
    return ckpt;
}

template <typename T>
StoredTensor store_tensor(const std::string& name, const Tensor<T>& t) {
    return {name, t.shape(), dtype_of<T>(), std::vector<double>(t.data().begin(), t.data().end())};
}

template <typename T>
StoredTensor store_values(const std::string& name, const Shape& shape, std::span<const T> values) {
    return {name, shape, dtype_of<T>(), std::vector<double>(values.begin(), values.end())};
}

template <typename T>
Checkpoint checkpoint_from(const ParameterStore<T>& params, nlohmann::json meta = nlohmann::json::object()) {
    Checkpoint ckpt;
    ckpt.meta = std::move(meta);
    for (const auto& p : params.all()) ckpt.tensors.push_back(store_tensor(p.name, p.tensor));
    return ckpt;
}

// Copies stored values into same-named parameters; every parameter must be present.
template <typename T>
void load_parameters(ParameterStore<T>& params, const Checkpoint& ckpt) {
    for (auto& p : params.all()) {
        const auto* stored = ckpt.find(p.name);
        if (!stored) throw InputError("checkpoint: missing parameter " + p.name);
        if (stored->shape != p.tensor.shape()) {
            throw InputError("checkpoint: parameter " + p.name + " has shape " + shape_str(stored->shape) +
                             ", model expects " + shape_str(p.tensor.shape()));
        }
        auto dst = p.tensor.mutable_data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(stored->values[i]);
        p.tensor.zero_grad();
    }
}

} // namespace lunalab
