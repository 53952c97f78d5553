#pragma once

// Checkpoint container, little-endian throughout:
//
//   bytes 0..7   magic "SANCKPT\0"
//   u32          format version (1)
//   u32 + bytes  config echo (UTF-8 key = value text)
//   u32          number of arrays
//   per array:   u32 + bytes name, u32 rank, rank x i32 dims, numel x f32 data
//
// Arrays are stored in lexicographic name order. Names are dotted paths such
// as "generator.sab2.mask_conv0.weight" or "adam.generator.m.<param>".

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "san/nn.hpp"

namespace san {

namespace fs = std::filesystem;

inline constexpr std::array<char, 8> kCheckpointMagic{'S', 'A', 'N', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::string config_text;
    std::map<std::string, Tensor<float>> arrays;

    bool has(const std::string& name) const { return arrays.count(name) > 0; }

    const Tensor<float>& get(const std::string& name) const {
        auto it = arrays.find(name);
        if (it == arrays.end()) throw DataError("checkpoint has no array '" + name + "'");
        return it->second;
    }
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw DataError("checkpoint truncated");
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

inline void put_string(std::ostream& os, const std::string& s) {
    put_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, std::uint32_t limit) {
    const std::uint32_t n = get_u32(is);
    if (n > limit) throw DataError("checkpoint string length out of range");
    std::string s(n, '\0');
    if (!is.read(s.data(), n)) throw DataError("checkpoint truncated");
    return s;
}

}  // namespace detail

inline void save_checkpoint(const fs::path& path, const Checkpoint& ck) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw DataError("cannot write checkpoint " + tmp.string());
        os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
        detail::put_u32(os, kCheckpointVersion);
        detail::put_string(os, ck.config_text);
        detail::put_u32(os, static_cast<std::uint32_t>(ck.arrays.size()));
        for (const auto& [name, t] : ck.arrays) {
            detail::put_string(os, name);
            detail::put_u32(os, static_cast<std::uint32_t>(t.shape().rank()));
            for (int d : t.shape().dims()) detail::put_u32(os, static_cast<std::uint32_t>(d));
            for (float v : t.vec()) detail::put_u32(os, std::bit_cast<std::uint32_t>(v));
        }
        os.flush();
        if (!os) throw DataError("failed writing checkpoint " + tmp.string() + " (disk full?)");
    }
    fs::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const fs::path& path) {
    if (!fs::exists(path)) throw MissingFileError(path.string());
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingFileError(path.string());
    std::array<char, 8> magic{};
    if (!is.read(magic.data(), magic.size()) || magic != kCheckpointMagic)
        throw DataError("not a checkpoint file: " + path.string());
    const std::uint32_t version = detail::get_u32(is);
    if (version != kCheckpointVersion)
        throw DataError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
    Checkpoint ck;
    ck.config_text = detail::get_string(is, 1u << 24);
    const std::uint32_t count = detail::get_u32(is);
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = detail::get_string(is, 4096);
        const std::uint32_t rank = detail::get_u32(is);
        if (rank > 8) throw DataError("checkpoint array rank out of range: " + name);
        std::vector<int> dims(rank);
        for (auto& d : dims) d = static_cast<int>(detail::get_u32(is));
        Tensor<float> t{Shape(dims)};
        for (float& v : t.vec()) v = std::bit_cast<float>(detail::get_u32(is));
        ck.arrays.emplace(std::move(name), std::move(t));
    }
    return ck;
}

/// Copy parameters and buffers into the container under their own names.
inline void store(Checkpoint& ck, const NamedParams<float>& params) {
    for (const auto& [name, p] : params.params) ck.arrays[name] = p->value();
    for (const auto& [name, b] : params.buffers) ck.arrays[name] = *b;
}

/// Overwrite parameters and buffers from the container; every name must be
/// present with a matching shape.
inline void restore(const Checkpoint& ck, NamedParams<float>& params) {
    auto take = [&](const std::string& name, Tensor<float>& dst) {
        const Tensor<float>& src = ck.get(name);
        if (src.shape() != dst.shape())
            throw DataError("checkpoint array '" + name + "' has shape " + src.shape().str() + ", model expects " +
                            dst.shape().str());
        dst = src;
    };
    for (auto& [name, p] : params.params) take(name, p->mutable_value());
    for (auto& [name, b] : params.buffers) take(name, *b);
}

}  // namespace san
