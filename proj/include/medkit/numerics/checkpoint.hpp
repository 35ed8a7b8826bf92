#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "medkit/errors.hpp"
#include "medkit/numerics/params.hpp"

// Binary parameter checkpoint:
//   magic "MEDKITCK" | u32 version | u64 tensor count |
//   per tensor: u64 name length, name bytes (UTF-8), u64 rank, u64 dims..., f64 payload
// All integers and floats little-endian.
namespace medkit::checkpoint {

inline constexpr std::array<char, 8> kMagic{'M', 'E', 'D', 'K', 'I', 'T', 'C', 'K'};
inline constexpr std::uint32_t kVersion = 1;

namespace detail {

template <typename T>
void write_le(std::ostream& os, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::array<unsigned char, sizeof(T)> bytes{};
    std::memcpy(bytes.data(), &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(bytes.begin(), bytes.end());
    }
    os.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
    std::array<unsigned char, sizeof(T)> bytes{};
    is.read(reinterpret_cast<char*>(bytes.data()), sizeof(T));
    if (!is) {
        throw FormatError("checkpoint truncated");
    }
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(bytes.begin(), bytes.end());
    }
    T value;
    std::memcpy(&value, bytes.data(), sizeof(T));
    return value;
}

}  // namespace detail

inline void save(const std::filesystem::path& path, const ParamList& params) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw IoError("cannot write checkpoint " + path.string());
    }
    os.write(kMagic.data(), kMagic.size());
    detail::write_le<std::uint32_t>(os, kVersion);
    detail::write_le<std::uint64_t>(os, params.size());
    for (const auto& p : params) {
        detail::write_le<std::uint64_t>(os, p.name.size());
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        detail::write_le<std::uint64_t>(os, p.tensor.rank());
        for (std::size_t d : p.tensor.shape()) {
            detail::write_le<std::uint64_t>(os, d);
        }
        for (double v : p.tensor.data()) {
            detail::write_le<double>(os, v);
        }
    }
    if (!os) {
        throw IoError("failed writing checkpoint " + path.string());
    }
}

inline std::map<std::string, Tensor> load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw IoError("cannot read checkpoint " + path.string());
    }
    std::array<char, 8> magic{};
    is.read(magic.data(), magic.size());
    if (!is || magic != kMagic) {
        throw FormatError(path.string() + " is not a medkit checkpoint");
    }
    const auto version = detail::read_le<std::uint32_t>(is);
    if (version != kVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto count = detail::read_le<std::uint64_t>(is);
    std::map<std::string, Tensor> out;
    for (std::uint64_t k = 0; k < count; ++k) {
        const auto len = detail::read_le<std::uint64_t>(is);
        if (len > (1u << 20)) {
            throw FormatError("implausible tensor name length in checkpoint");
        }
        std::string name(len, '\0');
        is.read(name.data(), static_cast<std::streamsize>(len));
        const auto rank = detail::read_le<std::uint64_t>(is);
        if (rank > 8) {
            throw FormatError("implausible tensor rank in checkpoint");
        }
        Shape shape(rank);
        for (auto& d : shape) {
            d = detail::read_le<std::uint64_t>(is);
        }
        std::vector<double> data(shape_size(shape));
        for (auto& v : data) {
            v = detail::read_le<double>(is);
        }
        out.emplace(name, Tensor{std::move(shape), std::move(data), true});
    }
    return out;
}

// Copies stored values into existing parameters; names and shapes must match.
inline void restore(const std::map<std::string, Tensor>& stored, ParamList& params) {
    for (auto& p : params) {
        auto it = stored.find(p.name);
        if (it == stored.end()) {
            throw FormatError("checkpoint lacks tensor '" + p.name + "'");
        }
        if (it->second.shape() != p.tensor.shape()) {
            throw FormatError("checkpoint tensor '" + p.name + "' has shape " +
                              shape_str(it->second.shape()) + ", expected " +
                              shape_str(p.tensor.shape()));
        }
        auto dst = p.tensor.mutable_data();
        auto src = it->second.data();
        std::copy(src.begin(), src.end(), dst.begin());
    }
}

inline void restore(const std::filesystem::path& path, ParamList& params) { restore(load(path), params); }

}  // namespace medkit::checkpoint
