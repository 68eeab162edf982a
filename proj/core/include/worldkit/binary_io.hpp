#pragma once

#include "worldkit/error.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

namespace worldkit::io {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

// Little-endian primitive writers/readers shared by every binary artifact.

template <typename T>
void write_le(std::ostream &out, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::array<char, sizeof(T)> bytes;
    std::memcpy(bytes.data(), &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(bytes.begin(), bytes.end());
    }
    out.write(bytes.data(), sizeof(T));
}

template <typename T>
T read_le(std::istream &in) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::array<char, sizeof(T)> bytes;
    if (!in.read(bytes.data(), sizeof(T))) {
        throw FormatError("unexpected end of binary stream");
    }
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(bytes.begin(), bytes.end());
    }
    T value;
    std::memcpy(&value, bytes.data(), sizeof(T));
    return value;
}

inline void write_u32(std::ostream &out, std::uint32_t v) { write_le(out, v); }
inline void write_f32(std::ostream &out, double v) { write_le(out, static_cast<float>(v)); }
/// Reads an f32 and returns the shortest decimal it round-trips to, so values
/// written from short decimals (5.4, -25.6) come back as the same double.
inline double read_f32_decimal(std::istream &in) {
    const float f = read_le<float>(in);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.7g", static_cast<double>(f));
    return std::strtod(buf, nullptr);
}
inline std::uint32_t read_u32(std::istream &in) { return read_le<std::uint32_t>(in); }
inline double read_f32(std::istream &in) { return static_cast<double>(read_le<float>(in)); }

inline void write_magic(std::ostream &out, std::string_view magic) { out.write(magic.data(), 4); }

inline void expect_magic(std::istream &in, std::string_view magic) {
    char buf[4];
    if (!in.read(buf, 4) || std::string_view(buf, 4) != magic) {
        throw FormatError("bad magic: expected \"" + std::string(magic) + "\"");
    }
}

} // namespace worldkit::io
