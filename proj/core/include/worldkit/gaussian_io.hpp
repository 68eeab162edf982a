#pragma once

#include "worldkit/geometry.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

namespace worldkit {

// "GSET" v1: magic, u32 version, u32 K, u32 C, u32 D (little-endian), then K
// records of f32 fields: mean[3], scale[3], rotation[4] (w,x,y,z), opacity,
// logits[C], feature[D]. Scale and opacity are written in constrained form.
inline constexpr std::uint32_t kGaussianSetVersion = 1;

void write_gaussian_set(std::ostream &out, const GaussianSet &set);
GaussianSet read_gaussian_set(std::istream &in);

void save_gaussian_set(const std::filesystem::path &path, const GaussianSet &set);
GaussianSet load_gaussian_set(const std::filesystem::path &path);

/// JSON mirror of the same fields. Doubles are printed with round-trip
/// precision, so to_json → from_json is lossless.
std::string gaussian_set_to_json(const GaussianSet &set);
GaussianSet gaussian_set_from_json(const std::string &text);

} // namespace worldkit
