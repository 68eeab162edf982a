#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

namespace worldkit {

using Mask = std::vector<std::uint8_t>;

/// Per-pixel depth (meters) with a validity flag; row-major, index = y*width + x.
struct DepthImage {
    int width = 0;
    int height = 0;
    std::vector<double> depth;
    Mask valid;

    DepthImage() = default;
    DepthImage(int w, int h) : width(w), height(h), depth(std::size_t(w) * h, 0.0), valid(std::size_t(w) * h, 0) {}

    std::size_t pixels() const { return depth.size(); }
    std::size_t index(int x, int y) const { return std::size_t(y) * width + x; }
};

/// Per-pixel blended class logits plus the accumulated alpha weight.
struct SemanticImage {
    int width = 0;
    int height = 0;
    int classes = 0;
    std::vector<double> logits; // pixel-major, `classes` values per pixel
    std::vector<double> weight;

    SemanticImage() = default;
    SemanticImage(int w, int h, int c)
        : width(w), height(h), classes(c), logits(std::size_t(w) * h * c, 0.0), weight(std::size_t(w) * h, 0.0) {}

    std::size_t pixels() const { return weight.size(); }
    Eigen::Map<const Eigen::VectorXd> logit(std::size_t pixel) const {
        return {logits.data() + pixel * classes, classes};
    }
    Eigen::Map<Eigen::VectorXd> logit(std::size_t pixel) { return {logits.data() + pixel * classes, classes}; }
    int argmax(std::size_t pixel) const;
};

/// Per-pixel class id with a validity mask.
struct LabelImage {
    int width = 0;
    int height = 0;
    std::vector<int> label;
    Mask valid;

    LabelImage() = default;
    LabelImage(int w, int h) : width(w), height(h), label(std::size_t(w) * h, 0), valid(std::size_t(w) * h, 0) {}

    std::size_t pixels() const { return label.size(); }
};

using Rgb = std::array<std::uint8_t, 3>;

/// Fixed colour table indexed by class id (wraps for large ids).
Rgb palette_color(int class_id);
void write_palette(const std::filesystem::path &path, int class_count);

/// 16-bit binary PGM. Valid depths are scaled so `max_depth` maps to 65535;
/// invalid pixels are written as 0.
void write_depth_pgm(const std::filesystem::path &path, const DepthImage &image, double max_depth);
/// Binary PPM of per-pixel argmax classes; pixels with valid == 0 are black.
void write_label_ppm(const std::filesystem::path &path, int width, int height, const std::vector<int> &labels,
                     const Mask &valid);

// "IMGF" raw grid: magic, u32 version=1, u32 width, u32 height, u32 channels,
// then width*height*channels f32 values, pixel-major.
void write_raw_grid(std::ostream &out, int width, int height, int channels, const std::vector<double> &values);
struct RawGrid {
    int width = 0, height = 0, channels = 0;
    std::vector<double> values;
};
RawGrid read_raw_grid(std::istream &in);

/// Depth stored as two channels (depth, valid).
void save_depth_raw(const std::filesystem::path &path, const DepthImage &image);
DepthImage load_depth_raw(const std::filesystem::path &path);

} // namespace worldkit
