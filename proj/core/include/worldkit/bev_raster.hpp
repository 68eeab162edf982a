#pragma once

#include "worldkit/geometry.hpp"

#include <filesystem>
#include <iosfwd>
#include <vector>

namespace worldkit {

/// Top-down grid over the ego frame (x forward, y left, z up). Cell (ix, iy)
/// spans [x_min + ix*dx, x_min + (ix+1)*dx) and likewise in y; the vertical
/// range is split into `z_bins` equal slabs.
struct BevSpec {
    double x_min = -25.6, x_max = 25.6;
    double y_min = -25.6, y_max = 25.6;
    double z_min = -1.0, z_max = 5.4;
    int nx = 64, ny = 64;
    int z_bins = 4;

    void validate() const;
    double cell_x() const { return (x_max - x_min) / nx; }
    double cell_y() const { return (y_max - y_min) / ny; }
    double bin_height() const { return (z_max - z_min) / z_bins; }
    Vec2 cell_center(int ix, int iy) const;
    std::size_t cells() const { return std::size_t(nx) * ny; }
    std::size_t cell_index(int ix, int iy) const { return std::size_t(iy) * nx + ix; }

    friend bool operator==(const BevSpec &, const BevSpec &) = default;
};

/// Per-cell feature vectors of width feature_dim * z_bins. Channel
/// `bin * feature_dim + d` holds feature d of height bin `bin`.
struct BevGrid {
    BevSpec spec;
    int feature_dim = 0;
    std::vector<double> features; // cell-major
    std::vector<double> weights;  // one per cell, >= 0

    BevGrid() = default;
    BevGrid(const BevSpec &spec, int feature_dim);

    int channels() const { return feature_dim * spec.z_bins; }
    const double *cell(std::size_t c) const { return features.data() + c * channels(); }
    double *cell(std::size_t c) { return features.data() + c * channels(); }
    /// Cell with the largest weight (first in cell order on ties).
    std::size_t argmax_cell() const;
};

/// Denominator floor of the weight-normalized cell mean.
inline constexpr double kBevEpsilon = 1e-8;

/// Splats every Gaussian's feature into the cells inside the 3σ ellipse of its
/// xy-marginal. A cell receives weight w = opacity * exp(-½ q(cell centre));
/// its feature lands in each height bin in proportion to the Gaussian's
/// vertical mass in that bin. Cell features are Σ w m_b f / (Σ w + ε).
BevGrid rasterize_bev(const GaussianSet &set, const BevSpec &spec = {});

/// Mean squared difference over every cell and channel. Throws
/// InvalidParameter when the specs or feature widths differ.
double bev_l2_loss(const BevGrid &pred, const BevGrid &target);

/// d bev_l2_loss / d pred.features, laid out like BevGrid::features.
std::vector<double> bev_l2_gradient(const BevGrid &pred, const BevGrid &target);

/// Back-propagates dL/dF (laid out like BevGrid::features) through
/// rasterize_bev to the Gaussian means. Returns one vector per Gaussian.
std::vector<Vec3> rasterize_bev_mean_gradient(const GaussianSet &set, const BevSpec &spec,
                                              const std::vector<double> &feature_grad);

// "BEVG" v1: spec (6 f32 extents, u32 nx, ny, z_bins), u32 feature_dim,
// f32 features cell-major, f32 weights.
void write_bev(std::ostream &out, const BevGrid &grid);
BevGrid read_bev(std::istream &in);
void save_bev(const std::filesystem::path &path, const BevGrid &grid);
BevGrid load_bev(const std::filesystem::path &path);

} // namespace worldkit
