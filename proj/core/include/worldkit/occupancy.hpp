#pragma once

#include "worldkit/geometry.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <vector>

namespace worldkit {

/// Voxel volume in the ego frame. Label 0 is empty; labels 1..class_count-1
/// are semantic classes (class 0 doubles as the empty logit channel).
struct OccSpec {
    double x_min = -16.0, x_max = 16.0;
    double y_min = -16.0, y_max = 16.0;
    double z_min = -1.0, z_max = 5.4;
    int nx = 32, ny = 32, nz = 8;
    int class_count = 4;

    void validate() const;
    Vec3 voxel_size() const;
    Vec3 voxel_center(int ix, int iy, int iz) const;
    std::size_t voxels() const { return std::size_t(nx) * ny * nz; }
    /// x fastest, then y, then z.
    std::size_t index(int ix, int iy, int iz) const { return (std::size_t(iz) * ny + iy) * nx + ix; }
    /// Closed box test against the extents.
    bool contains(const Vec3 &p) const;

    friend bool operator==(const OccSpec &, const OccSpec &) = default;
};

inline constexpr std::uint8_t kEmptyLabel = 0;

struct OccupancyGrid {
    OccSpec spec;
    std::vector<std::uint8_t> labels;

    OccupancyGrid() = default;
    explicit OccupancyGrid(const OccSpec &spec);

    std::uint8_t at(int ix, int iy, int iz) const { return labels[spec.index(ix, iy, iz)]; }
    std::uint8_t &at(int ix, int iy, int iz) { return labels[spec.index(ix, iy, iz)]; }
    std::size_t occupied() const;
};

/// Default density threshold for a voxel to count as occupied.
inline constexpr double kDefaultOccupancyThreshold = 0.2;

/// ρ(x) = Σ α_k G_k(x) over Gaussians whose 3σ ellipsoid contains the voxel
/// centre, L(x) = Σ α_k G_k(x) c_k. A voxel gets argmax L when ρ >= tau and is
/// empty otherwise. Contributions are summed in a canonical Gaussian order, so
/// the result does not depend on set order.
OccupancyGrid splat_to_occupancy(const GaussianSet &set, const OccSpec &spec = {},
                                 double tau = kDefaultOccupancyThreshold);

/// Random Gaussians that fill space entering the volume for the first time.
struct Completer {
    std::uint64_t seed = 0;
    double density = 1.0 / 8.0; ///< Gaussians per m³ of newly entered volume
    double opacity = 0.05;
    double scale = 0.5; ///< isotropic, meters
};

/// Optional per-step update applied to the whole set after completion.
using Refiner = std::function<void(GaussianSet &)>;

/// Volume of the region inside the extents whose preimage under
/// `next_from_current` lies outside them, estimated on a grid with a quarter
/// voxel pitch.
double newly_entered_volume(const OccSpec &spec, const Pose &next_from_current);

/// transform → cull means outside the extents → complete the newly entered
/// region with round(volume * density) random Gaussians → refine.
GaussianSet forecast_step(const GaussianSet &set, const Pose &next_from_current, const OccSpec &spec = {},
                          const Completer &completer = {}, const Refiner &refiner = {});

/// Autoregressive forecast. `steps[i]` maps ego frame t+i to t+i+1. Step i
/// uses completer seed `completer.seed + i`. Throws InvalidParameter on an
/// empty list.
std::vector<OccupancyGrid> forecast_rollout(const GaussianSet &set, const std::vector<Pose> &steps,
                                            const OccSpec &spec = {}, double tau = kDefaultOccupancyThreshold,
                                            const Completer &completer = {}, const Refiner &refiner = {});

// "OCC3" v1: 6 f32 extents, u32 nx, ny, nz, class_count, then u8 labels.
void write_occupancy(std::ostream &out, const OccupancyGrid &grid);
OccupancyGrid read_occupancy(std::istream &in);
void save_occupancy(const std::filesystem::path &path, const OccupancyGrid &grid);
OccupancyGrid load_occupancy(const std::filesystem::path &path);
/// Top-down PPM: each column shows the label of its highest occupied voxel.
void write_occupancy_ppm(const std::filesystem::path &path, const OccupancyGrid &grid);

} // namespace worldkit
