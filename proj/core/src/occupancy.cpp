#include "worldkit/occupancy.hpp"

#include "worldkit/binary_io.hpp"
#include "worldkit/error.hpp"
#include "worldkit/image.hpp"
#include "worldkit/parallel.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace worldkit {

void OccSpec::validate() const {
    if (!(x_min < x_max && y_min < y_max && z_min < z_max)) {
        throw InvalidParameter("OccSpec extents must be strictly ordered");
    }
    if (nx < 1 || ny < 1 || nz < 1) throw InvalidParameter("OccSpec voxel counts must be >= 1");
    if (class_count < 2 || class_count > 255) throw InvalidParameter("OccSpec class_count must be in [2, 255]");
}

Vec3 OccSpec::voxel_size() const {
    return {(x_max - x_min) / nx, (y_max - y_min) / ny, (z_max - z_min) / nz};
}

Vec3 OccSpec::voxel_center(int ix, int iy, int iz) const {
    const Vec3 s = voxel_size();
    return {x_min + (ix + 0.5) * s.x(), y_min + (iy + 0.5) * s.y(), z_min + (iz + 0.5) * s.z()};
}

bool OccSpec::contains(const Vec3 &p) const {
    return p.x() >= x_min && p.x() <= x_max && p.y() >= y_min && p.y() <= y_max && p.z() >= z_min &&
           p.z() <= z_max;
}

OccupancyGrid::OccupancyGrid(const OccSpec &s) : spec(s) {
    spec.validate();
    labels.assign(spec.voxels(), kEmptyLabel);
}

std::size_t OccupancyGrid::occupied() const {
    return static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](auto l) { return l != 0; }));
}

namespace {

// Lexicographic order over every stored parameter. Identical Gaussians compare
// equal and contribute identical terms, so their relative order is irrelevant.
bool canonical_less(const Gaussian &a, const Gaussian &b) {
    auto fields = [](const Gaussian &g) {
        std::vector<double> v;
        v.reserve(11 + g.logits.size());
        for (int i = 0; i < 3; ++i) v.push_back(g.mean[i]);
        for (int i = 0; i < 3; ++i) v.push_back(g.log_scale[i]);
        const Vec4 q = g.rotation.coeffs();
        for (int i = 0; i < 4; ++i) v.push_back(q[i]);
        v.push_back(g.opacity_logit);
        for (Eigen::Index i = 0; i < g.logits.size(); ++i) v.push_back(g.logits[i]);
        return v;
    };
    return fields(a) < fields(b);
}

struct VoxelSplat {
    Vec3 mean;
    Mat3 inv_cov;
    double alpha;
    const VecX *logits;
    int x0, x1, y0, y1, z0, z1;
};

std::pair<int, int> voxel_range(double center, double radius, double origin, double step, int n) {
    const int first = std::max(0, static_cast<int>(std::ceil((center - radius - origin) / step - 0.5)));
    const int last = std::min(n - 1, static_cast<int>(std::floor((center + radius - origin) / step - 0.5)));
    return {first, last};
}

} // namespace

OccupancyGrid splat_to_occupancy(const GaussianSet &set, const OccSpec &spec, double tau) {
    OccupancyGrid grid(spec);
    const Vec3 vs = spec.voxel_size();
    const int classes = set.class_count();

    std::vector<std::size_t> order(set.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return canonical_less(set[a], set[b]); });

    std::vector<VoxelSplat> splats;
    splats.reserve(set.size());
    for (const std::size_t k : order) {
        const Gaussian &g = set[k];
        const Mat3 cov = g.covariance();
        VoxelSplat s{g.mean, cov.inverse(), g.opacity(), &g.logits, 0, 0, 0, 0, 0, 0};
        std::tie(s.x0, s.x1) = voxel_range(g.mean.x(), 3.0 * std::sqrt(cov(0, 0)), spec.x_min, vs.x(), spec.nx);
        std::tie(s.y0, s.y1) = voxel_range(g.mean.y(), 3.0 * std::sqrt(cov(1, 1)), spec.y_min, vs.y(), spec.ny);
        std::tie(s.z0, s.z1) = voxel_range(g.mean.z(), 3.0 * std::sqrt(cov(2, 2)), spec.z_min, vs.z(), spec.nz);
        if (s.x0 > s.x1 || s.y0 > s.y1 || s.z0 > s.z1 || s.alpha <= 0.0) continue;
        splats.push_back(s);
    }

    // One task per (y, z) row; each voxel sums splats in canonical order.
    const std::size_t rows = std::size_t(spec.ny) * spec.nz;
    parallel_for(rows, [&](std::size_t row) {
        const int iy = static_cast<int>(row % spec.ny);
        const int iz = static_cast<int>(row / spec.ny);
        std::vector<double> density(spec.nx, 0.0);
        MatX logits = MatX::Zero(classes, spec.nx);
        for (const VoxelSplat &s : splats) {
            if (iy < s.y0 || iy > s.y1 || iz < s.z0 || iz > s.z1) continue;
            for (int ix = s.x0; ix <= s.x1; ++ix) {
                const Vec3 d = spec.voxel_center(ix, iy, iz) - s.mean;
                const double q = d.dot(s.inv_cov * d);
                if (q > 9.0) continue;
                const double w = s.alpha * std::exp(-0.5 * q);
                density[ix] += w;
                logits.col(ix) += w * *s.logits;
            }
        }
        for (int ix = 0; ix < spec.nx; ++ix) {
            if (density[ix] < tau || density[ix] == 0.0) continue;
            Eigen::Index best = 0;
            logits.col(ix).maxCoeff(&best);
            grid.at(ix, iy, iz) = static_cast<std::uint8_t>(best);
        }
    });
    return grid;
}

double newly_entered_volume(const OccSpec &spec, const Pose &next_from_current) {
    spec.validate();
    const Pose back = invert(next_from_current);
    const Vec3 pitch = spec.voxel_size() / 4.0;
    const int nx = spec.nx * 4, ny = spec.ny * 4, nz = spec.nz * 4;
    std::size_t count = 0;
    for (int iz = 0; iz < nz; ++iz)
        for (int iy = 0; iy < ny; ++iy)
            for (int ix = 0; ix < nx; ++ix) {
                const Vec3 p(spec.x_min + (ix + 0.5) * pitch.x(), spec.y_min + (iy + 0.5) * pitch.y(),
                             spec.z_min + (iz + 0.5) * pitch.z());
                if (!spec.contains(back.apply(p))) ++count;
            }
    return static_cast<double>(count) * pitch.prod();
}

GaussianSet forecast_step(const GaussianSet &set, const Pose &next_from_current, const OccSpec &spec,
                          const Completer &completer, const Refiner &refiner) {
    const GaussianSet moved = transform_gaussian_set(set, next_from_current);
    GaussianSet out(set.class_count(), set.feature_dim());
    out.reserve(moved.size());
    for (const Gaussian &g : moved) {
        if (spec.contains(g.mean)) out.add(g);
    }

    const double volume = newly_entered_volume(spec, next_from_current);
    const auto wanted = static_cast<std::size_t>(std::llround(volume * completer.density));
    if (wanted > 0) {
        const Pose back = invert(next_from_current);
        std::mt19937_64 rng(completer.seed);
        std::uniform_real_distribution<double> ux(spec.x_min, spec.x_max), uy(spec.y_min, spec.y_max),
            uz(spec.z_min, spec.z_max);
        const VecX logits = VecX::Zero(set.class_count());
        const VecX feature = VecX::Zero(set.feature_dim());
        // The region is a thin shell for small motions; rejection sampling is
        // bounded so a degenerate pose cannot spin forever.
        const std::size_t max_draws = 100000 + 1000 * wanted;
        std::size_t added = 0;
        for (std::size_t draw = 0; draw < max_draws && added < wanted; ++draw) {
            const Vec3 p(ux(rng), uy(rng), uz(rng));
            if (spec.contains(back.apply(p))) continue;
            out.add(Gaussian::make(p, Vec3::Constant(completer.scale), {}, completer.opacity, logits, feature));
            ++added;
        }
    }
    if (refiner) refiner(out);
    return out;
}

std::vector<OccupancyGrid> forecast_rollout(const GaussianSet &set, const std::vector<Pose> &steps,
                                            const OccSpec &spec, double tau, const Completer &completer,
                                            const Refiner &refiner) {
    if (steps.empty()) throw InvalidParameter("forecast_rollout: no poses given");
    std::vector<OccupancyGrid> grids;
    grids.reserve(steps.size());
    GaussianSet current = set;
    for (std::size_t i = 0; i < steps.size(); ++i) {
        Completer c = completer;
        c.seed = completer.seed + i;
        current = forecast_step(current, steps[i], spec, c, refiner);
        grids.push_back(splat_to_occupancy(current, spec, tau));
    }
    return grids;
}

void write_occupancy(std::ostream &out, const OccupancyGrid &grid) {
    const OccSpec &s = grid.spec;
    io::write_magic(out, "OCC3");
    io::write_u32(out, 1);
    for (double v : {s.x_min, s.x_max, s.y_min, s.y_max, s.z_min, s.z_max}) io::write_f32(out, v);
    for (int v : {s.nx, s.ny, s.nz, s.class_count}) io::write_u32(out, static_cast<std::uint32_t>(v));
    out.write(reinterpret_cast<const char *>(grid.labels.data()), static_cast<std::streamsize>(grid.labels.size()));
}

OccupancyGrid read_occupancy(std::istream &in) {
    io::expect_magic(in, "OCC3");
    if (io::read_u32(in) != 1) throw FormatError("unsupported OCC3 version");
    OccSpec s;
    s.x_min = io::read_f32_decimal(in);
    s.x_max = io::read_f32_decimal(in);
    s.y_min = io::read_f32_decimal(in);
    s.y_max = io::read_f32_decimal(in);
    s.z_min = io::read_f32_decimal(in);
    s.z_max = io::read_f32_decimal(in);
    s.nx = static_cast<int>(io::read_u32(in));
    s.ny = static_cast<int>(io::read_u32(in));
    s.nz = static_cast<int>(io::read_u32(in));
    s.class_count = static_cast<int>(io::read_u32(in));
    if (s.nx < 1 || s.ny < 1 || s.nz < 1 || s.voxels() > (std::size_t(1) << 28)) {
        throw FormatError("OCC3 header out of range");
    }
    OccupancyGrid grid(s);
    if (!in.read(reinterpret_cast<char *>(grid.labels.data()), static_cast<std::streamsize>(grid.labels.size()))) {
        throw FormatError("truncated OCC3 payload");
    }
    for (auto l : grid.labels) {
        if (l >= s.class_count) throw FormatError("OCC3 label out of range");
    }
    return grid;
}

void save_occupancy(const std::filesystem::path &path, const OccupancyGrid &grid) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open " + path.string() + " for writing");
    write_occupancy(out, grid);
}

OccupancyGrid load_occupancy(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return read_occupancy(in);
}

void write_occupancy_ppm(const std::filesystem::path &path, const OccupancyGrid &grid) {
    const OccSpec &s = grid.spec;
    // Image rows run from +y (top) to -y, columns from -x to +x.
    std::vector<int> labels(std::size_t(s.nx) * s.ny, 0);
    Mask valid(labels.size(), 0);
    for (int iy = 0; iy < s.ny; ++iy)
        for (int ix = 0; ix < s.nx; ++ix) {
            const std::size_t p = std::size_t(s.ny - 1 - iy) * s.nx + ix;
            for (int iz = s.nz - 1; iz >= 0; --iz) {
                if (grid.at(ix, iy, iz) != kEmptyLabel) {
                    labels[p] = grid.at(ix, iy, iz);
                    valid[p] = 1;
                    break;
                }
            }
        }
    write_label_ppm(path, s.nx, s.ny, labels, valid);
}

} // namespace worldkit
