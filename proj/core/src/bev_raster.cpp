#include "worldkit/bev_raster.hpp"

#include "worldkit/binary_io.hpp"
#include "worldkit/error.hpp"
#include "worldkit/parallel.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace worldkit {

namespace {

constexpr double kFootprintSigma = 3.0;

double normal_cdf(double u) { return 0.5 * std::erfc(-u / std::sqrt(2.0)); }
double normal_pdf(double u) { return std::exp(-0.5 * u * u) / std::sqrt(2.0 * M_PI); }

bool same_geometry(const BevSpec &a, const BevSpec &b) {
    auto close = [](double x, double y) { return std::abs(x - y) <= 1e-5 * std::max(1.0, std::abs(x)); };
    return a.nx == b.nx && a.ny == b.ny && a.z_bins == b.z_bins && close(a.x_min, b.x_min) &&
           close(a.x_max, b.x_max) && close(a.y_min, b.y_min) && close(a.y_max, b.y_max) &&
           close(a.z_min, b.z_min) && close(a.z_max, b.z_max);
}

struct CellHit {
    std::size_t cell;
    double weight;
    Vec2 offset; // cell centre - mean
};

struct Footprint {
    std::vector<CellHit> hits;
    std::vector<double> bin_mass;
    std::vector<double> bin_mass_dz; // d mass / d mu_z
    Mat2 inv_cov;
};

// Cell range whose centres fall inside [lo, hi].
std::pair<int, int> cell_range(double lo, double hi, double origin, double step, int n) {
    const int first = std::max(0, static_cast<int>(std::ceil((lo - origin) / step - 0.5)));
    const int last = std::min(n - 1, static_cast<int>(std::floor((hi - origin) / step - 0.5)));
    return {first, last};
}

Footprint footprint(const Gaussian &g, const BevSpec &spec) {
    Footprint fp;
    const Mat3 sigma = g.covariance();
    const Mat2 cov = sigma.topLeftCorner<2, 2>();
    fp.inv_cov = cov.inverse();
    const double alpha = g.opacity();
    const Vec2 mu = g.mean.head<2>();

    const double sz = std::sqrt(sigma(2, 2));
    fp.bin_mass.resize(spec.z_bins);
    fp.bin_mass_dz.resize(spec.z_bins);
    bool any_mass = false;
    for (int b = 0; b < spec.z_bins; ++b) {
        const double lo = spec.z_min + b * spec.bin_height();
        const double hi = b + 1 == spec.z_bins ? spec.z_max : lo + spec.bin_height();
        const double ulo = (lo - g.mean.z()) / sz, uhi = (hi - g.mean.z()) / sz;
        fp.bin_mass[b] = normal_cdf(uhi) - normal_cdf(ulo);
        fp.bin_mass_dz[b] = -(normal_pdf(uhi) - normal_pdf(ulo)) / sz;
        any_mass = any_mass || fp.bin_mass[b] > 0.0;
    }
    if (!any_mass || alpha <= 0.0) return fp;

    const double rx = kFootprintSigma * std::sqrt(cov(0, 0));
    const double ry = kFootprintSigma * std::sqrt(cov(1, 1));
    const auto [x0, x1] = cell_range(mu.x() - rx, mu.x() + rx, spec.x_min, spec.cell_x(), spec.nx);
    const auto [y0, y1] = cell_range(mu.y() - ry, mu.y() + ry, spec.y_min, spec.cell_y(), spec.ny);
    for (int iy = y0; iy <= y1; ++iy) {
        for (int ix = x0; ix <= x1; ++ix) {
            const Vec2 d = spec.cell_center(ix, iy) - mu;
            const double q = d.dot(fp.inv_cov * d);
            if (q > kFootprintSigma * kFootprintSigma) continue;
            fp.hits.push_back({spec.cell_index(ix, iy), alpha * std::exp(-0.5 * q), d});
        }
    }
    return fp;
}

std::vector<Footprint> all_footprints(const GaussianSet &set, const BevSpec &spec) {
    std::vector<Footprint> fps(set.size());
    parallel_for(set.size(), [&](std::size_t k) { fps[k] = footprint(set[k], spec); });
    return fps;
}

} // namespace

void BevSpec::validate() const {
    if (!(x_min < x_max && y_min < y_max && z_min < z_max)) {
        throw InvalidParameter("BevSpec extents must be strictly ordered");
    }
    if (nx < 1 || ny < 1 || z_bins < 1) throw InvalidParameter("BevSpec counts must be >= 1");
}

Vec2 BevSpec::cell_center(int ix, int iy) const {
    return {x_min + (ix + 0.5) * cell_x(), y_min + (iy + 0.5) * cell_y()};
}

BevGrid::BevGrid(const BevSpec &s, int d) : spec(s), feature_dim(d) {
    spec.validate();
    if (d < 1) throw InvalidParameter("BevGrid feature_dim must be >= 1");
    features.assign(spec.cells() * channels(), 0.0);
    weights.assign(spec.cells(), 0.0);
}

std::size_t BevGrid::argmax_cell() const {
    return static_cast<std::size_t>(std::max_element(weights.begin(), weights.end()) - weights.begin());
}

BevGrid rasterize_bev(const GaussianSet &set, const BevSpec &spec) {
    BevGrid grid(spec, set.feature_dim());
    const int d_feat = set.feature_dim();
    const std::vector<Footprint> fps = all_footprints(set, spec);

    // Serial merge in set order keeps the sum order fixed for any worker count.
    for (std::size_t k = 0; k < set.size(); ++k) {
        const VecX &f = set[k].feature;
        for (const CellHit &hit : fps[k].hits) {
            grid.weights[hit.cell] += hit.weight;
            double *out = grid.cell(hit.cell);
            for (int b = 0; b < spec.z_bins; ++b) {
                const double wm = hit.weight * fps[k].bin_mass[b];
                if (wm == 0.0) continue;
                for (int d = 0; d < d_feat; ++d) out[b * d_feat + d] += wm * f[d];
            }
        }
    }
    for (std::size_t c = 0; c < spec.cells(); ++c) {
        if (grid.weights[c] == 0.0) continue;
        const double inv = 1.0 / (grid.weights[c] + kBevEpsilon);
        double *out = grid.cell(c);
        for (int ch = 0; ch < grid.channels(); ++ch) out[ch] *= inv;
    }
    return grid;
}

double bev_l2_loss(const BevGrid &pred, const BevGrid &target) {
    if (!same_geometry(pred.spec, target.spec) || pred.feature_dim != target.feature_dim) {
        throw InvalidParameter("bev_l2_loss: grids have different specs");
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.features.size(); ++i) {
        const double r = pred.features[i] - target.features[i];
        sum += r * r;
    }
    return pred.features.empty() ? 0.0 : sum / static_cast<double>(pred.features.size());
}

std::vector<double> bev_l2_gradient(const BevGrid &pred, const BevGrid &target) {
    if (!same_geometry(pred.spec, target.spec) || pred.feature_dim != target.feature_dim) {
        throw InvalidParameter("bev_l2_gradient: grids have different specs");
    }
    std::vector<double> g(pred.features.size());
    const double scale = 2.0 / static_cast<double>(std::max<std::size_t>(1, g.size()));
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = scale * (pred.features[i] - target.features[i]);
    return g;
}

std::vector<Vec3> rasterize_bev_mean_gradient(const GaussianSet &set, const BevSpec &spec,
                                              const std::vector<double> &feature_grad) {
    const BevGrid grid = rasterize_bev(set, spec);
    if (feature_grad.size() != grid.features.size()) {
        throw InvalidParameter("rasterize_bev_mean_gradient: gradient has the wrong size");
    }
    const int d_feat = set.feature_dim();
    const int channels = grid.channels();

    // dL/dN (numerator) and dL/dW (denominator) per cell.
    std::vector<double> g_num(feature_grad.size(), 0.0);
    std::vector<double> g_den(spec.cells(), 0.0);
    for (std::size_t c = 0; c < spec.cells(); ++c) {
        if (grid.weights[c] == 0.0) continue;
        const double inv = 1.0 / (grid.weights[c] + kBevEpsilon);
        double acc = 0.0;
        for (int ch = 0; ch < channels; ++ch) {
            const std::size_t i = c * channels + ch;
            g_num[i] = feature_grad[i] * inv;
            acc += feature_grad[i] * grid.features[i];
        }
        g_den[c] = -acc * inv;
    }

    const std::vector<Footprint> fps = all_footprints(set, spec);
    std::vector<Vec3> out(set.size(), Vec3::Zero());
    parallel_for(set.size(), [&](std::size_t k) {
        const Footprint &fp = fps[k];
        const VecX &f = set[k].feature;
        Vec3 grad = Vec3::Zero();
        for (const CellHit &hit : fp.hits) {
            double g_w = g_den[hit.cell];
            double g_mz = 0.0;
            for (int b = 0; b < spec.z_bins; ++b) {
                double dot = 0.0;
                for (int d = 0; d < d_feat; ++d) dot += g_num[hit.cell * channels + b * d_feat + d] * f[d];
                g_w += fp.bin_mass[b] * dot;
                g_mz += hit.weight * dot * fp.bin_mass_dz[b];
            }
            // w = α exp(-½ dᵀAd), d = centre - μ  =>  dw/dμ = w A d
            grad.head<2>() += g_w * hit.weight * (fp.inv_cov * hit.offset);
            grad.z() += g_mz;
        }
        out[k] = grad;
    });
    return out;
}

void write_bev(std::ostream &out, const BevGrid &grid) {
    io::write_magic(out, "BEVG");
    io::write_u32(out, 1);
    const BevSpec &s = grid.spec;
    for (double v : {s.x_min, s.x_max, s.y_min, s.y_max, s.z_min, s.z_max}) io::write_f32(out, v);
    io::write_u32(out, static_cast<std::uint32_t>(s.nx));
    io::write_u32(out, static_cast<std::uint32_t>(s.ny));
    io::write_u32(out, static_cast<std::uint32_t>(s.z_bins));
    io::write_u32(out, static_cast<std::uint32_t>(grid.feature_dim));
    for (double v : grid.features) io::write_f32(out, v);
    for (double v : grid.weights) io::write_f32(out, v);
}

BevGrid read_bev(std::istream &in) {
    io::expect_magic(in, "BEVG");
    if (io::read_u32(in) != 1) throw FormatError("unsupported BEVG version");
    BevSpec s;
    s.x_min = io::read_f32_decimal(in);
    s.x_max = io::read_f32_decimal(in);
    s.y_min = io::read_f32_decimal(in);
    s.y_max = io::read_f32_decimal(in);
    s.z_min = io::read_f32_decimal(in);
    s.z_max = io::read_f32_decimal(in);
    s.nx = static_cast<int>(io::read_u32(in));
    s.ny = static_cast<int>(io::read_u32(in));
    s.z_bins = static_cast<int>(io::read_u32(in));
    const int d = static_cast<int>(io::read_u32(in));
    if (s.nx < 1 || s.ny < 1 || s.z_bins < 1 || d < 1 || s.cells() * d * s.z_bins > (std::size_t(1) << 28)) {
        throw FormatError("BEVG header out of range");
    }
    BevGrid grid(s, d);
    for (double &v : grid.features) v = io::read_f32(in);
    for (double &v : grid.weights) v = io::read_f32(in);
    return grid;
}

void save_bev(const std::filesystem::path &path, const BevGrid &grid) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open " + path.string() + " for writing");
    write_bev(out, grid);
}

BevGrid load_bev(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return read_bev(in);
}

} // namespace worldkit
