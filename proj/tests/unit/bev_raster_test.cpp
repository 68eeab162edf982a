#include "worldkit/bev_raster.hpp"
#include "worldkit/error.hpp"

#include "random_sets.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace worldkit {
namespace {

BevSpec small_spec() {
    BevSpec s;
    s.x_min = -4.0;
    s.x_max = 4.0;
    s.y_min = -4.0;
    s.y_max = 4.0;
    s.z_min = -1.0;
    s.z_max = 3.0;
    s.nx = 8;
    s.ny = 8;
    s.z_bins = 4;
    return s;
}

VecX feature(std::initializer_list<double> v) {
    VecX f(static_cast<Eigen::Index>(v.size()));
    std::copy(v.begin(), v.end(), f.data());
    return f;
}

Gaussian flat(const Vec3 &mean, double sxy, double sz, double opacity, const VecX &f) {
    return Gaussian::make(mean, Vec3(sxy, sxy, sz), {}, opacity, VecX::Zero(2), f);
}

// Direct evaluation written against the math, not the implementation.
BevGrid oracle_raster(const GaussianSet &set, const BevSpec &spec) {
    const int d = set.feature_dim();
    std::vector<double> num(spec.cells() * d * spec.z_bins, 0.0), den(spec.cells(), 0.0);
    for (const Gaussian &g : set) {
        const Quaternion &q = g.rotation;
        const double w = q.w(), x = q.x(), y = q.y(), z = q.z();
        Mat3 r;
        r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
        const Vec3 s = g.log_scale.array().exp();
        const Mat3 cov = r * s.cwiseAbs2().asDiagonal() * r.transpose();
        const double det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(1, 0);
        const double sz = std::sqrt(cov(2, 2));
        const double alpha = 1.0 / (1.0 + std::exp(-g.opacity_logit));
        for (int iy = 0; iy < spec.ny; ++iy)
            for (int ix = 0; ix < spec.nx; ++ix) {
                const double dx = spec.x_min + (ix + 0.5) * spec.cell_x() - g.mean.x();
                const double dy = spec.y_min + (iy + 0.5) * spec.cell_y() - g.mean.y();
                const double qf = (cov(1, 1) * dx * dx - 2.0 * cov(0, 1) * dx * dy + cov(0, 0) * dy * dy) / det;
                if (qf > 9.0) continue;
                const double wgt = alpha * std::exp(-0.5 * qf);
                const std::size_t c = std::size_t(iy) * spec.nx + ix;
                den[c] += wgt;
                for (int b = 0; b < spec.z_bins; ++b) {
                    const double lo = spec.z_min + b * spec.bin_height();
                    const double hi = lo + spec.bin_height();
                    const double mass = 0.5 * (std::erf((hi - g.mean.z()) / (sz * std::sqrt(2.0))) -
                                               std::erf((lo - g.mean.z()) / (sz * std::sqrt(2.0))));
                    for (int k = 0; k < d; ++k) num[(c * spec.z_bins + b) * d + k] += wgt * mass * g.feature[k];
                }
            }
    }
    BevGrid grid(spec, d);
    grid.weights = den;
    for (std::size_t c = 0; c < spec.cells(); ++c)
        for (std::size_t i = 0; i < std::size_t(d * spec.z_bins); ++i) {
            grid.features[c * d * spec.z_bins + i] = den[c] > 0.0 ? num[c * d * spec.z_bins + i] / (den[c] + 1e-8) : 0.0;
        }
    return grid;
}

TEST(BevSpec, RejectsBadExtentsAndCounts) {
    BevSpec s = small_spec();
    s.x_max = s.x_min;
    EXPECT_THROW(s.validate(), InvalidParameter);
    s = small_spec();
    s.z_bins = 0;
    EXPECT_THROW(s.validate(), InvalidParameter);
    EXPECT_NO_THROW(small_spec().validate());
}

TEST(RasterizeBev, EmptySetGivesZeroGrid) {
    const BevGrid g = rasterize_bev(GaussianSet(2, 3), small_spec());
    EXPECT_EQ(g.features.size(), 64u * 12u);
    EXPECT_TRUE(std::all_of(g.features.begin(), g.features.end(), [](double v) { return v == 0.0; }));
    EXPECT_TRUE(std::all_of(g.weights.begin(), g.weights.end(), [](double v) { return v == 0.0; }));
}

TEST(RasterizeBev, SingleGaussianFillsItsBinWithItsFeature) {
    const BevSpec spec = small_spec();
    GaussianSet set(2, 3);
    // Cell (4, 4) centre is (0.5, 0.5); bin 0 covers z in [-1, 0).
    set.add(flat(Vec3(0.5, 0.5, -0.5), 0.4, 0.05, 0.999, feature({1.0, -2.0, 0.5})));
    const BevGrid g = rasterize_bev(set, spec);
    const double *cell = g.cell(spec.cell_index(4, 4));
    EXPECT_NEAR(cell[0], 1.0, 1e-6);
    EXPECT_NEAR(cell[1], -2.0, 1e-6);
    EXPECT_NEAR(cell[2], 0.5, 1e-6);
    for (int ch = 3; ch < g.channels(); ++ch) EXPECT_NEAR(cell[ch], 0.0, 1e-12) << ch;
}

TEST(RasterizeBev, OppositeFeaturesCancel) {
    GaussianSet set(2, 2);
    set.add(flat(Vec3(0.3, -0.2, 0.5), 0.8, 0.3, 0.6, feature({1.5, -0.7})));
    set.add(flat(Vec3(0.3, -0.2, 0.5), 0.8, 0.3, 0.6, feature({-1.5, 0.7})));
    const BevGrid g = rasterize_bev(set, small_spec());
    double peak = 0.0;
    for (double v : g.features) peak = std::max(peak, std::abs(v));
    EXPECT_LT(peak, 1e-12);
    EXPECT_GT(*std::max_element(g.weights.begin(), g.weights.end()), 0.0);
}

TEST(RasterizeBev, CellsWithoutWeightHaveZeroFeature) {
    const GaussianSet set = testing::random_set(3, 5, Vec3(-3, -3, 0), Vec3(3, 3, 1), 2, 3, 0.1, 0.4);
    const BevGrid g = rasterize_bev(set, small_spec());
    for (std::size_t c = 0; c < g.spec.cells(); ++c) {
        if (g.weights[c] > 0.0) continue;
        for (int ch = 0; ch < g.channels(); ++ch) EXPECT_EQ(g.cell(c)[ch], 0.0);
    }
}

TEST(RasterizeBev, MatchesDirectEvaluation) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const GaussianSet set = testing::random_set(seed, 12, Vec3(-5, -5, -1.5), Vec3(5, 5, 3.5), 3, 4);
        const BevGrid got = rasterize_bev(set, small_spec());
        const BevGrid want = oracle_raster(set, small_spec());
        for (std::size_t i = 0; i < got.features.size(); ++i) ASSERT_NEAR(got.features[i], want.features[i], 1e-9);
        for (std::size_t c = 0; c < got.weights.size(); ++c) ASSERT_NEAR(got.weights[c], want.weights[c], 1e-12);
    }
}

TEST(RasterizeBev, PermutationInvariant) {
    GaussianSet set = testing::random_set(11, 30, Vec3(-4, -4, -1), Vec3(4, 4, 3), 3, 4);
    const BevGrid a = rasterize_bev(set, small_spec());
    std::vector<Gaussian> shuffled = set.gaussians();
    std::shuffle(shuffled.begin(), shuffled.end(), std::mt19937_64(5));
    GaussianSet other(3, 4);
    for (const Gaussian &g : shuffled) other.add(g);
    const BevGrid b = rasterize_bev(other, small_spec());
    for (std::size_t i = 0; i < a.features.size(); ++i) EXPECT_NEAR(a.features[i], b.features[i], 1e-6);
}

TEST(RasterizeBev, OneBinHeightShiftMovesOccupancyOneBin) {
    const BevSpec spec = small_spec(); // bin height 1 m
    GaussianSet low(2, 1), high(2, 1);
    for (double x : {-2.5, 0.5, 2.5}) {
        low.add(flat(Vec3(x, 0.5, -0.5), 0.5, 0.08, 0.8, feature({1.0})));
        high.add(flat(Vec3(x, 0.5, 0.5), 0.5, 0.08, 0.8, feature({1.0})));
    }
    const BevGrid a = rasterize_bev(low, spec);
    const BevGrid b = rasterize_bev(high, spec);
    for (std::size_t c = 0; c < spec.cells(); ++c) {
        for (int bin = 0; bin + 1 < spec.z_bins; ++bin) EXPECT_NEAR(a.cell(c)[bin], b.cell(c)[bin + 1], 1e-9);
        EXPECT_NEAR(b.cell(c)[0], 0.0, 1e-9);
    }
}

// Isotropic in xy: the weight then falls off with plain distance to the mean.
TEST(RasterizeBev, ArgmaxCellContainsTheMean) {
    const BevSpec spec = small_spec();
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> u(-3.9, 3.9);
    for (int trial = 0; trial < 50; ++trial) {
        GaussianSet set(2, 1);
        const Vec3 mean(u(rng), u(rng), 0.5);
        set.add(Gaussian::make(mean, Vec3(0.7, 0.7, 0.4), Quaternion::from_axis_angle(Vec3::UnitZ(), u(rng)), 0.7,
                               VecX::Zero(2), feature({1.0})));
        const BevGrid g = rasterize_bev(set, spec);
        const int ix = static_cast<int>(std::floor(mean.x() - spec.x_min));
        const int iy = static_cast<int>(std::floor(mean.y() - spec.y_min));
        EXPECT_EQ(g.argmax_cell(), spec.cell_index(ix, iy)) << mean.transpose();
    }
}

TEST(BevL2Loss, HandExamples) {
    const BevSpec spec = small_spec();
    BevGrid a(spec, 2), b(spec, 2);
    EXPECT_EQ(bev_l2_loss(a, a), 0.0);
    for (double &v : b.features) v = 2.0;
    EXPECT_DOUBLE_EQ(bev_l2_loss(b, a), 4.0);
    BevGrid c(spec, 2);
    c.features[37] = 0.3;
    EXPECT_DOUBLE_EQ(bev_l2_loss(c, a), 0.09 / static_cast<double>(a.features.size()));
}

TEST(BevL2Loss, SymmetricAndZeroOnlyForEqualGrids) {
    const GaussianSet s1 = testing::random_set(1, 6, Vec3(-3, -3, 0), Vec3(3, 3, 2), 2, 2);
    const GaussianSet s2 = testing::random_set(2, 6, Vec3(-3, -3, 0), Vec3(3, 3, 2), 2, 2);
    const BevGrid a = rasterize_bev(s1, small_spec()), b = rasterize_bev(s2, small_spec());
    EXPECT_EQ(bev_l2_loss(a, b), bev_l2_loss(b, a));
    EXPECT_GT(bev_l2_loss(a, b), 0.0);
    EXPECT_EQ(bev_l2_loss(a, a), 0.0);
}

TEST(BevL2Loss, SpecMismatchThrows) {
    BevSpec other = small_spec();
    other.nx = 4;
    EXPECT_THROW(bev_l2_loss(BevGrid(small_spec(), 2), BevGrid(other, 2)), InvalidParameter);
    EXPECT_THROW(bev_l2_loss(BevGrid(small_spec(), 2), BevGrid(small_spec(), 3)), InvalidParameter);
}

TEST(BevL2Gradient, MatchesFiniteDifferenceOnFeatures) {
    const BevGrid a = rasterize_bev(testing::random_set(4, 6, Vec3(-3, -3, 0), Vec3(3, 3, 2), 2, 2), small_spec());
    const BevGrid b = rasterize_bev(testing::random_set(5, 6, Vec3(-3, -3, 0), Vec3(3, 3, 2), 2, 2), small_spec());
    const std::vector<double> g = bev_l2_gradient(a, b);
    for (std::size_t i = 0; i < g.size(); i += 7) {
        BevGrid p = a, m = a;
        p.features[i] += 1e-6;
        m.features[i] -= 1e-6;
        EXPECT_NEAR(g[i], (bev_l2_loss(p, b) - bev_l2_loss(m, b)) / 2e-6, 1e-8);
    }
}

TEST(RasterizeBevMeanGradient, MatchesFiniteDifference) {
    const BevSpec spec = small_spec();
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        const GaussianSet set = testing::random_set(seed, 5, Vec3(-2, -2, -0.5), Vec3(2, 2, 2.5), 2, 3, 0.4, 1.2);
        const BevGrid target = rasterize_bev(testing::random_set(seed + 50, 5, Vec3(-2, -2, 0), Vec3(2, 2, 2), 2, 3), spec);
        const std::vector<Vec3> grad =
            rasterize_bev_mean_gradient(set, spec, bev_l2_gradient(rasterize_bev(set, spec), target));
        const double h = 1e-6;
        for (std::size_t k = 0; k < set.size(); ++k)
            for (int a = 0; a < 3; ++a) {
                GaussianSet p = set, m = set;
                p[k].mean[a] += h;
                m[k].mean[a] -= h;
                const double fd = (bev_l2_loss(rasterize_bev(p, spec), target) -
                                   bev_l2_loss(rasterize_bev(m, spec), target)) / (2.0 * h);
                EXPECT_NEAR(grad[k][a], fd, 1e-6 + 1e-4 * std::abs(fd)) << "seed " << seed << " k " << k << " a " << a;
            }
    }
}

TEST(BevIo, RoundTrip) {
    const BevGrid g = rasterize_bev(testing::random_set(9, 8, Vec3(-3, -3, 0), Vec3(3, 3, 2), 2, 3), small_spec());
    std::stringstream buf;
    write_bev(buf, g);
    const BevGrid r = read_bev(buf);
    EXPECT_EQ(r.spec, g.spec);
    EXPECT_EQ(r.feature_dim, g.feature_dim);
    for (std::size_t i = 0; i < g.features.size(); ++i) {
        EXPECT_EQ(static_cast<float>(r.features[i]), static_cast<float>(g.features[i]));
    }
    for (std::size_t i = 0; i < g.weights.size(); ++i) EXPECT_EQ(static_cast<float>(r.weights[i]), static_cast<float>(g.weights[i]));
}

TEST(BevIo, BadMagicAndTruncationThrow) {
    std::stringstream bad("XXXX0000");
    EXPECT_THROW(read_bev(bad), FormatError);
    std::stringstream buf;
    write_bev(buf, BevGrid(small_spec(), 1));
    const std::string bytes = buf.str();
    std::stringstream cut(bytes.substr(0, bytes.size() - 5));
    EXPECT_THROW(read_bev(cut), FormatError);
}

} // namespace
} // namespace worldkit
