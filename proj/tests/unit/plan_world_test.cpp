#include "worldkit/error.hpp"
#include "worldkit/plan_world.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

using namespace worldkit;

namespace {

MatX random_matrix(int rows, int cols, std::uint64_t seed, double s = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, s);
    MatX m(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) m(r, c) = n(rng);
    return m;
}

// Blocks with non-trivial norm parameters and biases so every term matters.
AttentionBlock busy_block(int dim, int hidden, std::uint64_t seed) {
    AttentionBlock b = AttentionBlock::random(dim, hidden, seed);
    b.ln1_gamma = MatX::Ones(1, dim) + random_matrix(1, dim, seed + 1, 0.2);
    b.ln1_beta = random_matrix(1, dim, seed + 2, 0.2);
    b.ln2_gamma = MatX::Ones(1, dim) + random_matrix(1, dim, seed + 3, 0.2);
    b.ln2_beta = random_matrix(1, dim, seed + 4, 0.2);
    b.b1 = random_matrix(1, hidden, seed + 5, 0.2);
    b.b2 = random_matrix(1, dim, seed + 6, 0.2);
    return b;
}

// ---- loop-based reference math ----

using Rows = std::vector<std::vector<double>>;

Rows rows_of(const MatX &m) {
    Rows r(m.rows(), std::vector<double>(m.cols()));
    for (int i = 0; i < m.rows(); ++i)
        for (int j = 0; j < m.cols(); ++j) r[i][j] = m(i, j);
    return r;
}

MatX matrix_of(const Rows &r) {
    MatX m(r.size(), r.empty() ? 0 : r[0].size());
    for (std::size_t i = 0; i < r.size(); ++i)
        for (std::size_t j = 0; j < r[i].size(); ++j) m(i, j) = r[i][j];
    return m;
}

Rows mm(const Rows &a, const MatX &b) {
    Rows out(a.size(), std::vector<double>(b.cols(), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (int j = 0; j < b.cols(); ++j)
            for (int k = 0; k < b.rows(); ++k) out[i][j] += a[i][k] * b(k, j);
    return out;
}

std::vector<double> norm_row(const std::vector<double> &x) {
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= x.size();
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= x.size();
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mean) / std::sqrt(var + 1e-5);
    return y;
}

Rows ln(const Rows &x, const MatX &g, const MatX &b) {
    Rows y = x;
    for (auto &row : y) {
        row = norm_row(row);
        for (std::size_t j = 0; j < row.size(); ++j) row[j] = row[j] * g(0, j) + b(0, j);
    }
    return y;
}

Rows add(const Rows &a, const Rows &b) {
    Rows o = a;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[i].size(); ++j) o[i][j] += b[i][j];
    return o;
}

Rows oracle_weights(const AttentionBlock &b, const Rows &q, const Rows &c) {
    const Rows qq = mm(ln(q, b.ln1_gamma, b.ln1_beta), b.wq);
    const Rows kk = mm(ln(c, b.ln1_gamma, b.ln1_beta), b.wk);
    Rows w(q.size(), std::vector<double>(c.size()));
    for (std::size_t i = 0; i < q.size(); ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < c.size(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < qq[i].size(); ++k) s += qq[i][k] * kk[j][k];
            w[i][j] = std::exp(s / std::sqrt(double(b.dim())));
            total += w[i][j];
        }
        for (double &v : w[i]) v /= total;
    }
    return w;
}

Rows oracle_block(const AttentionBlock &b, const Rows &q, const Rows &c) {
    const Rows w = oracle_weights(b, q, c);
    const Rows vv = mm(ln(c, b.ln1_gamma, b.ln1_beta), b.wv);
    Rows mixed(q.size(), std::vector<double>(b.dim(), 0.0));
    for (std::size_t i = 0; i < q.size(); ++i)
        for (std::size_t j = 0; j < c.size(); ++j)
            for (int k = 0; k < b.dim(); ++k) mixed[i][k] += w[i][j] * vv[j][k];
    const Rows q1 = add(q, mm(mixed, b.wo));
    Rows h = mm(ln(q1, b.ln2_gamma, b.ln2_beta), b.w1);
    for (auto &row : h)
        for (std::size_t j = 0; j < row.size(); ++j) row[j] = std::max(0.0, row[j] + b.b1(0, j));
    Rows f = mm(h, b.w2);
    for (auto &row : f)
        for (std::size_t j = 0; j < row.size(); ++j) row[j] += b.b2(0, j);
    return add(q1, f);
}

BevSpec grid_spec(int n) {
    BevSpec s;
    s.x_min = -4;
    s.x_max = 4;
    s.y_min = -4;
    s.y_max = 4;
    s.nx = n;
    s.ny = n;
    s.z_bins = 2;
    return s;
}

BevGrid random_grid(int n, int feature_dim, std::uint64_t seed) {
    BevGrid g(grid_spec(n), feature_dim);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(0.0, 1.0);
    for (double &f : g.features) f = d(rng);
    for (double &w : g.weights) w = std::abs(d(rng));
    return g;
}

Affine random_affine(int in, int out, std::uint64_t seed) {
    Affine a = Affine::random(in, out, seed);
    a.bias = random_matrix(1, out, seed + 100, 0.3);
    return a;
}

Trajectory line(int n, double dx, double dy) {
    Trajectory t;
    for (int i = 1; i <= n; ++i) t.emplace_back(dx * i, dy * i);
    return t;
}

void expect_near(const MatX &a, const MatX &b, double tol) {
    ASSERT_EQ(a.rows(), b.rows());
    ASSERT_EQ(a.cols(), b.cols());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) EXPECT_NEAR(a(i, j), b(i, j), tol) << i << "," << j;
}

} // namespace

// ---- extract_scene_queries ----

TEST(SceneQueries, ConstantGridGivesIdenticalQueries) {
    BevGrid g(grid_spec(8), 2);
    for (std::size_t c = 0; c < g.spec.cells(); ++c)
        for (int k = 0; k < g.channels(); ++k) g.cell(c)[k] = 0.5 + k;
    const QuerySet q = extract_scene_queries(g, 4, random_affine(4, 6, 1));
    ASSERT_EQ(q.size(), 16);
    for (int i = 1; i < q.size(); ++i) EXPECT_TRUE(q.queries.row(i).isApprox(q.queries.row(0), 1e-14));
}

TEST(SceneQueries, OneNonzeroPatchChangesOneQuery) {
    BevGrid g(grid_spec(8), 2);
    // patch (px=1, py=2) covers cells x 2..3, y 4..5
    g.cell(g.spec.cell_index(3, 5))[1] = 2.0;
    const QuerySet q = extract_scene_queries(g, 4, random_affine(4, 6, 2));
    const MatX zero = random_affine(4, 6, 2).bias;
    int differing = -1, count = 0;
    for (int i = 0; i < q.size(); ++i) {
        if (!q.queries.row(i).isApprox(zero.row(0), 1e-14)) {
            differing = i;
            ++count;
        }
    }
    EXPECT_EQ(count, 1);
    EXPECT_EQ(differing, 2 * 4 + 1);
    EXPECT_EQ(q.patch_origin[differing], (std::array<int, 2>{2, 4}));
}

TEST(SceneQueries, MatchesPoolingOracle) {
    const BevGrid g = random_grid(8, 3, 7);
    const Affine proj = random_affine(6, 5, 3);
    const QuerySet q = extract_scene_queries(g, 2, proj);
    ASSERT_EQ(q.size(), 4);
    EXPECT_EQ(q.patch_cells_x, 4);
    EXPECT_EQ(q.patch_cells_y, 4);
    for (int py = 0; py < 2; ++py) {
        for (int px = 0; px < 2; ++px) {
            std::vector<double> pooled(6, 0.0);
            for (int iy = 4 * py; iy < 4 * py + 4; ++iy)
                for (int ix = 4 * px; ix < 4 * px + 4; ++ix)
                    for (int k = 0; k < 6; ++k) pooled[k] += g.features[(iy * 8 + ix) * 6 + k] / 16.0;
            for (int o = 0; o < 5; ++o) {
                double v = proj.bias(0, o);
                for (int k = 0; k < 6; ++k) v += pooled[k] * proj.weight(k, o);
                EXPECT_NEAR(q.queries(py * 2 + px, o), v, 1e-6);
            }
        }
    }
}

TEST(SceneQueries, IndivisibleGridThrows) {
    const BevGrid g = random_grid(6, 1, 1);
    EXPECT_THROW(extract_scene_queries(g, 4, random_affine(2, 4, 1)), InvalidParameter);
    EXPECT_THROW(extract_scene_queries(g, 3, random_affine(3, 4, 1)), InvalidParameter);
}

// ---- attention_block ----

TEST(Attention, SingleVectorClosedForm) {
    const int d = 4, h = 5;
    const AttentionBlock b = busy_block(d, h, 11);
    const MatX q = random_matrix(1, d, 12);
    const MatX c = random_matrix(1, d, 13);
    const MatX w = attention_weights(b, q, c);
    ASSERT_EQ(w.rows(), 1);
    ASSERT_EQ(w.cols(), 1);
    EXPECT_DOUBLE_EQ(w(0, 0), 1.0);

    // with one key the weight is 1: Q1 = q + LN1(c) Wv Wo
    Eigen::RowVectorXd nc(d);
    const double mc = c.mean();
    const double vc = (c.array() - mc).square().mean();
    for (int k = 0; k < d; ++k) nc[k] = (c(0, k) - mc) / std::sqrt(vc + 1e-5) * b.ln1_gamma(0, k) + b.ln1_beta(0, k);
    const Eigen::RowVectorXd q1 = q.row(0) + nc * b.wv * b.wo;
    const double m1 = q1.mean();
    const double v1 = (q1.array() - m1).square().mean();
    Eigen::RowVectorXd n1(d);
    for (int k = 0; k < d; ++k) n1[k] = (q1[k] - m1) / std::sqrt(v1 + 1e-5) * b.ln2_gamma(0, k) + b.ln2_beta(0, k);
    const Eigen::RowVectorXd hid = (n1 * b.w1 + b.b1.row(0)).cwiseMax(0.0);
    const Eigen::RowVectorXd expected = q1 + hid * b.w2 + b.b2.row(0);
    expect_near(attention_block(b, q, c), expected, 1e-12);
}

TEST(Attention, DuplicateContextMatchesSingle) {
    const AttentionBlock b = busy_block(6, 8, 21);
    const MatX q = random_matrix(3, 6, 22);
    const MatX c = random_matrix(1, 6, 23);
    MatX cc(2, 6);
    cc << c, c;
    expect_near(attention_block(b, q, cc), attention_block(b, q, c), 1e-12);
}

TEST(Attention, MatchesMatrixOracle) {
    for (std::uint64_t seed : {31u, 32u, 33u}) {
        const AttentionBlock b = busy_block(8, 16, seed);
        const MatX q = random_matrix(5, 8, seed + 10);
        const MatX c = random_matrix(7, 8, seed + 20);
        expect_near(attention_block(b, q, c), matrix_of(oracle_block(b, rows_of(q), rows_of(c))), 1e-5);
        expect_near(attention_weights(b, q, c), matrix_of(oracle_weights(b, rows_of(q), rows_of(c))), 1e-5);
    }
}

TEST(Attention, WeightRowsSumToOne) {
    for (std::uint64_t seed = 40; seed < 50; ++seed) {
        const AttentionBlock b = busy_block(8, 4, seed);
        const MatX w = attention_weights(b, random_matrix(6, 8, seed + 1, 3.0), random_matrix(9, 8, seed + 2, 3.0));
        for (int i = 0; i < w.rows(); ++i) {
            EXPECT_NEAR(w.row(i).sum(), 1.0, 1e-6);
            EXPECT_GE(w.row(i).minCoeff(), 0.0);
        }
    }
}

TEST(Attention, ContextPermutationInvariance) {
    std::mt19937_64 rng(5);
    for (std::uint64_t seed = 60; seed < 65; ++seed) {
        const AttentionBlock b = busy_block(8, 12, seed);
        const MatX q = random_matrix(4, 8, seed + 1);
        const MatX c = random_matrix(6, 8, seed + 2);
        std::vector<int> perm{0, 1, 2, 3, 4, 5};
        std::shuffle(perm.begin(), perm.end(), rng);
        MatX pc(6, 8);
        for (int i = 0; i < 6; ++i) pc.row(i) = c.row(perm[i]);
        expect_near(attention_block(b, q, pc), attention_block(b, q, c), 1e-6);
    }
}

TEST(Attention, SelfAttentionPermutationEquivariance) {
    std::mt19937_64 rng(6);
    for (std::uint64_t seed = 70; seed < 75; ++seed) {
        const AttentionBlock b = busy_block(8, 12, seed);
        const MatX q = random_matrix(5, 8, seed + 1);
        std::vector<int> perm{0, 1, 2, 3, 4};
        std::shuffle(perm.begin(), perm.end(), rng);
        MatX pq(5, 8);
        for (int i = 0; i < 5; ++i) pq.row(i) = q.row(perm[i]);
        const MatX out = attention_block(b, q, q);
        const MatX pout = attention_block(b, pq, pq);
        for (int i = 0; i < 5; ++i)
            for (int k = 0; k < 8; ++k) EXPECT_NEAR(pout(i, k), out(perm[i], k), 1e-6);
    }
}

TEST(Attention, WidthMismatchThrows) {
    const AttentionBlock b = AttentionBlock::random(4, 4, 1);
    EXPECT_THROW(attention_block(b, MatX::Zero(2, 3), MatX::Zero(2, 4)), InvalidParameter);
    EXPECT_THROW(attention_block(b, MatX::Zero(2, 4), MatX::Zero(2, 5)), InvalidParameter);
}

// ---- predict_trajectory ----

TEST(PredictTrajectory, ZeroHeadGivesOrigin) {
    const QuerySet scene{random_matrix(4, 6, 1), {{0, 0}, {1, 0}, {0, 1}, {1, 1}}, 1, 1};
    const std::vector<AttentionBlock> blocks{busy_block(6, 8, 2)};
    const Trajectory t = predict_trajectory(random_matrix(3, 6, 3), scene, blocks, Affine::zeros(6, 2));
    ASSERT_EQ(t.size(), 3u);
    for (const Vec2 &p : t) EXPECT_EQ(p, Vec2::Zero());
}

TEST(PredictTrajectory, BiasOnlyHeadGivesStraightOffset) {
    const QuerySet scene{random_matrix(4, 6, 1), {{0, 0}, {1, 0}, {0, 1}, {1, 1}}, 1, 1};
    Affine head = Affine::zeros(6, 2);
    head.bias << 1.0, 0.0;
    const Trajectory t = predict_trajectory(random_matrix(6, 6, 4), scene, {busy_block(6, 8, 5)}, head);
    ASSERT_EQ(t.size(), 6u);
    for (const Vec2 &p : t) EXPECT_EQ(p, Vec2(1.0, 0.0));
}

TEST(PredictTrajectory, MatchesChainedOracle) {
    const QuerySet scene{random_matrix(4, 8, 81), {{0, 0}, {1, 0}, {0, 1}, {1, 1}}, 1, 1};
    const std::vector<AttentionBlock> blocks{busy_block(8, 10, 82), busy_block(8, 10, 83)};
    const MatX wp = random_matrix(6, 8, 84);
    const Affine head = random_affine(8, 2, 85);
    Rows q = rows_of(wp);
    for (const AttentionBlock &b : blocks) q = oracle_block(b, q, rows_of(scene.queries));
    const Rows out = mm(q, head.weight);
    const Trajectory t = predict_trajectory(wp, scene, blocks, head);
    for (int i = 0; i < 6; ++i) {
        EXPECT_NEAR(t[i].x(), out[i][0] + head.bias(0, 0), 1e-5);
        EXPECT_NEAR(t[i].y(), out[i][1] + head.bias(0, 1), 1e-5);
    }
}

// ---- mln_condition / predict_next_queries ----

TEST(Mln, ZeroMapsArePlainLayerNorm) {
    const QuerySet scene{random_matrix(5, 8, 91, 2.0), {}, 1, 1};
    const MlnMaps maps{Affine::zeros(12, 8), Affine::zeros(12, 8)};
    const QuerySet out = mln_condition(scene, line(6, 1.0, 0.2), maps);
    expect_near(out.queries, matrix_of(ln(rows_of(scene.queries), MatX::Ones(1, 8), MatX::Zero(1, 8))), 1e-12);
    for (int i = 0; i < out.size(); ++i) {
        EXPECT_LT(std::abs(out.queries.row(i).mean()), 1e-6);
        EXPECT_NEAR((out.queries.row(i).array() - out.queries.row(i).mean()).square().mean(), 1.0, 1e-4);
    }
}

TEST(Mln, ConstantQueryGivesBetaExactly) {
    QuerySet scene{MatX::Constant(3, 4, 2.5), {}, 1, 1};
    const MlnMaps maps{random_affine(4, 4, 1), random_affine(4, 4, 2)};
    const Trajectory traj{Vec2(1.0, 0.5), Vec2(2.0, -1.0)};
    const QuerySet out = mln_condition(scene, traj, maps);
    const MatX beta = maps.beta(flatten_trajectory(traj));
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 4; ++k) EXPECT_DOUBLE_EQ(out.queries(i, k), beta(0, k));
}

TEST(Mln, DifferentTrajectoriesCondition) {
    const QuerySet scene{random_matrix(4, 8, 3), {}, 1, 1};
    const MlnMaps maps{random_affine(12, 8, 4), Affine::zeros(12, 8)};
    const QuerySet a = mln_condition(scene, line(6, 1.0, 0.0), maps);
    const QuerySet b = mln_condition(scene, line(6, 1.0, 0.3), maps);
    EXPECT_GT((a.queries - b.queries).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(Mln, FlattenIsRowMajor) {
    const MatX f = flatten_trajectory({Vec2(1, 2), Vec2(3, 4)});
    ASSERT_EQ(f.rows(), 1);
    EXPECT_EQ(f, (MatX(1, 4) << 1, 2, 3, 4).finished());
}

TEST(PredictNextQueries, NoBlocksEqualsMln) {
    const QuerySet scene{random_matrix(4, 8, 5), {{0, 0}, {2, 0}, {0, 2}, {2, 2}}, 2, 2};
    const MlnMaps maps{random_affine(4, 8, 6), random_affine(4, 8, 7)};
    const Trajectory traj{Vec2(1, 0), Vec2(2, 0.1)};
    const QuerySet next = predict_next_queries(scene, traj, maps, {});
    EXPECT_EQ(next.queries, mln_condition(scene, traj, maps).queries);
    EXPECT_EQ(next.patch_origin, scene.patch_origin);
    EXPECT_EQ(next.patch_cells_x, 2);
}

TEST(PredictNextQueries, ZeroMapsReduceToLayerNormThenBlocks) {
    const QuerySet scene{random_matrix(4, 8, 8), {{0, 0}, {2, 0}, {0, 2}, {2, 2}}, 2, 2};
    const std::vector<AttentionBlock> blocks{busy_block(8, 6, 9)};
    const MlnMaps maps{Affine::zeros(4, 8), Affine::zeros(4, 8)};
    const QuerySet next = predict_next_queries(scene, {Vec2(1, 0), Vec2(2, 0)}, maps, blocks);
    const Rows normed = ln(rows_of(scene.queries), MatX::Ones(1, 8), MatX::Zero(1, 8));
    expect_near(next.queries, matrix_of(oracle_block(blocks[0], normed, normed)), 1e-9);
}

TEST(PredictNextQueries, MatchesChainedOracle) {
    const QuerySet scene{random_matrix(4, 8, 10), {{0, 0}, {2, 0}, {0, 2}, {2, 2}}, 2, 2};
    const std::vector<AttentionBlock> blocks{busy_block(8, 6, 11), busy_block(8, 6, 12)};
    const MlnMaps maps{random_affine(4, 8, 13), random_affine(4, 8, 14)};
    const Trajectory traj{Vec2(1.5, 0.2), Vec2(3.0, 0.5)};
    const double flat[4] = {1.5, 0.2, 3.0, 0.5};
    Rows q = ln(rows_of(scene.queries), MatX::Ones(1, 8), MatX::Zero(1, 8));
    for (int k = 0; k < 8; ++k) {
        double g = maps.gamma.bias(0, k), bt = maps.beta.bias(0, k);
        for (int j = 0; j < 4; ++j) {
            g += flat[j] * maps.gamma.weight(j, k);
            bt += flat[j] * maps.beta.weight(j, k);
        }
        for (auto &row : q) row[k] = row[k] * (1.0 + g) + bt;
    }
    for (const AttentionBlock &b : blocks) q = oracle_block(b, q, q);
    expect_near(predict_next_queries(scene, traj, maps, blocks).queries, matrix_of(q), 1e-5);
}

// ---- fuse_future_bev ----

namespace {

QuerySet patch_queries(const BevGrid &g, int n, int dim, std::uint64_t seed) {
    return extract_scene_queries(g, n, random_affine(g.channels(), dim, seed));
}

} // namespace

TEST(Fuse, ZeroUnprojIsIdentity) {
    const BevGrid g = random_grid(8, 2, 1);
    const QuerySet q = patch_queries(g, 4, 6, 2);
    const BevGrid out = fuse_future_bev(q, g, Affine::zeros(6, 4));
    EXPECT_EQ(out.features, g.features);
    EXPECT_EQ(out.weights, g.weights);
    EXPECT_EQ(out.spec, g.spec);
}

TEST(Fuse, SingleQueryTouchesOnePatch) {
    const BevGrid g = random_grid(8, 2, 3);
    QuerySet q = patch_queries(g, 4, 6, 4);
    q.queries.setZero();
    q.queries(5, 2) = 1.0; // patch (1, 1): cells x 2..3, y 2..3
    const BevGrid out = fuse_future_bev(q, g, Affine::random(6, 4, 5));
    for (int iy = 0; iy < 8; ++iy) {
        for (int ix = 0; ix < 8; ++ix) {
            const std::size_t c = g.spec.cell_index(ix, iy);
            const bool inside = ix >= 2 && ix < 4 && iy >= 2 && iy < 4;
            bool differs = false;
            for (int k = 0; k < 4; ++k) differs |= out.cell(c)[k] != g.cell(c)[k];
            EXPECT_EQ(differs, inside) << ix << "," << iy;
        }
    }
}

TEST(Fuse, MatchesScatterAddOracle) {
    const BevGrid g = random_grid(8, 3, 6);
    const QuerySet q = patch_queries(g, 2, 5, 7);
    const Affine unproj = random_affine(5, 6, 8);
    const BevGrid out = fuse_future_bev(q, g, unproj);
    std::vector<double> expected = g.features;
    for (int p = 0; p < q.size(); ++p) {
        std::vector<double> delta(6);
        for (int k = 0; k < 6; ++k) {
            delta[k] = unproj.bias(0, k);
            for (int j = 0; j < 5; ++j) delta[k] += q.queries(p, j) * unproj.weight(j, k);
        }
        for (int iy = q.patch_origin[p][1]; iy < q.patch_origin[p][1] + 4; ++iy)
            for (int ix = q.patch_origin[p][0]; ix < q.patch_origin[p][0] + 4; ++ix)
                for (int k = 0; k < 6; ++k) expected[(iy * 8 + ix) * 6 + k] += delta[k];
    }
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(out.features[i], expected[i], 1e-6);
    EXPECT_EQ(out.weights, g.weights);
}

TEST(Fuse, OriginOutsideGridThrows) {
    const BevGrid g = random_grid(8, 1, 9);
    QuerySet q = patch_queries(g, 2, 4, 10);
    q.patch_origin[3] = {6, 6};
    EXPECT_THROW(fuse_future_bev(q, g, Affine::zeros(4, 2)), InvalidParameter);
    q.patch_origin[3] = {-1, 0};
    EXPECT_THROW(fuse_future_bev(q, g, Affine::zeros(4, 2)), InvalidParameter);
}

TEST(Fuse, UnprojWidthMismatchThrows) {
    const BevGrid g = random_grid(8, 1, 9);
    EXPECT_THROW(fuse_future_bev(patch_queries(g, 2, 4, 10), g, Affine::zeros(4, 3)), InvalidParameter);
}

// ---- plan_loss ----

TEST(PlanLoss, PerfectPredictionIsZero) {
    const BevGrid g = random_grid(4, 1, 1);
    const PlanLoss l = plan_loss(line(6, 1, 0), line(6, 1, 0), g, g);
    EXPECT_EQ(l.total, 0.0);
    EXPECT_EQ(l.reg, 0.0);
    EXPECT_EQ(l.bev, 0.0);
}

TEST(PlanLoss, UnitForwardOffsetIsHalf) {
    const BevGrid g = random_grid(4, 1, 1);
    Trajectory shifted = line(6, 1, 0.3);
    for (Vec2 &p : shifted) p.x() += 1.0;
    const PlanLoss l = plan_loss(shifted, line(6, 1, 0.3), g, g);
    EXPECT_DOUBLE_EQ(l.reg, 0.5);
    EXPECT_DOUBLE_EQ(l.total, 0.5);
}

TEST(PlanLoss, ConstantBevOffsetOfTwoIsFour) {
    const BevGrid g = random_grid(4, 2, 2);
    BevGrid h = g;
    for (double &f : h.features) f += 2.0;
    const PlanLoss l = plan_loss(line(6, 1, 0), line(6, 1, 0), h, g);
    EXPECT_DOUBLE_EQ(l.bev, 4.0);
    EXPECT_DOUBLE_EQ(l.total, 4.0);
}

TEST(PlanLoss, LengthMismatchThrows) {
    const BevGrid g = random_grid(4, 1, 1);
    EXPECT_THROW(plan_loss(line(5, 1, 0), line(6, 1, 0), g, g), InvalidParameter);
}

// ---- end-to-end model ----

namespace {

PlannerConfig toy_config() {
    PlannerConfig c;
    c.patches_per_side = 2; // 4 queries
    c.query_dim = 4;
    c.horizon = 3;
    c.scene_blocks = 1;
    c.waypoint_blocks = 1;
    c.future_blocks = 1;
    c.ff_hidden = 6;
    return c;
}

PlannerModel toy_model(std::uint64_t seed) {
    PlannerModel m = PlannerModel::random(toy_config(), 2, seed);
    // non-zero MLN maps and LN parameters so every tensor has gradient signal
    std::uint64_t s = seed * 1000;
    m.visit([&](const std::string &name, MatX &p) {
        if (name.find("mln") != std::string::npos || name.find("gamma") != std::string::npos ||
            name.find("beta") != std::string::npos || name.find(".b") != std::string::npos) {
            p += random_matrix(int(p.rows()), int(p.cols()), ++s, 0.2);
        }
    });
    return m;
}

PlanSample toy_sample(std::uint64_t seed) {
    BevGrid bev(grid_spec(4), 1);
    BevGrid next(grid_spec(4), 1);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    for (double &f : bev.features) f = n(rng);
    for (double &f : next.features) f = n(rng);
    return {bev, next, {Vec2(1.3, 0.1), Vec2(2.4, 0.3), Vec2(3.9, 0.2)}};
}

double sample_loss(const PlannerModel &m, const PlanSample &s) {
    const PlanOutput out = plan_forward(m, s.bev);
    return plan_loss(out.trajectory, s.trajectory, out.future_bev, s.future_bev).total;
}

} // namespace

TEST(Planner, ForwardShapes) {
    const PlannerModel m = PlannerModel::random({}, 8, 1);
    BevSpec spec;
    spec.nx = spec.ny = 16;
    spec.z_bins = 2;
    BevGrid bev(spec, 4);
    const PlanOutput out = plan_forward(m, bev);
    EXPECT_EQ(out.scene.size(), 16);
    EXPECT_EQ(out.scene.dim(), 32);
    EXPECT_EQ(out.trajectory.size(), 6u);
    EXPECT_EQ(out.next.size(), 16);
    EXPECT_EQ(out.future_bev.features.size(), bev.features.size());
}

TEST(Planner, ForwardMatchesComponents) {
    const PlannerModel m = toy_model(3);
    const PlanSample s = toy_sample(4);
    const PlanOutput out = plan_forward(m, s.bev);
    QuerySet scene = extract_scene_queries(s.bev, 2, m.scene_proj);
    for (const AttentionBlock &b : m.scene_blocks) scene.queries = attention_block(b, scene.queries, scene.queries);
    expect_near(out.scene.queries, scene.queries, 1e-12);
    const Trajectory traj = predict_trajectory(m.waypoint_queries, scene, m.waypoint_blocks, m.head);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR((out.trajectory[i] - traj[i]).norm(), 0.0, 1e-12);
    const QuerySet next = predict_next_queries(scene, traj, m.mln, m.future_blocks);
    expect_near(out.next.queries, next.queries, 1e-12);
    const BevGrid fused = fuse_future_bev(next, s.bev, m.unproj);
    for (std::size_t i = 0; i < fused.features.size(); ++i) EXPECT_NEAR(out.future_bev.features[i], fused.features[i], 1e-12);
}

TEST(Planner, GradientsMatchFiniteDifferences) {
    for (std::uint64_t seed : {1u, 2u}) {
        PlannerModel m = toy_model(seed);
        const PlanSample s = toy_sample(seed + 10);
        const PlanGradient g = plan_gradients(m, s);
        EXPECT_NEAR(g.loss.total, sample_loss(m, s), 1e-12);

        int checked = 0, bad = 0;
        std::size_t tensor = 0;
        std::vector<MatX *> params;
        std::vector<std::string> names;
        m.visit([&](const std::string &name, MatX &p) {
            params.push_back(&p);
            names.push_back(name);
        });
        ASSERT_EQ(params.size(), g.grads.size());
        for (tensor = 0; tensor < params.size(); ++tensor) {
            MatX &p = *params[tensor];
            ASSERT_EQ(g.grads[tensor].rows(), p.rows()) << names[tensor];
            ASSERT_EQ(g.grads[tensor].cols(), p.cols()) << names[tensor];
            for (Eigen::Index i = 0; i < p.size(); ++i) {
                const double h = 1e-6;
                const double orig = p.data()[i];
                p.data()[i] = orig + h;
                const double up = sample_loss(m, s);
                p.data()[i] = orig - h;
                const double down = sample_loss(m, s);
                p.data()[i] = orig;
                const double fd = (up - down) / (2 * h);
                const double an = g.grads[tensor].data()[i];
                const double scale = std::max({std::abs(fd), std::abs(an), 1e-4});
                ++checked;
                if (std::abs(fd - an) / scale > 1e-3) {
                    ++bad;
                    ADD_FAILURE() << names[tensor] << "[" << i << "] analytic " << an << " fd " << fd;
                }
            }
        }
        EXPECT_EQ(checked, static_cast<int>(m.parameter_count()));
        EXPECT_EQ(bad, 0);
    }
}

TEST(Planner, LossDecomposesExactly) {
    const PlannerModel m = toy_model(5);
    const PlanSample s = toy_sample(6);
    const PlanGradient g = plan_gradients(m, s);
    EXPECT_EQ(g.loss.total, g.loss.reg + g.loss.bev);
    const PlanOutput out = plan_forward(m, s.bev);
    const PlanLoss l = plan_loss(out.trajectory, s.trajectory, out.future_bev, s.future_bev);
    EXPECT_NEAR(l.reg, g.loss.reg, 1e-12);
    EXPECT_NEAR(l.bev, g.loss.bev, 1e-12);
}

TEST(Planner, TrainingReducesLoss) {
    PlannerModel m = toy_model(7);
    std::vector<PlanSample> samples{toy_sample(8), toy_sample(9)};
    PlanTrainOptions opt;
    opt.steps = 150;
    opt.step_size = 1e-2;
    opt.batch = 2;
    const auto trace = train_planner(m, samples, opt);
    ASSERT_EQ(trace.size(), 150u);
    EXPECT_LT(trace.back().loss.total, 0.5 * trace.front().loss.total);
}

TEST(Planner, TrainingRejectsEmptySamples) {
    PlannerModel m = toy_model(1);
    EXPECT_THROW(train_planner(m, {}), InvalidParameter);
}

TEST(Planner, CheckpointRoundTrip) {
    const PlannerModel m = toy_model(11);
    std::stringstream ss;
    write_planner(ss, m);
    const PlannerModel r = read_planner(ss);
    EXPECT_EQ(r.bev_channels, m.bev_channels);
    EXPECT_EQ(r.config.horizon, m.config.horizon);
    std::vector<MatX> a, b;
    m.visit([&](const std::string &, const MatX &p) { a.push_back(p); });
    r.visit([&](const std::string &, const MatX &p) { b.push_back(p); });
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Planner, CheckpointRejectsCorruption) {
    const PlannerModel m = toy_model(12);
    std::stringstream ss;
    write_planner(ss, m);
    std::string bytes = ss.str();
    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    std::istringstream in1(bad_magic);
    EXPECT_THROW(read_planner(in1), FormatError);
    std::istringstream in2(bytes.substr(0, bytes.size() - 9));
    EXPECT_THROW(read_planner(in2), FormatError);
}

TEST(Planner, TrajectoryCsv) {
    std::ostringstream out;
    write_trajectory_csv(out, {Vec2(1.0, 0.5), Vec2(2.0, -0.25)});
    EXPECT_EQ(out.str(), "t,x,y\n1,1,0.5\n2,2,-0.25\n");
}
