#include "worldkit/plan_world.hpp"

#include "worldkit/autodiff.hpp"
#include "worldkit/binary_io.hpp"
#include "worldkit/error.hpp"
#include "worldkit/metrics.hpp"
#include "worldkit/optim.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <random>

namespace worldkit {

using ad::Tape;
using ad::Var;

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

MatX bev_matrix(const BevGrid &bev) {
    return Eigen::Map<const RowMajor>(bev.features.data(), static_cast<Eigen::Index>(bev.spec.cells()),
                                      bev.channels());
}

void store_bev_matrix(BevGrid &bev, const MatX &m) {
    Eigen::Map<RowMajor>(bev.features.data(), m.rows(), m.cols()) = m;
}

MatX xavier(int in, int out, std::mt19937_64 &rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> u(-a, a);
    MatX w(in, out);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
    return w;
}

Var affine(Tape &t, Var x, const Affine &a) {
    return t.add_row(t.matmul(x, t.param(a.weight)), t.param(a.bias));
}

Var layer_norm(Tape &t, Var x, const MatX &gamma, const MatX &beta) {
    return t.add_row(t.mul_row(t.layer_norm_rows(x, kLayerNormEpsilon), t.param(gamma)), t.param(beta));
}

Var attention(Tape &t, const AttentionBlock &b, Var q, Var c, Var *weights = nullptr) {
    const int d = b.dim();
    if (t.value(q).cols() != d || t.value(c).cols() != d) throw InvalidParameter("attention_block: width mismatch");
    if (t.value(c).rows() == 0) throw InvalidParameter("attention_block: empty context");
    const Var hq = layer_norm(t, q, b.ln1_gamma, b.ln1_beta);
    const Var hc = q.id == c.id ? hq : layer_norm(t, c, b.ln1_gamma, b.ln1_beta);
    const Var qq = t.matmul(hq, t.param(b.wq));
    const Var kk = t.matmul(hc, t.param(b.wk));
    const Var vv = t.matmul(hc, t.param(b.wv));
    const Var a = t.softmax_rows(t.scale(t.matmul(qq, t.transpose(kk)), 1.0 / std::sqrt(static_cast<double>(d))));
    if (weights) *weights = a;
    const Var q1 = t.add(q, t.matmul(t.matmul(a, vv), t.param(b.wo)));
    const Var h = t.relu(t.add_row(t.matmul(layer_norm(t, q1, b.ln2_gamma, b.ln2_beta), t.param(b.w1)), t.param(b.b1)));
    return t.add(q1, t.add_row(t.matmul(h, t.param(b.w2)), t.param(b.b2)));
}

Var attention_stack(Tape &t, const std::vector<AttentionBlock> &blocks, Var q, Var c, bool self) {
    for (const AttentionBlock &b : blocks) q = attention(t, b, q, self ? q : c);
    return q;
}

struct PatchLayout {
    int n = 0, cx = 0, cy = 0;
    std::vector<std::array<int, 2>> origins;
};

PatchLayout patch_layout(const BevSpec &spec, int n) {
    if (n < 1 || spec.nx % n != 0 || spec.ny % n != 0) {
        throw InvalidParameter("BEV grid " + std::to_string(spec.nx) + "x" + std::to_string(spec.ny) +
                               " is not divisible into " + std::to_string(n) + "x" + std::to_string(n) + " patches");
    }
    PatchLayout p{n, spec.nx / n, spec.ny / n, {}};
    for (int py = 0; py < n; ++py)
        for (int px = 0; px < n; ++px) p.origins.push_back({px * p.cx, py * p.cy});
    return p;
}

QuerySet scene_queries(Tape &t, const BevGrid &bev, int n, const Affine &proj, Var &out) {
    const PatchLayout layout = patch_layout(bev.spec, n);
    if (proj.in() != bev.channels()) throw InvalidParameter("extract_scene_queries: projection width mismatch");
    const MatX f = bev_matrix(bev);
    MatX pooled = MatX::Zero(n * n, bev.channels());
    const double inv = 1.0 / static_cast<double>(layout.cx * layout.cy);
    for (int q = 0; q < n * n; ++q) {
        const auto [ox, oy] = layout.origins[q];
        for (int iy = oy; iy < oy + layout.cy; ++iy)
            for (int ix = ox; ix < ox + layout.cx; ++ix) pooled.row(q) += f.row(bev.spec.cell_index(ix, iy));
        pooled.row(q) *= inv;
    }
    out = affine(t, t.constant(std::move(pooled)), proj);
    QuerySet qs;
    qs.queries = t.value(out);
    qs.patch_origin = layout.origins;
    qs.patch_cells_x = layout.cx;
    qs.patch_cells_y = layout.cy;
    return qs;
}

Var mln(Tape &t, Var scene, Var traj, const MlnMaps &m) {
    const Var flat = t.flatten(traj);
    const Var gamma = t.add_scalar(affine(t, flat, m.gamma), 1.0);
    const Var beta = affine(t, flat, m.beta);
    if (t.value(gamma).cols() != t.value(scene).cols()) throw InvalidParameter("mln_condition: width mismatch");
    return t.add_row(t.mul_row(t.layer_norm_rows(scene, kLayerNormEpsilon), gamma), beta);
}

MatX scatter_matrix(const QuerySet &next, const BevSpec &spec) {
    MatX s = MatX::Zero(static_cast<Eigen::Index>(spec.cells()), next.size());
    if (static_cast<int>(next.patch_origin.size()) != next.size()) {
        throw InvalidParameter("fuse_future_bev: patch origins do not match the queries");
    }
    for (int q = 0; q < next.size(); ++q) {
        const auto [ox, oy] = next.patch_origin[q];
        if (ox < 0 || oy < 0 || ox + next.patch_cells_x > spec.nx || oy + next.patch_cells_y > spec.ny ||
            next.patch_cells_x < 1 || next.patch_cells_y < 1) {
            throw InvalidParameter("fuse_future_bev: patch origin outside the grid");
        }
        for (int iy = oy; iy < oy + next.patch_cells_y; ++iy)
            for (int ix = ox; ix < ox + next.patch_cells_x; ++ix) s(spec.cell_index(ix, iy), q) = 1.0;
    }
    return s;
}

Var fuse(Tape &t, const QuerySet &layout, Var next, const BevGrid &current, const Affine &unproj) {
    if (unproj.out() != current.channels()) throw InvalidParameter("fuse_future_bev: unproj width mismatch");
    const MatX s = scatter_matrix(layout, current.spec);
    return t.add(t.constant(bev_matrix(current)), t.left_multiply(s, affine(t, next, unproj)));
}

MatX trajectory_matrix(const Trajectory &traj) {
    MatX m(static_cast<Eigen::Index>(traj.size()), 2);
    for (std::size_t i = 0; i < traj.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = traj[i].transpose();
    return m;
}

Trajectory to_trajectory(const MatX &m) {
    Trajectory traj(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) traj[static_cast<std::size_t>(i)] = m.row(i).transpose();
    return traj;
}

struct Graph {
    Var scene, traj, next, bev;
    QuerySet scene_layout;
};

Graph build(Tape &t, const PlannerModel &m, const BevGrid &bev) {
    Graph g;
    Var raw;
    g.scene_layout = scene_queries(t, bev, m.config.patches_per_side, m.scene_proj, raw);
    g.scene = attention_stack(t, m.scene_blocks, raw, raw, true);
    const Var wp = attention_stack(t, m.waypoint_blocks, t.param(m.waypoint_queries), g.scene, false);
    g.traj = affine(t, wp, m.head);
    g.next = attention_stack(t, m.future_blocks, mln(t, g.scene, g.traj, m.mln), Var{}, true);
    g.bev = fuse(t, g.scene_layout, g.next, bev, m.unproj);
    return g;
}

} // namespace

Affine Affine::zeros(int in, int out) { return {MatX::Zero(in, out), MatX::Zero(1, out)}; }

Affine Affine::random(int in, int out, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return {xavier(in, out, rng), MatX::Zero(1, out)};
}

MatX Affine::operator()(const MatX &x) const {
    if (x.cols() != in()) throw InvalidParameter("affine: input width mismatch");
    return (x * weight).rowwise() + bias.row(0);
}

AttentionBlock AttentionBlock::random(int dim, int ff_hidden, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    AttentionBlock b;
    b.ln1_gamma = MatX::Ones(1, dim);
    b.ln1_beta = MatX::Zero(1, dim);
    b.wq = xavier(dim, dim, rng);
    b.wk = xavier(dim, dim, rng);
    b.wv = xavier(dim, dim, rng);
    b.wo = xavier(dim, dim, rng);
    b.ln2_gamma = MatX::Ones(1, dim);
    b.ln2_beta = MatX::Zero(1, dim);
    b.w1 = xavier(dim, ff_hidden, rng);
    b.b1 = MatX::Zero(1, ff_hidden);
    b.w2 = xavier(ff_hidden, dim, rng);
    b.b2 = MatX::Zero(1, dim);
    return b;
}

QuerySet extract_scene_queries(const BevGrid &bev, int patches_per_side, const Affine &proj) {
    Tape t;
    Var out;
    return scene_queries(t, bev, patches_per_side, proj, out);
}

MatX attention_block(const AttentionBlock &block, const MatX &queries, const MatX &context) {
    Tape t;
    return t.value(attention(t, block, t.constant(queries), t.constant(context)));
}

MatX attention_weights(const AttentionBlock &block, const MatX &queries, const MatX &context) {
    Tape t;
    Var w;
    attention(t, block, t.constant(queries), t.constant(context), &w);
    return t.value(w);
}

Trajectory predict_trajectory(const MatX &waypoint_queries, const QuerySet &scene,
                              const std::vector<AttentionBlock> &blocks, const Affine &head) {
    Tape t;
    const Var wp = attention_stack(t, blocks, t.constant(waypoint_queries), t.constant(scene.queries), false);
    const Var out = affine(t, wp, head);
    if (t.value(out).cols() != 2) throw InvalidParameter("predict_trajectory: head must map to 2 outputs");
    return to_trajectory(t.value(out));
}

MatX flatten_trajectory(const Trajectory &traj) {
    MatX row(1, 2 * static_cast<Eigen::Index>(traj.size()));
    for (std::size_t i = 0; i < traj.size(); ++i) {
        row(0, 2 * i) = traj[i].x();
        row(0, 2 * i + 1) = traj[i].y();
    }
    return row;
}

QuerySet mln_condition(const QuerySet &scene, const Trajectory &traj, const MlnMaps &maps) {
    Tape t;
    QuerySet out = scene;
    out.queries = t.value(mln(t, t.constant(scene.queries), t.constant(trajectory_matrix(traj)), maps));
    return out;
}

QuerySet predict_next_queries(const QuerySet &scene, const Trajectory &traj, const MlnMaps &maps,
                              const std::vector<AttentionBlock> &blocks) {
    Tape t;
    QuerySet out = scene;
    const Var conditioned = mln(t, t.constant(scene.queries), t.constant(trajectory_matrix(traj)), maps);
    out.queries = t.value(attention_stack(t, blocks, conditioned, Var{}, true));
    return out;
}

BevGrid fuse_future_bev(const QuerySet &next, const BevGrid &current, const Affine &unproj) {
    Tape t;
    BevGrid out = current;
    store_bev_matrix(out, t.value(fuse(t, next, t.constant(next.queries), current, unproj)));
    return out;
}

PlanLoss plan_loss(const Trajectory &pred, const Trajectory &gt, const BevGrid &bev_pred, const BevGrid &bev_target) {
    if (pred.size() != gt.size()) throw InvalidParameter("plan_loss: trajectory length mismatch");
    PlanLoss l;
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) sum += (pred[i] - gt[i]).cwiseAbs().sum();
    l.reg = pred.empty() ? 0.0 : sum / (2.0 * static_cast<double>(pred.size()));
    l.bev = bev_l2_loss(bev_pred, bev_target);
    l.total = l.reg + l.bev;
    return l;
}

PlannerModel PlannerModel::random(const PlannerConfig &config, int bev_channels, std::uint64_t seed) {
    if (config.patches_per_side < 1 || config.query_dim < 1 || config.horizon < 1 || config.ff_hidden < 1 ||
        bev_channels < 1) {
        throw InvalidParameter("planner config sizes must be positive");
    }
    std::mt19937_64 rng(seed);
    const int d = config.query_dim;
    PlannerModel m;
    m.config = config;
    m.bev_channels = bev_channels;
    m.scene_proj = Affine::random(bev_channels, d, rng());
    for (int i = 0; i < config.scene_blocks; ++i) m.scene_blocks.push_back(AttentionBlock::random(d, config.ff_hidden, rng()));
    std::normal_distribution<double> normal(0.0, 1.0);
    m.waypoint_queries.resize(config.horizon, d);
    for (Eigen::Index i = 0; i < m.waypoint_queries.size(); ++i) m.waypoint_queries.data()[i] = 0.02 * normal(rng);
    for (int i = 0; i < config.waypoint_blocks; ++i) {
        m.waypoint_blocks.push_back(AttentionBlock::random(d, config.ff_hidden, rng()));
    }
    m.head = Affine::random(d, 2, rng());
    m.mln = {Affine::zeros(2 * config.horizon, d), Affine::zeros(2 * config.horizon, d)};
    for (int i = 0; i < config.future_blocks; ++i) {
        m.future_blocks.push_back(AttentionBlock::random(d, config.ff_hidden, rng()));
    }
    m.unproj = Affine::random(d, bev_channels, rng());
    m.unproj.weight *= 0.1; // start close to the residual identity
    return m;
}

namespace {

template <typename Model, typename Fn>
void visit_model(Model &m, Fn &&fn) {
    auto affine_visit = [&](const std::string &name, auto &a) {
        fn(name + ".weight", a.weight);
        fn(name + ".bias", a.bias);
    };
    auto block_visit = [&](const std::string &name, auto &b) {
        fn(name + ".ln1_gamma", b.ln1_gamma);
        fn(name + ".ln1_beta", b.ln1_beta);
        fn(name + ".wq", b.wq);
        fn(name + ".wk", b.wk);
        fn(name + ".wv", b.wv);
        fn(name + ".wo", b.wo);
        fn(name + ".ln2_gamma", b.ln2_gamma);
        fn(name + ".ln2_beta", b.ln2_beta);
        fn(name + ".w1", b.w1);
        fn(name + ".b1", b.b1);
        fn(name + ".w2", b.w2);
        fn(name + ".b2", b.b2);
    };
    affine_visit("scene_proj", m.scene_proj);
    for (std::size_t i = 0; i < m.scene_blocks.size(); ++i) block_visit("scene." + std::to_string(i), m.scene_blocks[i]);
    fn("waypoint_queries", m.waypoint_queries);
    for (std::size_t i = 0; i < m.waypoint_blocks.size(); ++i) {
        block_visit("waypoint." + std::to_string(i), m.waypoint_blocks[i]);
    }
    affine_visit("head", m.head);
    affine_visit("mln.gamma", m.mln.gamma);
    affine_visit("mln.beta", m.mln.beta);
    for (std::size_t i = 0; i < m.future_blocks.size(); ++i) block_visit("future." + std::to_string(i), m.future_blocks[i]);
    affine_visit("unproj", m.unproj);
}

} // namespace

void PlannerModel::visit(const std::function<void(const std::string &, MatX &)> &fn) { visit_model(*this, fn); }

void PlannerModel::visit(const std::function<void(const std::string &, const MatX &)> &fn) const {
    visit_model(*this, fn);
}

std::size_t PlannerModel::parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string &, const MatX &p) { n += static_cast<std::size_t>(p.size()); });
    return n;
}

PlanOutput plan_forward(const PlannerModel &model, const BevGrid &bev) {
    Tape t;
    const Graph g = build(t, model, bev);
    PlanOutput out;
    out.scene = g.scene_layout;
    out.scene.queries = t.value(g.scene);
    out.trajectory = to_trajectory(t.value(g.traj));
    out.next = g.scene_layout;
    out.next.queries = t.value(g.next);
    out.future_bev = bev;
    store_bev_matrix(out.future_bev, t.value(g.bev));
    return out;
}

PlanGradient plan_gradients(const PlannerModel &model, const PlanSample &sample) {
    if (static_cast<int>(sample.trajectory.size()) != model.config.horizon) {
        throw InvalidParameter("plan sample trajectory length differs from the planner horizon");
    }
    if (sample.future_bev.features.size() != sample.bev.features.size()) {
        throw InvalidParameter("plan sample BEV grids differ in size");
    }
    Tape t;
    const Graph g = build(t, model, sample.bev);
    const Var reg = t.mean_abs_diff(g.traj, t.constant(trajectory_matrix(sample.trajectory)));
    const Var bev = t.mse(g.bev, t.constant(bev_matrix(sample.future_bev)));
    const Var total = t.add(reg, bev);
    t.backward(total);
    PlanGradient out;
    out.loss.reg = t.value(reg)(0, 0);
    out.loss.bev = t.value(bev)(0, 0);
    out.loss.total = t.value(total)(0, 0);
    model.visit([&](const std::string &, const MatX &p) { out.grads.push_back(t.param_grad(p)); });
    return out;
}

namespace {

VecX flatten_model(const PlannerModel &m) {
    VecX flat(static_cast<Eigen::Index>(m.parameter_count()));
    Eigen::Index at = 0;
    m.visit([&](const std::string &, const MatX &p) {
        flat.segment(at, p.size()) = p.reshaped();
        at += p.size();
    });
    return flat;
}

void unflatten_model(PlannerModel &m, const VecX &flat) {
    Eigen::Index at = 0;
    m.visit([&](const std::string &, MatX &p) {
        p.reshaped() = flat.segment(at, p.size());
        at += p.size();
    });
}

} // namespace

std::vector<PlanTrainStep> train_planner(PlannerModel &model, const std::vector<PlanSample> &samples,
                                         const PlanTrainOptions &opt) {
    if (samples.empty()) throw InvalidParameter("train_planner: no samples");
    if (opt.batch < 1) throw InvalidParameter("train_planner: batch must be positive");
    OptimState state;
    state.options.step_size = opt.step_size;
    std::vector<PlanTrainStep> trace;
    trace.reserve(static_cast<std::size_t>(std::max(0, opt.steps)));
    std::size_t cursor = 0;
    const std::size_t n = model.parameter_count();
    for (int step = 0; step < opt.steps; ++step) {
        VecX grad = VecX::Zero(static_cast<Eigen::Index>(n));
        PlanTrainStep rec;
        const double inv = 1.0 / static_cast<double>(opt.batch);
        for (int b = 0; b < opt.batch; ++b) {
            const PlanGradient pg = plan_gradients(model, samples[cursor]);
            cursor = (cursor + 1) % samples.size();
            rec.loss.total += inv * pg.loss.total;
            rec.loss.reg += inv * pg.loss.reg;
            rec.loss.bev += inv * pg.loss.bev;
            Eigen::Index at = 0;
            for (const MatX &g : pg.grads) {
                grad.segment(at, g.size()) += inv * g.reshaped();
                at += g.size();
            }
        }
        trace.push_back(rec);
        VecX params = flatten_model(model);
        adam_update(params, grad, state);
        unflatten_model(model, params);
    }
    return trace;
}

double mean_plan_l2(const PlannerModel &model, const std::vector<PlanSample> &samples) {
    if (samples.empty()) throw InvalidParameter("mean_plan_l2: no samples");
    double sum = 0.0;
    for (const PlanSample &s : samples) sum += l2_error(plan_forward(model, s.bev).trajectory, s.trajectory);
    return sum / static_cast<double>(samples.size());
}

void write_trajectory_csv(std::ostream &out, const Trajectory &traj) {
    out << "t,x,y\n" << std::setprecision(10);
    for (std::size_t i = 0; i < traj.size(); ++i) out << i + 1 << ',' << traj[i].x() << ',' << traj[i].y() << '\n';
}

void write_planner(std::ostream &out, const PlannerModel &model) {
    io::write_magic(out, "PLNW");
    io::write_u32(out, 1);
    const PlannerConfig &c = model.config;
    for (const int v : {c.patches_per_side, c.query_dim, c.horizon, c.scene_blocks, c.waypoint_blocks, c.future_blocks,
                        c.ff_hidden}) {
        io::write_u32(out, static_cast<std::uint32_t>(v));
    }
    io::write_u32(out, static_cast<std::uint32_t>(model.bev_channels));
    std::uint32_t count = 0;
    model.visit([&](const std::string &, const MatX &) { ++count; });
    io::write_u32(out, count);
    model.visit([&](const std::string &name, const MatX &p) {
        io::write_u32(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        io::write_u32(out, static_cast<std::uint32_t>(p.rows()));
        io::write_u32(out, static_cast<std::uint32_t>(p.cols()));
    });
    model.visit([&](const std::string &, const MatX &p) {
        for (Eigen::Index r = 0; r < p.rows(); ++r)
            for (Eigen::Index c2 = 0; c2 < p.cols(); ++c2) io::write_le(out, p(r, c2));
    });
}

PlannerModel read_planner(std::istream &in) {
    io::expect_magic(in, "PLNW");
    if (io::read_u32(in) != 1) throw FormatError("unsupported PLNW version");
    PlannerConfig c;
    for (int *v : {&c.patches_per_side, &c.query_dim, &c.horizon, &c.scene_blocks, &c.waypoint_blocks, &c.future_blocks,
                   &c.ff_hidden}) {
        *v = static_cast<int>(io::read_u32(in));
        if (*v > 4096) throw FormatError("PLNW config value out of range");
    }
    const auto channels = static_cast<int>(io::read_u32(in));
    if (channels < 1 || channels > 1 << 16) throw FormatError("PLNW channel count out of range");
    PlannerModel m;
    try {
        m = PlannerModel::random(c, channels, 0);
    } catch (const InvalidParameter &e) {
        throw FormatError(std::string("PLNW config invalid: ") + e.what());
    }
    const std::uint32_t count = io::read_u32(in);
    std::vector<std::pair<std::string, std::array<std::uint32_t, 2>>> manifest;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t len = io::read_u32(in);
        if (len > 256) throw FormatError("PLNW tensor name too long");
        std::string name(len, '\0');
        if (!in.read(name.data(), len)) throw FormatError("unexpected end of binary stream");
        const std::uint32_t rows = io::read_u32(in);
        const std::uint32_t cols = io::read_u32(in);
        manifest.push_back({name, {rows, cols}});
    }
    std::size_t idx = 0;
    m.visit([&](const std::string &name, MatX &p) {
        if (idx >= manifest.size() || manifest[idx].first != name ||
            manifest[idx].second[0] != static_cast<std::uint32_t>(p.rows()) ||
            manifest[idx].second[1] != static_cast<std::uint32_t>(p.cols())) {
            throw FormatError("PLNW manifest does not match the config at tensor " + name);
        }
        ++idx;
    });
    if (idx != manifest.size()) throw FormatError("PLNW manifest has extra tensors");
    m.visit([&](const std::string &, MatX &p) {
        for (Eigen::Index r = 0; r < p.rows(); ++r)
            for (Eigen::Index c2 = 0; c2 < p.cols(); ++c2) p(r, c2) = io::read_le<double>(in);
    });
    return m;
}

void save_planner(const std::filesystem::path &path, const PlannerModel &model) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open " + path.string() + " for writing");
    write_planner(out, model);
}

PlannerModel load_planner(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return read_planner(in);
}

} // namespace worldkit
