#include "worldkit/flow_world.hpp"

#include "worldkit/binary_io.hpp"
#include "worldkit/error.hpp"
#include "worldkit/optim.hpp"

#include <cmath>
#include <fstream>
#include <random>

namespace worldkit {

FlowHead FlowHead::zeros(int input_dim, int hidden) {
    if (input_dim < 1 || hidden < 1) throw InvalidParameter("FlowHead dimensions must be >= 1");
    return {MatX::Zero(hidden, input_dim), VecX::Zero(hidden), MatX::Zero(3, hidden), VecX::Zero(3)};
}

FlowHead FlowHead::random(int input_dim, int hidden, std::uint64_t seed) {
    FlowHead head = zeros(input_dim, hidden);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    const double s1 = std::sqrt(2.0 / input_dim);
    const double s2 = 0.1 / std::sqrt(static_cast<double>(hidden));
    for (Eigen::Index i = 0; i < head.w1.size(); ++i) head.w1.data()[i] = s1 * n(rng);
    for (Eigen::Index i = 0; i < head.w2.size(); ++i) head.w2.data()[i] = s2 * n(rng);
    return head;
}

Vec3 FlowHead::operator()(const VecX &feature) const {
    if (feature.size() != input_dim()) throw InvalidParameter("FlowHead: feature width mismatch");
    const VecX h = (w1 * feature + b1).cwiseMax(0.0);
    return w2 * h + b2;
}

std::size_t FlowHead::parameter_count() const {
    return static_cast<std::size_t>(w1.size() + b1.size() + w2.size() + b2.size());
}

VecX FlowHead::flatten() const {
    VecX flat(parameter_count());
    Eigen::Index o = 0;
    auto put_matrix = [&](const MatX &m) {
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) flat[o++] = m(r, c);
    };
    put_matrix(w1);
    flat.segment(o, b1.size()) = b1;
    o += b1.size();
    put_matrix(w2);
    flat.segment(o, b2.size()) = b2;
    return flat;
}

void FlowHead::unflatten(const VecX &flat) {
    if (static_cast<std::size_t>(flat.size()) != parameter_count()) {
        throw InvalidParameter("FlowHead::unflatten: wrong parameter count");
    }
    Eigen::Index o = 0;
    auto take_matrix = [&](MatX &m) {
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = flat[o++];
    };
    take_matrix(w1);
    b1 = flat.segment(o, b1.size());
    o += b1.size();
    take_matrix(w2);
    b2 = flat.segment(o, b2.size());
}

FlowField predict_flow(const FlowHead &head, const GaussianSet &set) {
    if (head.input_dim() != set.feature_dim()) throw InvalidParameter("predict_flow: feature width mismatch");
    FlowField flow(set.size());
    for (std::size_t k = 0; k < set.size(); ++k) flow[k] = head(set[k].feature);
    return flow;
}

GaussianSet apply_flow(const GaussianSet &set, const FlowField &flow) {
    if (flow.size() != set.size()) throw InvalidParameter("flow length does not match the Gaussian count");
    GaussianSet out = set;
    for (std::size_t k = 0; k < set.size(); ++k) out[k].mean += flow[k];
    return out;
}

GaussianSet propagate_gaussians(const GaussianSet &set, const FlowField &flow, const Pose &next_from_current) {
    return transform_gaussian_set(apply_flow(set, flow), next_from_current);
}

BevGrid predict_future_latent(const GaussianSet &set, const FlowHead &head, const Pose &next_from_current,
                              const BevSpec &spec) {
    return rasterize_bev(propagate_gaussians(set, predict_flow(head, set), next_from_current), spec);
}

namespace {

struct PropagatedLoss {
    FlowLoss loss;
    std::vector<Vec3> mean_grad; // dL/dμ' of the propagated set
};

PropagatedLoss propagated_loss(const GaussianSet &moved, const std::vector<FlowView> &views,
                               const BevGrid &target_bev, const FlowLossOptions &opt, bool with_grad) {
    PropagatedLoss out;
    if (with_grad) out.mean_grad.assign(moved.size(), Vec3::Zero());
    const double view_scale = views.empty() ? 0.0 : 1.0 / static_cast<double>(views.size());
    for (const FlowView &v : views) {
        Stage1Loss l;
        if (with_grad) {
            const RenderLoss rl = render_with_gradients(moved, v.camera, v.targets, opt.weights, opt.render);
            l = rl.loss;
            for (std::size_t k = 0; k < moved.size(); ++k) out.mean_grad[k] += view_scale * rl.grad.grads[k].mean;
        } else {
            v.targets.check_shape(v.camera.width, v.camera.height);
            const RenderResult r = render_views(moved, v.camera, opt.render);
            l = stage1_loss(r.depth, r.semantics, v.targets, opt.weights);
        }
        out.loss.render.total += view_scale * l.total;
        out.loss.render.depth += view_scale * l.depth;
        out.loss.render.pseudo_depth += view_scale * l.pseudo_depth;
        out.loss.render.semantic += view_scale * l.semantic;
    }
    const BevGrid pred = rasterize_bev(moved, opt.bev);
    out.loss.bev = bev_l2_loss(pred, target_bev);
    out.loss.total = out.loss.render.total + opt.bev_weight * out.loss.bev;
    if (with_grad && opt.bev_weight != 0.0) {
        std::vector<double> g = bev_l2_gradient(pred, target_bev);
        for (double &x : g) x *= opt.bev_weight;
        const std::vector<Vec3> gm = rasterize_bev_mean_gradient(moved, opt.bev, g);
        for (std::size_t k = 0; k < moved.size(); ++k) out.mean_grad[k] += gm[k];
    }
    return out;
}

} // namespace

FlowLoss flow_stage2_loss(const GaussianSet &set, const FlowField &flow, const Pose &next_from_current,
                          const std::vector<FlowView> &views, const BevGrid &target_bev, const FlowLossOptions &opt) {
    return propagated_loss(propagate_gaussians(set, flow, next_from_current), views, target_bev, opt, false).loss;
}

FlowLoss flow_stage2_loss(const GaussianSet &set, const FlowHead &head, const Pose &next_from_current,
                          const std::vector<FlowView> &views, const BevGrid &target_bev, const FlowLossOptions &opt) {
    return flow_stage2_loss(set, predict_flow(head, set), next_from_current, views, target_bev, opt);
}

FlowLossGradient flow_stage2_gradients(const GaussianSet &set, const FlowHead &head, const Pose &next_from_current,
                                       const std::vector<FlowView> &views, const BevGrid &target_bev,
                                       const FlowLossOptions &opt) {
    const GaussianSet moved = propagate_gaussians(set, predict_flow(head, set), next_from_current);
    const PropagatedLoss pl = propagated_loss(moved, views, target_bev, opt, true);

    FlowHead grad = FlowHead::zeros(head.input_dim(), head.hidden());
    for (std::size_t k = 0; k < set.size(); ++k) {
        // μ' = R(μ + Δμ) + t  =>  dL/dΔμ = Rᵀ dL/dμ'
        const Vec3 g_out = next_from_current.rotation.transpose() * pl.mean_grad[k];
        const VecX &f = set[k].feature;
        const VecX pre = head.w1 * f + head.b1;
        const VecX h = pre.cwiseMax(0.0);
        grad.w2.noalias() += g_out * h.transpose();
        grad.b2 += g_out;
        VecX g_h = head.w2.transpose() * g_out;
        for (Eigen::Index i = 0; i < g_h.size(); ++i) {
            if (pre[i] <= 0.0) g_h[i] = 0.0;
        }
        grad.w1.noalias() += g_h * f.transpose();
        grad.b1 += g_h;
    }
    return {pl.loss, grad.flatten()};
}

std::vector<FlowLoss> train_flow_head(FlowHead &head, const std::vector<FlowSample> &samples,
                                      const FlowTrainOptions &opt) {
    if (samples.empty()) throw InvalidParameter("train_flow_head: no samples");
    OptimState state;
    state.options.step_size = opt.step_size;
    std::vector<FlowLoss> trace;
    trace.reserve(static_cast<std::size_t>(std::max(0, opt.iters)));
    VecX params = head.flatten();
    const double inv = 1.0 / static_cast<double>(samples.size());
    for (int it = 0; it < opt.iters; ++it) {
        FlowLoss mean;
        VecX grad = VecX::Zero(params.size());
        for (const FlowSample &s : samples) {
            const FlowLossGradient g =
                flow_stage2_gradients(s.set, head, s.next_from_current, s.views, s.target_bev, opt.loss);
            grad += inv * g.head;
            mean.total += inv * g.loss.total;
            mean.bev += inv * g.loss.bev;
            mean.render.total += inv * g.loss.render.total;
            mean.render.depth += inv * g.loss.render.depth;
            mean.render.pseudo_depth += inv * g.loss.render.pseudo_depth;
            mean.render.semantic += inv * g.loss.render.semantic;
        }
        trace.push_back(mean);
        adam_update(params, grad, state);
        head.unflatten(params);
    }
    return trace;
}

std::function<void(GaussianSet &)> flow_refiner(FlowHead head) {
    return [head = std::move(head)](GaussianSet &set) {
        for (Gaussian &g : set) g.mean += head(g.feature);
    };
}

void write_flow_head(std::ostream &out, const FlowHead &head) {
    io::write_magic(out, "FLWH");
    io::write_u32(out, 1);
    io::write_u32(out, static_cast<std::uint32_t>(head.input_dim()));
    io::write_u32(out, static_cast<std::uint32_t>(head.hidden()));
    const VecX flat = head.flatten();
    for (Eigen::Index i = 0; i < flat.size(); ++i) io::write_f32(out, flat[i]);
}

FlowHead read_flow_head(std::istream &in) {
    io::expect_magic(in, "FLWH");
    if (io::read_u32(in) != 1) throw FormatError("unsupported FLWH version");
    const auto d = static_cast<int>(io::read_u32(in));
    const auto h = static_cast<int>(io::read_u32(in));
    if (d < 1 || h < 1 || d > 4096 || h > 4096) throw FormatError("FLWH header out of range");
    FlowHead head = FlowHead::zeros(d, h);
    VecX flat(head.parameter_count());
    for (Eigen::Index i = 0; i < flat.size(); ++i) flat[i] = io::read_f32(in);
    head.unflatten(flat);
    return head;
}

void save_flow_head(const std::filesystem::path &path, const FlowHead &head) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open " + path.string() + " for writing");
    write_flow_head(out, head);
}

FlowHead load_flow_head(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return read_flow_head(in);
}

} // namespace worldkit
