#include "worldkit/optim.hpp"

#include "worldkit/error.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>
#include <random>

namespace worldkit {

void adam_update(VecX &params, const VecX &grad, OptimState &state) {
    if (grad.size() != params.size()) throw InvalidParameter("adam_update: gradient size mismatch");
    if (state.m.size() == 0 && state.v.size() == 0) {
        state.m = VecX::Zero(params.size());
        state.v = VecX::Zero(params.size());
    }
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw InvalidParameter("adam_update: optimizer state does not match the parameters");
    }
    const AdamOptions &o = state.options;
    ++state.step;
    state.m = o.beta1 * state.m + (1.0 - o.beta1) * grad;
    state.v = o.beta2 * state.v + (1.0 - o.beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
    if (o.weight_decay != 0.0) params -= o.step_size * o.weight_decay * params;
    params.array() -= o.step_size * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + o.epsilon);
}

namespace {

Eigen::Index stride(const GaussianSet &set) { return 11 + set.class_count(); }

} // namespace

VecX flatten_parameters(const GaussianSet &set) {
    const Eigen::Index s = stride(set);
    VecX flat(static_cast<Eigen::Index>(set.size()) * s);
    for (std::size_t k = 0; k < set.size(); ++k) {
        const Gaussian &g = set[k];
        auto seg = flat.segment(static_cast<Eigen::Index>(k) * s, s);
        seg.segment<3>(0) = g.mean;
        seg.segment<3>(3) = g.log_scale;
        seg.segment<4>(6) = g.rotation.coeffs();
        seg[10] = g.opacity_logit;
        seg.tail(set.class_count()) = g.logits;
    }
    return flat;
}

VecX flatten_gradients(const GradientBundle &grad, const GaussianSet &set) {
    if (grad.size() != set.size()) throw InvalidParameter("gradient bundle does not match the Gaussian set");
    const Eigen::Index s = stride(set);
    VecX flat(static_cast<Eigen::Index>(set.size()) * s);
    for (std::size_t k = 0; k < set.size(); ++k) {
        const GaussianGrad &g = grad.grads[k];
        if (g.logits.size() != set.class_count()) throw InvalidParameter("gradient logits width mismatch");
        auto seg = flat.segment(static_cast<Eigen::Index>(k) * s, s);
        seg.segment<3>(0) = g.mean;
        seg.segment<3>(3) = g.log_scale;
        seg.segment<4>(6) = g.rotation;
        seg[10] = g.opacity_logit;
        seg.tail(set.class_count()) = g.logits;
    }
    return flat;
}

void unflatten_parameters(GaussianSet &set, const VecX &flat) {
    const Eigen::Index s = stride(set);
    if (flat.size() != static_cast<Eigen::Index>(set.size()) * s) {
        throw InvalidParameter("unflatten_parameters: wrong parameter count");
    }
    for (std::size_t k = 0; k < set.size(); ++k) {
        Gaussian &g = set[k];
        const auto seg = flat.segment(static_cast<Eigen::Index>(k) * s, s);
        g.mean = seg.segment<3>(0);
        g.log_scale = seg.segment<3>(3);
        const Vec4 q = seg.segment<4>(6);
        if (q != g.rotation.coeffs()) g.rotation = Quaternion(q[0], q[1], q[2], q[3]);
        g.opacity_logit = seg[10];
        g.logits = seg.tail(set.class_count());
    }
}

void adam_step(GaussianSet &set, const GradientBundle &grad, OptimState &state) {
    VecX params = flatten_parameters(set);
    adam_update(params, flatten_gradients(grad, set), state);
    unflatten_parameters(set, params);
}

GaussianSet initialize_gaussians(const SceneSpec &scene, int count, std::uint64_t seed, int frame, int feature_dim,
                                 double min_depth, double max_depth) {
    if (count < 0) throw InvalidParameter("initialize_gaussians: negative count");
    if (scene.camera_rig.empty()) throw InvalidParameter("initialize_gaussians: scene has no cameras");
    const int d = feature_dim > 0 ? feature_dim : default_feature_dim(scene.class_count);
    GaussianSet set(scene.class_count, d);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 0.1);
    const int cams = static_cast<int>(scene.camera_rig.size());
    for (int k = 0; k < count; ++k) {
        const Camera cam = scene.camera_in_ego(frame, k % cams, frame);
        const double u = unit(rng) * cam.width - 0.5;
        const double v = unit(rng) * cam.height - 0.5;
        const double z = min_depth + (max_depth - min_depth) * unit(rng);
        const Vec3 mean = cam.world_from_cam.apply(z * cam.pixel_direction(u, v));
        VecX feature(d);
        for (int i = 0; i < d; ++i) feature[i] = normal(rng);
        set.add(Gaussian::make(mean, Vec3::Constant(0.5), {}, sigmoid(-2.0), VecX::Zero(scene.class_count), feature));
    }
    return set;
}

namespace {

struct View {
    Camera camera;
    ReconTargets targets;
};

std::vector<View> fit_views(const SceneSpec &scene, const std::vector<int> &frames) {
    if (frames.empty()) throw InvalidParameter("no frames to fit");
    std::vector<View> views;
    for (const int t : frames) {
        for (int c = 0; c < static_cast<int>(scene.camera_rig.size()); ++c) {
            views.push_back({scene.camera_in_ego(t, c, frames.front()), oracle_render(scene, t, c)});
        }
    }
    return views;
}

} // namespace

FitResult fit_stage1(const SceneSpec &scene, const GaussianSet &init, const FitOptions &opt) {
    FitResult result{init, {}};
    if (opt.iters <= 0) return result;
    const std::vector<View> views = fit_views(scene, opt.frames);
    const double inv = 1.0 / static_cast<double>(views.size());
    OptimState state;
    state.options.step_size = opt.step_size;
    result.trace.reserve(static_cast<std::size_t>(opt.iters));
    for (int it = 0; it < opt.iters; ++it) {
        Stage1Loss mean;
        GradientBundle grad = GradientBundle::zeros(result.set);
        for (const View &v : views) {
            RenderLoss rl = render_with_gradients(result.set, v.camera, v.targets, opt.weights, opt.render);
            mean.total += inv * rl.loss.total;
            mean.depth += inv * rl.loss.depth;
            mean.pseudo_depth += inv * rl.loss.pseudo_depth;
            mean.semantic += inv * rl.loss.semantic;
            for (GaussianGrad &g : rl.grad.grads) {
                g.mean *= inv;
                g.log_scale *= inv;
                g.rotation *= inv;
                g.opacity_logit *= inv;
                g.logits *= inv;
            }
            grad += rl.grad;
        }
        result.trace.push_back(mean);
        adam_step(result.set, grad, state);
    }
    return result;
}

FitMetrics evaluate_fit(const SceneSpec &scene, const GaussianSet &set, const std::vector<int> &frames,
                        const RenderOptions &render) {
    FitMetrics m;
    double depth_sum = 0.0;
    std::size_t correct = 0;
    for (const View &v : fit_views(scene, frames)) {
        const RenderResult r = render_views(set, v.camera, render);
        const MaskedMean l1 = masked_l1(r.depth, v.targets.dense_depth);
        depth_sum += l1.value * static_cast<double>(l1.count);
        m.depth_pixels += l1.count;
        for (std::size_t p = 0; p < r.depth.pixels(); ++p) {
            if (!r.depth.valid[p] || !v.targets.labels.valid[p]) continue;
            ++m.semantic_pixels;
            correct += r.semantics.argmax(p) == v.targets.labels.label[p];
        }
    }
    m.depth_l1 = m.depth_pixels ? depth_sum / static_cast<double>(m.depth_pixels) : 0.0;
    m.semantic_accuracy = m.semantic_pixels ? static_cast<double>(correct) / static_cast<double>(m.semantic_pixels) : 0.0;
    return m;
}

void write_loss_trace(std::ostream &out, const std::vector<Stage1Loss> &trace) {
    out << "step,total,L_d,L_pd,L_sem\n" << std::setprecision(10);
    for (std::size_t i = 0; i < trace.size(); ++i) {
        const Stage1Loss &l = trace[i];
        out << i << ',' << l.total << ',' << l.depth << ',' << l.pseudo_depth << ',' << l.semantic << '\n';
    }
}

} // namespace worldkit
