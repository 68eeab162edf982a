#include "worldkit/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

namespace worldkit {

void GradCheckReport::merge(const GradCheckReport &other) {
    if (other.max_rel_error > max_rel_error) {
        max_rel_error = other.max_rel_error;
        worst = other.worst;
    }
    checked += other.checked;
    skipped += other.skipped;
}

double relative_error(double analytic, double numeric, double abs_floor) {
    const double scale = std::max({std::abs(analytic), std::abs(numeric), abs_floor});
    return std::abs(analytic - numeric) / scale;
}

GradCheckReport check_render_gradients(const GaussianSet &set, const Camera &cam, const ReconTargets &targets,
                                       const LossWeights &weights, const RenderOptions &render,
                                       const GradCheckOptions &opt) {
    const RenderLoss analytic = render_with_gradients(set, cam, targets, weights, render);

    GradCheckReport report;
    GaussianSet probe = set;
    auto loss_at = [&](const GaussianSet &s) {
        const RenderResult v = render_views(s, cam, render);
        return stage1_loss(v.depth, v.semantics, targets, weights).total;
    };
    auto check = [&](std::size_t k, const char *name, int i, double grad, const std::function<void(Gaussian &, double)> &bump) {
        const Gaussian original = probe[k];
        bump(probe[k], +opt.step);
        const double lp = loss_at(probe);
        const auto sig_p = render_signature(probe, cam, &targets, render);
        probe[k] = original;
        bump(probe[k], -opt.step);
        const double lm = loss_at(probe);
        const auto sig_m = render_signature(probe, cam, &targets, render);
        probe[k] = original;
        if (sig_p != sig_m) {
            ++report.skipped;
            return;
        }
        const double numeric = (lp - lm) / (2.0 * opt.step);
        const double err = relative_error(grad, numeric, opt.abs_floor);
        ++report.checked;
        if (err > report.max_rel_error) {
            report.max_rel_error = err;
            report.worst = "gaussian " + std::to_string(k) + " " + name + "[" + std::to_string(i) + "]";
        }
    };

    for (std::size_t k = 0; k < set.size(); ++k) {
        const GaussianGrad &g = analytic.grad.grads[k];
        for (int i = 0; i < 3; ++i) {
            check(k, "mean", i, g.mean[i], [i](Gaussian &x, double h) { x.mean[i] += h; });
            check(k, "log_scale", i, g.log_scale[i], [i](Gaussian &x, double h) { x.log_scale[i] += h; });
        }
        for (int i = 0; i < 4; ++i) {
            check(k, "rotation", i, g.rotation[i], [i](Gaussian &x, double h) {
                Vec4 q = x.rotation.coeffs();
                q[i] += h;
                x.rotation = Quaternion(q[0], q[1], q[2], q[3]);
            });
        }
        check(k, "opacity_logit", 0, g.opacity_logit, [](Gaussian &x, double h) { x.opacity_logit += h; });
        for (int i = 0; i < set.class_count(); ++i) {
            check(k, "logits", i, g.logits[i], [i](Gaussian &x, double h) { x.logits[i] += h; });
        }
    }
    return report;
}

GradCheckScene make_gradcheck_scene(std::uint64_t seed, int gaussians, int width, int height, int classes) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

    GradCheckScene scene{GaussianSet(classes, 4), Camera::with_fov(width, height, M_PI / 2.0, Pose::identity()),
                         ReconTargets{DepthImage(width, height), DepthImage(width, height), LabelImage(width, height)}};
    for (int k = 0; k < gaussians; ++k) {
        const double z = uniform(2.0, 8.0);
        const Vec3 mean(uniform(-0.7, 0.7) * z, uniform(-0.7, 0.7) * z, z);
        const Vec3 scale(uniform(0.15, 0.8), uniform(0.15, 0.8), uniform(0.15, 0.8));
        const Quaternion q(normal(rng), normal(rng), normal(rng), normal(rng));
        VecX logits(classes), feature = VecX::Zero(4);
        for (int c = 0; c < classes; ++c) logits[c] = normal(rng);
        scene.set.add(Gaussian::make(mean, scale, q, uniform(0.3, 0.95), logits, feature));
    }
    auto &t = scene.targets;
    for (std::size_t i = 0; i < t.dense_depth.pixels(); ++i) {
        t.dense_depth.depth[i] = uniform(1.0, 10.0);
        t.dense_depth.valid[i] = unit(rng) < 0.9;
        t.sparse_depth.depth[i] = uniform(1.0, 10.0);
        t.sparse_depth.valid[i] = unit(rng) < 0.3;
        t.labels.label[i] = static_cast<int>(rng() % static_cast<std::uint64_t>(classes));
        t.labels.valid[i] = unit(rng) < 0.9;
    }
    return scene;
}

} // namespace worldkit
