#include "worldkit/splat_render.hpp"

#include "worldkit/error.hpp"
#include "worldkit/parallel.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace worldkit {

namespace {

// Everything the compositor and the backward pass need per visible Gaussian.
struct Splat {
    Projected2D proj;
    Mat2 conic;       // inverse of the regularized 2D covariance
    Vec3 cam_mean;    // mean in camera coordinates
    double opacity;
    int x0, x1, y0, y1; // inclusive pixel-centre bounding box
};

struct Projection {
    Vec3 cam_mean;
    Mat3 cam_cov;                          // W Σ Wᵀ
    Eigen::Matrix<double, 2, 3> jacobian;  // d(u,v)/d(cam_mean)
};

Projection project_moments(const Gaussian &g, const Camera &cam) {
    Projection p;
    p.cam_mean = cam.to_camera(g.mean);
    const Mat3 w = cam.world_from_cam.rotation.transpose();
    p.cam_cov = w * g.covariance() * w.transpose();
    const double x = p.cam_mean.x(), y = p.cam_mean.y(), z = p.cam_mean.z();
    p.jacobian << cam.fx / z, 0.0, -cam.fx * x / (z * z), 0.0, cam.fy / z, -cam.fy * y / (z * z);
    return p;
}

std::optional<Splat> make_splat(const Gaussian &g, const Camera &cam, int index, const RenderOptions &opt) {
    const Vec3 cam_mean = cam.to_camera(g.mean);
    if (!(cam_mean.z() >= opt.near_plane)) {
        return std::nullopt;
    }
    const Projection pr = project_moments(g, cam);
    Splat s;
    s.cam_mean = pr.cam_mean;
    s.proj.depth = pr.cam_mean.z();
    s.proj.source_index = index;
    s.proj.mean2d = {cam.fx * pr.cam_mean.x() / pr.cam_mean.z() + cam.cx,
                     cam.fy * pr.cam_mean.y() / pr.cam_mean.z() + cam.cy};
    Mat2 cov = pr.jacobian * pr.cam_cov * pr.jacobian.transpose();
    cov = 0.5 * (cov + cov.transpose());
    cov.diagonal().array() += opt.cov2d_floor;
    s.proj.cov2d = cov;
    const double rx = opt.footprint_sigma * std::sqrt(cov(0, 0));
    const double ry = opt.footprint_sigma * std::sqrt(cov(1, 1));
    const double u = s.proj.mean2d.x(), v = s.proj.mean2d.y();
    if (!std::isfinite(u) || !std::isfinite(v)) {
        return std::nullopt;
    }
    s.x0 = std::max(0, static_cast<int>(std::ceil(u - rx)));
    s.x1 = std::min(cam.width - 1, static_cast<int>(std::floor(u + rx)));
    s.y0 = std::max(0, static_cast<int>(std::ceil(v - ry)));
    s.y1 = std::min(cam.height - 1, static_cast<int>(std::floor(v + ry)));
    if (s.x0 > s.x1 || s.y0 > s.y1) {
        return std::nullopt;
    }
    s.conic = cov.inverse();
    s.opacity = g.opacity();
    return s;
}

std::vector<Splat> project_all(const GaussianSet &set, const Camera &cam, const RenderOptions &opt) {
    std::vector<Splat> splats;
    splats.reserve(set.size());
    for (std::size_t i = 0; i < set.size(); ++i) {
        if (auto s = make_splat(set[i], cam, static_cast<int>(i), opt)) {
            splats.push_back(*s);
        }
    }
    std::stable_sort(splats.begin(), splats.end(), [](const Splat &a, const Splat &b) {
        if (a.proj.depth != b.proj.depth) return a.proj.depth < b.proj.depth;
        return a.proj.source_index < b.proj.source_index;
    });
    return splats;
}

struct TileGrid {
    int size, nx, ny;
    std::vector<std::vector<int>> lists; // indices into the depth-sorted splat list

    TileGrid(const std::vector<Splat> &splats, const Camera &cam, int tile_size)
        : size(std::max(1, tile_size)), nx((cam.width + size - 1) / size), ny((cam.height + size - 1) / size),
          lists(std::size_t(nx) * ny) {
        for (std::size_t i = 0; i < splats.size(); ++i) {
            const Splat &s = splats[i];
            for (int ty = s.y0 / size; ty <= s.y1 / size; ++ty) {
                for (int tx = s.x0 / size; tx <= s.x1 / size; ++tx) {
                    lists[std::size_t(ty) * nx + tx].push_back(static_cast<int>(i));
                }
            }
        }
    }
    std::size_t count() const { return lists.size(); }
};

// One Gaussian's contribution to one pixel.
struct Contribution {
    int splat;
    double alpha;
    double falloff;      // exp(-q/2)
    double transmittance; // product of (1 - alpha) over earlier contributions
    Vec2 delta;          // pixel - mean2d
    bool clamped;
};

// Front-to-back list for one pixel; returns the final transmittance.
double gather(const std::vector<Splat> &splats, const std::vector<int> &tile_list, int px, int py,
              const RenderOptions &opt, std::vector<Contribution> &out) {
    out.clear();
    const double cutoff = opt.footprint_sigma * opt.footprint_sigma;
    double t = 1.0;
    for (int idx : tile_list) {
        const Splat &s = splats[idx];
        if (px < s.x0 || px > s.x1 || py < s.y0 || py > s.y1) continue;
        const Vec2 d(px - s.proj.mean2d.x(), py - s.proj.mean2d.y());
        const double q = d.dot(s.conic * d);
        if (q > cutoff) continue;
        const double falloff = std::exp(-0.5 * q);
        double a = s.opacity * falloff;
        if (a < opt.alpha_min) continue;
        const bool clamped = a > opt.alpha_max;
        if (clamped) a = opt.alpha_max;
        out.push_back({idx, a, falloff, t, d, clamped});
        t *= 1.0 - a;
    }
    return t;
}

template <typename Fn>
void for_each_tile_pixel(const TileGrid &tiles, std::size_t tile, const Camera &cam, Fn &&fn) {
    const int tx = static_cast<int>(tile % tiles.nx), ty = static_cast<int>(tile / tiles.nx);
    const int xe = std::min(cam.width, (tx + 1) * tiles.size), ye = std::min(cam.height, (ty + 1) * tiles.size);
    for (int y = ty * tiles.size; y < ye; ++y) {
        for (int x = tx * tiles.size; x < xe; ++x) {
            fn(x, y);
        }
    }
}

RenderResult composite(const GaussianSet &set, const Camera &cam, const std::vector<Splat> &splats,
                       const TileGrid &tiles, const RenderOptions &opt) {
    const int classes = set.class_count();
    RenderResult out{DepthImage(cam.width, cam.height), SemanticImage(cam.width, cam.height, classes)};
    parallel_for(tiles.count(), [&](std::size_t tile) {
        std::vector<Contribution> contribs;
        for_each_tile_pixel(tiles, tile, cam, [&](int x, int y) {
            const double t_final = gather(splats, tiles.lists[tile], x, y, opt, contribs);
            const std::size_t pix = out.depth.index(x, y);
            double depth = 0.0;
            auto logits = out.semantics.logit(pix);
            for (const Contribution &c : contribs) {
                const Splat &s = splats[c.splat];
                const double w = c.alpha * c.transmittance;
                depth += s.proj.depth * w;
                logits += w * set[s.proj.source_index].logits;
            }
            const double weight = 1.0 - t_final;
            out.depth.depth[pix] = depth;
            out.semantics.weight[pix] = weight;
            out.depth.valid[pix] = weight > 0.0 && weight >= opt.min_valid_weight;
        });
    });
    return out;
}

// Gradients with respect to a Gaussian's projected quantities.
struct ScreenGrad {
    Vec2 mean2d = Vec2::Zero();
    Mat2 conic = Mat2::Zero();
    double opacity = 0.0;
    double depth = 0.0;
    VecX logits;

    void reset(int classes) {
        mean2d.setZero();
        conic.setZero();
        opacity = 0.0;
        depth = 0.0;
        logits = VecX::Zero(classes);
    }
};

Mat3 dR_dw(double w, double x, double y, double z) {
    (void)w;
    Mat3 m;
    m << 0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0;
    return m;
}
Mat3 dR_dx(double w, double x, double y, double z) {
    Mat3 m;
    m << 0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x;
    return m;
}
Mat3 dR_dy(double w, double x, double y, double z) {
    Mat3 m;
    m << -4 * y, 2 * x, 2 * w, 2 * x, 0, 2 * z, -2 * w, 2 * z, -4 * y;
    return m;
}
Mat3 dR_dz(double w, double x, double y, double z) {
    Mat3 m;
    m << -4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, 0;
    return m;
}

// Chain rule from screen-space gradients to the Gaussian's raw parameters.
GaussianGrad backprop_to_params(const Gaussian &g, const Splat &s, const ScreenGrad &sg, const Camera &cam) {
    GaussianGrad out;
    out.logits = sg.logits;

    const Projection pr = project_moments(g, cam);
    const double x = pr.cam_mean.x(), y = pr.cam_mean.y(), z = pr.cam_mean.z();
    const double fx = cam.fx, fy = cam.fy;
    const auto &jac = pr.jacobian;

    // conic = A⁻¹ with A = J V Jᵀ + floor·I.
    const Mat2 grad_a = -s.conic * sg.conic * s.conic;
    const Mat3 grad_v = jac.transpose() * grad_a * jac;
    const Eigen::Matrix<double, 2, 3> grad_j = 2.0 * grad_a * jac * pr.cam_cov;

    Vec3 grad_cam = Vec3::Zero();
    // Projection Jacobian entries depend on the camera-space mean.
    grad_cam.z() += grad_j(0, 0) * (-fx / (z * z));
    grad_cam.x() += grad_j(0, 2) * (-fx / (z * z));
    grad_cam.z() += grad_j(0, 2) * (2.0 * fx * x / (z * z * z));
    grad_cam.z() += grad_j(1, 1) * (-fy / (z * z));
    grad_cam.y() += grad_j(1, 2) * (-fy / (z * z));
    grad_cam.z() += grad_j(1, 2) * (2.0 * fy * y / (z * z * z));
    // Pinhole projection of the mean.
    grad_cam.x() += sg.mean2d.x() * fx / z;
    grad_cam.y() += sg.mean2d.y() * fy / z;
    grad_cam.z() += -sg.mean2d.x() * fx * x / (z * z) - sg.mean2d.y() * fy * y / (z * z);
    // Composited depth is the camera-space z.
    grad_cam.z() += sg.depth;

    const Mat3 &world_from_cam = cam.world_from_cam.rotation;
    out.mean = world_from_cam * grad_cam;

    // V = W Σ Wᵀ with W = world_from_camᵀ.
    const Mat3 grad_sigma = world_from_cam * grad_v * world_from_cam.transpose();
    const Mat3 r = g.rotation.to_matrix();
    const Vec3 s2 = (2.0 * g.log_scale).array().exp();
    const Mat3 grad_m = r.transpose() * grad_sigma * r;
    for (int i = 0; i < 3; ++i) out.log_scale[i] = grad_m(i, i) * 2.0 * s2[i];
    const Mat3 grad_r = 2.0 * grad_sigma * r * s2.asDiagonal();

    const double qw = g.rotation.w(), qx = g.rotation.x(), qy = g.rotation.y(), qz = g.rotation.z();
    const Vec4 grad_q(grad_r.cwiseProduct(dR_dw(qw, qx, qy, qz)).sum(), grad_r.cwiseProduct(dR_dx(qw, qx, qy, qz)).sum(),
                      grad_r.cwiseProduct(dR_dy(qw, qx, qy, qz)).sum(), grad_r.cwiseProduct(dR_dz(qw, qx, qy, qz)).sum());
    const Vec4 q = g.rotation.coeffs();
    out.rotation = grad_q - grad_q.dot(q) * q;

    const double o = s.opacity;
    out.opacity_logit = sg.opacity * o * (1.0 - o);
    return out;
}

// FNV-1a, 64 bit.
struct Fnv1a {
    std::uint64_t h = 1469598103934665603ull;
    void add(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (8 * i)) & 0xffu;
            h *= 1099511628211ull;
        }
    }
};

} // namespace

std::optional<Projected2D> project_gaussian(const Gaussian &g, const Camera &cam, int source_index,
                                            const RenderOptions &opt) {
    if (auto s = make_splat(g, cam, source_index, opt)) {
        return s->proj;
    }
    return std::nullopt;
}

RenderResult render_views(const GaussianSet &set, const Camera &cam, const RenderOptions &opt) {
    const std::vector<Splat> splats = project_all(set, cam, opt);
    const TileGrid tiles(splats, cam, opt.tile_size);
    return composite(set, cam, splats, tiles, opt);
}

GradientBundle GradientBundle::zeros(const GaussianSet &set) {
    GradientBundle b;
    b.grads.resize(set.size());
    for (auto &g : b.grads) g.logits = VecX::Zero(set.class_count());
    return b;
}

bool GradientBundle::all_finite() const {
    return std::all_of(grads.begin(), grads.end(), [](const GaussianGrad &g) {
        return g.mean.allFinite() && g.log_scale.allFinite() && g.rotation.allFinite() &&
               std::isfinite(g.opacity_logit) && g.logits.allFinite();
    });
}

GradientBundle &GradientBundle::operator+=(const GradientBundle &rhs) {
    if (rhs.grads.size() != grads.size()) {
        throw InvalidParameter("gradient bundles have different sizes");
    }
    for (std::size_t i = 0; i < grads.size(); ++i) {
        grads[i].mean += rhs.grads[i].mean;
        grads[i].log_scale += rhs.grads[i].log_scale;
        grads[i].rotation += rhs.grads[i].rotation;
        grads[i].opacity_logit += rhs.grads[i].opacity_logit;
        grads[i].logits += rhs.grads[i].logits;
    }
    return *this;
}

RenderLoss render_with_gradients(const GaussianSet &set, const Camera &cam, const ReconTargets &targets,
                                 const LossWeights &weights, const RenderOptions &opt) {
    targets.check_shape(cam.width, cam.height);
    const int classes = set.class_count();
    const std::vector<Splat> splats = project_all(set, cam, opt);
    const TileGrid tiles(splats, cam, opt.tile_size);

    RenderLoss result;
    result.views = composite(set, cam, splats, tiles, opt);
    const DepthImage &depth = result.views.depth;
    const SemanticImage &sem = result.views.semantics;
    result.loss = stage1_loss(depth, sem, targets, weights);

    // Per-pixel seeds dL/dD and dL/dS of the masked means.
    std::size_t n_sparse = 0, n_dense = 0, n_sem = 0;
    for (std::size_t i = 0; i < depth.pixels(); ++i) {
        if (!depth.valid[i]) continue;
        n_sparse += targets.sparse_depth.valid[i] != 0;
        n_dense += targets.dense_depth.valid[i] != 0;
        n_sem += targets.labels.valid[i] != 0;
    }
    auto sign = [](double v) { return double((v > 0.0) - (v < 0.0)); };
    std::vector<double> seed_depth(depth.pixels(), 0.0);
    std::vector<double> seed_sem(depth.pixels() * classes, 0.0);
    for (std::size_t i = 0; i < depth.pixels(); ++i) {
        if (!depth.valid[i]) continue;
        if (targets.sparse_depth.valid[i]) {
            seed_depth[i] += weights.depth * sign(depth.depth[i] - targets.sparse_depth.depth[i]) / double(n_sparse);
        }
        if (targets.dense_depth.valid[i]) {
            seed_depth[i] +=
                weights.pseudo_depth * sign(depth.depth[i] - targets.dense_depth.depth[i]) / double(n_dense);
        }
        if (targets.labels.valid[i]) {
            const double *z = sem.logits.data() + i * classes;
            const double lse = log_sum_exp(z, classes);
            double *g = seed_sem.data() + i * classes;
            for (int c = 0; c < classes; ++c) {
                g[c] = weights.semantic * std::exp(z[c] - lse) / double(n_sem);
            }
            g[targets.labels.label[i]] -= weights.semantic / double(n_sem);
        }
    }

    // Reverse sweep per tile into per-tile partials, merged in tile order.
    std::vector<std::vector<ScreenGrad>> partials(tiles.count());
    parallel_for(tiles.count(), [&](std::size_t tile) {
        auto &acc = partials[tile];
        acc.resize(splats.size());
        for (auto &g : acc) g.reset(classes);
        std::vector<Contribution> contribs;
        VecX suffix_sem(classes), grad_sem(classes);
        for_each_tile_pixel(tiles, tile, cam, [&](int x, int y) {
            const std::size_t pix = depth.index(x, y);
            const double gd = seed_depth[pix];
            grad_sem = Eigen::Map<const VecX>(seed_sem.data() + pix * classes, classes);
            if (gd == 0.0 && grad_sem.isZero(0.0)) return;
            gather(splats, tiles.lists[tile], x, y, opt, contribs);
            double suffix_depth = 0.0;
            suffix_sem.setZero();
            for (std::size_t k = contribs.size(); k-- > 0;) {
                const Contribution &c = contribs[k];
                const Splat &s = splats[c.splat];
                const VecX &logits = set[s.proj.source_index].logits;
                const double w = c.alpha * c.transmittance;
                ScreenGrad &sg = acc[c.splat];
                sg.depth += gd * w;
                sg.logits += w * grad_sem;
                const double inv_one_minus = 1.0 / (1.0 - c.alpha);
                const double grad_alpha = gd * (s.proj.depth * c.transmittance - suffix_depth * inv_one_minus) +
                                          grad_sem.dot(logits * c.transmittance - suffix_sem * inv_one_minus);
                suffix_depth += s.proj.depth * w;
                suffix_sem += w * logits;
                if (c.clamped) continue;
                sg.opacity += grad_alpha * c.falloff;
                const double grad_q = grad_alpha * (-0.5 * c.alpha);
                sg.mean2d += grad_q * (-2.0 * (s.conic * c.delta));
                sg.conic += grad_q * (c.delta * c.delta.transpose());
            }
        });
    });

    std::vector<ScreenGrad> total(splats.size());
    for (auto &g : total) g.reset(classes);
    for (const auto &part : partials) {
        for (std::size_t i = 0; i < splats.size(); ++i) {
            total[i].mean2d += part[i].mean2d;
            total[i].conic += part[i].conic;
            total[i].opacity += part[i].opacity;
            total[i].depth += part[i].depth;
            total[i].logits += part[i].logits;
        }
    }

    result.grad = GradientBundle::zeros(set);
    for (std::size_t i = 0; i < splats.size(); ++i) {
        const int src = splats[i].proj.source_index;
        result.grad.grads[src] = backprop_to_params(set[src], splats[i], total[i], cam);
    }
    return result;
}

std::uint64_t render_signature(const GaussianSet &set, const Camera &cam, const ReconTargets *targets,
                               const RenderOptions &opt) {
    const std::vector<Splat> splats = project_all(set, cam, opt);
    const TileGrid tiles(splats, cam, opt.tile_size);
    const RenderResult views = composite(set, cam, splats, tiles, opt);
    Fnv1a hash;
    std::vector<Contribution> contribs;
    for (std::size_t tile = 0; tile < tiles.count(); ++tile) {
        for_each_tile_pixel(tiles, tile, cam, [&](int x, int y) {
            gather(splats, tiles.lists[tile], x, y, opt, contribs);
            const std::size_t pix = views.depth.index(x, y);
            hash.add(pix);
            for (const Contribution &c : contribs) {
                hash.add((std::uint64_t(splats[c.splat].proj.source_index) << 1) | c.clamped);
            }
            hash.add(views.depth.valid[pix]);
            if (targets != nullptr && views.depth.valid[pix]) {
                const double d = views.depth.depth[pix];
                if (targets->sparse_depth.valid[pix]) hash.add(d > targets->sparse_depth.depth[pix] ? 3 : 4);
                if (targets->dense_depth.valid[pix]) hash.add(d > targets->dense_depth.depth[pix] ? 5 : 6);
            }
        });
    }
    return hash.h;
}

} // namespace worldkit
