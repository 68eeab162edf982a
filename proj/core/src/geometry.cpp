#include "worldkit/geometry.hpp"

#include "worldkit/error.hpp"

#include <Eigen/Geometry>
#include <Eigen/LU>

#include <cmath>
#include <limits>
#include <string>

namespace worldkit {

namespace {

constexpr double kOrthonormalTol = 1e-6;

bool all_finite(const VecX &v) { return v.allFinite(); }

} // namespace

Quaternion::Quaternion(double w, double x, double y, double z) : w_(w), x_(x), y_(y), z_(z) {
    const double n2 = w * w + x * x + y * y + z * z;
    if (!std::isfinite(n2) || n2 <= 0.0) {
        throw InvalidParameter("quaternion must be finite and non-zero");
    }
    // Leave already-unit values bit-identical.
    if (std::abs(n2 - 1.0) > 4.0 * std::numeric_limits<double>::epsilon()) {
        const double inv = 1.0 / std::sqrt(n2);
        w_ *= inv;
        x_ *= inv;
        y_ *= inv;
        z_ *= inv;
    }
}

Quaternion Quaternion::from_axis_angle(const Vec3 &axis, double angle) {
    const double n = axis.norm();
    if (!(n > 0.0)) {
        throw InvalidParameter("rotation axis must be non-zero");
    }
    const Vec3 a = axis / n;
    const double s = std::sin(0.5 * angle);
    return {std::cos(0.5 * angle), a.x() * s, a.y() * s, a.z() * s};
}

Quaternion Quaternion::from_matrix(const Mat3 &rotation) {
    const Eigen::Quaterniond q(rotation);
    return {q.w(), q.x(), q.y(), q.z()};
}

Mat3 Quaternion::to_matrix() const {
    const double w = w_, x = x_, y = y_, z = z_;
    Mat3 r;
    r << 1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
        2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
        2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y);
    return r;
}

Quaternion Quaternion::operator*(const Quaternion &r) const {
    return {w_ * r.w_ - x_ * r.x_ - y_ * r.y_ - z_ * r.z_,
            w_ * r.x_ + x_ * r.w_ + y_ * r.z_ - z_ * r.y_,
            w_ * r.y_ - x_ * r.z_ + y_ * r.w_ + z_ * r.x_,
            w_ * r.z_ + x_ * r.y_ - y_ * r.x_ + z_ * r.w_};
}

Pose Pose::make(const Mat3 &rotation, const Vec3 &translation) {
    if (!rotation.allFinite() || !translation.allFinite()) {
        throw InvalidParameter("pose must be finite");
    }
    const double ortho_err = (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
    if (ortho_err > kOrthonormalTol || std::abs(rotation.determinant() - 1.0) > kOrthonormalTol) {
        throw InvalidParameter("pose rotation is not a proper rotation matrix");
    }
    return {rotation, translation};
}

Pose Pose::from_translation(const Vec3 &t) { return {Mat3::Identity(), t}; }

Pose Pose::from_yaw(double yaw, const Vec3 &t) {
    const double c = std::cos(yaw), s = std::sin(yaw);
    Mat3 r;
    r << c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0;
    return {r, t};
}

Pose compose(const Pose &lhs, const Pose &rhs) {
    return {lhs.rotation * rhs.rotation, lhs.rotation * rhs.translation + lhs.translation};
}

Pose invert(const Pose &pose) {
    const Mat3 rt = pose.rotation.transpose();
    return {rt, -(rt * pose.translation)};
}

Pose relative_pose(const Pose &world_from_a, const Pose &world_from_b) {
    return compose(invert(world_from_b), world_from_a);
}

Camera Camera::make(double fx, double fy, double cx, double cy, int width, int height,
                    const Pose &world_from_cam) {
    if (!(fx > 0.0) || !(fy > 0.0)) {
        throw InvalidParameter("camera focal lengths must be positive");
    }
    if (width < 1 || height < 1) {
        throw InvalidParameter("camera dimensions must be at least 1 pixel");
    }
    return {fx, fy, cx, cy, width, height, world_from_cam};
}

Camera Camera::with_fov(int width, int height, double horizontal_fov, const Pose &world_from_cam) {
    if (!(horizontal_fov > 0.0) || horizontal_fov >= M_PI) {
        throw InvalidParameter("horizontal field of view must lie in (0, pi)");
    }
    const double f = 0.5 * width / std::tan(0.5 * horizontal_fov);
    return make(f, f, 0.5 * (width - 1), 0.5 * (height - 1), width, height, world_from_cam);
}

Vec3 Camera::to_camera(const Vec3 &world) const {
    return world_from_cam.rotation.transpose() * (world - world_from_cam.translation);
}

Vec3 Camera::pixel_direction(double u, double v) const { return {(u - cx) / fx, (v - cy) / fy, 1.0}; }

double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double logit(double p) { return std::log(p) - std::log1p(-p); }

Gaussian Gaussian::make(const Vec3 &mean, const Vec3 &scale, const Quaternion &rotation, double opacity,
                        VecX logits, VecX feature) {
    if (!mean.allFinite()) {
        throw InvalidParameter("gaussian mean must be finite");
    }
    if (!(scale.array() > 0.0).all() || !scale.allFinite()) {
        throw InvalidParameter("gaussian scale components must be positive and finite");
    }
    if (!(opacity >= 0.0 && opacity <= 1.0)) {
        throw InvalidParameter("gaussian opacity must lie in [0, 1]");
    }
    Gaussian g;
    g.mean = mean;
    g.log_scale = scale.array().log();
    g.rotation = rotation;
    g.opacity_logit = logit(opacity);
    g.logits = std::move(logits);
    g.feature = std::move(feature);
    return g;
}

double Gaussian::opacity() const { return sigmoid(opacity_logit); }

Mat3 Gaussian::covariance() const { return covariance_from_scale_rotation(scale(), rotation); }

GaussianSet::GaussianSet(int class_count, int feature_dim) : class_count_(class_count), feature_dim_(feature_dim) {
    if (class_count < 1 || feature_dim < 1) {
        throw InvalidParameter("class count and feature width must be positive");
    }
}

void GaussianSet::add(Gaussian g) {
    if (g.logits.size() != class_count_) {
        throw InvalidParameter("gaussian logits width " + std::to_string(g.logits.size()) +
                               " does not match class count " + std::to_string(class_count_));
    }
    if (g.feature.size() != feature_dim_) {
        throw InvalidParameter("gaussian feature width " + std::to_string(g.feature.size()) +
                               " does not match feature dim " + std::to_string(feature_dim_));
    }
    if (!g.mean.allFinite() || !g.log_scale.allFinite() || !all_finite(g.logits) || !all_finite(g.feature)) {
        throw InvalidParameter("gaussian parameters must be finite");
    }
    gaussians_.push_back(std::move(g));
}

Mat3 covariance_from_scale_rotation(const Vec3 &scale, const Quaternion &q) {
    if (!(scale.array() > 0.0).all()) {
        throw InvalidParameter("covariance scale components must be positive");
    }
    const Mat3 r = q.to_matrix();
    const Vec3 s2 = scale.array().square();
    Mat3 sigma = r * s2.asDiagonal() * r.transpose();
    // Exact symmetry regardless of rounding in the triple product.
    return 0.5 * (sigma + sigma.transpose());
}

double evaluate_density(const Gaussian &g, const Vec3 &x) {
    const Mat3 r = g.rotation.to_matrix();
    // Work in the Gaussian's principal frame: Σ⁻¹ = R S⁻² Rᵀ.
    const Vec3 local = r.transpose() * (x - g.mean);
    const Vec3 inv_s = (-g.log_scale).array().exp();
    const double quad = (local.array() * inv_s.array()).square().sum();
    return std::exp(-0.5 * quad);
}

GaussianSet transform_gaussian_set(const GaussianSet &set, const Pose &transform) {
    GaussianSet out(set.class_count(), set.feature_dim());
    out.reserve(set.size());
    const Quaternion qt = Quaternion::from_matrix(transform.rotation);
    for (const Gaussian &g : set) {
        Gaussian moved = g;
        moved.mean = transform.apply(g.mean);
        moved.rotation = qt * g.rotation;
        out.add(std::move(moved));
    }
    return out;
}

} // namespace worldkit
