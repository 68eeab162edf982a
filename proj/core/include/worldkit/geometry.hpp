#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <vector>

namespace worldkit {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

/// Future ego waypoints (x, y) in meters, current ego frame, ordered by time.
using Trajectory = std::vector<Vec2>;

/// Unit quaternion (w, x, y, z). Every constructor renormalizes, so the stored
/// value always has unit norm within a few ulps.
class Quaternion {
public:
    Quaternion() = default;
    /// Throws InvalidParameter for a zero or non-finite input.
    Quaternion(double w, double x, double y, double z);

    static Quaternion from_axis_angle(const Vec3 &axis, double angle);
    static Quaternion from_matrix(const Mat3 &rotation);

    double w() const { return w_; }
    double x() const { return x_; }
    double y() const { return y_; }
    double z() const { return z_; }
    Vec4 coeffs() const { return {w_, x_, y_, z_}; }

    Mat3 to_matrix() const;

    /// Hamilton product; the result is renormalized.
    Quaternion operator*(const Quaternion &rhs) const;

    friend bool operator==(const Quaternion &, const Quaternion &) = default;

private:
    double w_ = 1.0, x_ = 0.0, y_ = 0.0, z_ = 0.0;
};

/// Rigid transform. Applying a Pose named `b_from_a` maps a-frame
/// coordinates into frame b.
struct Pose {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    /// Validates orthonormality (det +1) within 1e-6.
    static Pose make(const Mat3 &rotation, const Vec3 &translation);
    static Pose identity() { return {}; }
    static Pose from_translation(const Vec3 &t);
    /// Rotation about +z by `yaw` radians followed by translation `t`.
    static Pose from_yaw(double yaw, const Vec3 &t = Vec3::Zero());

    Vec3 apply(const Vec3 &p) const { return rotation * p + translation; }
    Vec3 apply_direction(const Vec3 &d) const { return rotation * d; }
};

/// (lhs ∘ rhs): apply rhs first, then lhs.
Pose compose(const Pose &lhs, const Pose &rhs);
Pose invert(const Pose &pose);

/// Returns b_from_a given both frames' world poses.
Pose relative_pose(const Pose &world_from_a, const Pose &world_from_b);

/// Pinhole camera. Camera frame is x right, y down, z forward; the centre of
/// pixel (i, j) sits at image coordinates (i, j).
struct Camera {
    double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
    int width = 1, height = 1;
    Pose world_from_cam;

    static Camera make(double fx, double fy, double cx, double cy, int width, int height,
                       const Pose &world_from_cam);
    /// Square-pixel camera with the given horizontal field of view and a
    /// principal point at the image centre.
    static Camera with_fov(int width, int height, double horizontal_fov, const Pose &world_from_cam);

    Vec3 to_camera(const Vec3 &world) const;
    /// Unit-z ray direction (camera frame) through image coordinates (u, v).
    Vec3 pixel_direction(double u, double v) const;
};

/// One semantic 3D Gaussian. Scale and opacity are stored in unconstrained
/// form (log-scale and logit) so optimizer steps never leave the valid set.
struct Gaussian {
    Vec3 mean = Vec3::Zero();
    Vec3 log_scale = Vec3::Zero();
    Quaternion rotation;
    double opacity_logit = 0.0;
    VecX logits;
    VecX feature;

    /// Validated construction from constrained values: scale > 0, opacity in [0, 1].
    static Gaussian make(const Vec3 &mean, const Vec3 &scale, const Quaternion &rotation,
                         double opacity, VecX logits, VecX feature);

    Vec3 scale() const { return log_scale.array().exp(); }
    double opacity() const;
    Mat3 covariance() const;
};

double sigmoid(double x);
double logit(double p);

/// Ordered list of Gaussians sharing class count C and feature width D.
class GaussianSet {
public:
    GaussianSet() = default;
    GaussianSet(int class_count, int feature_dim);

    int class_count() const { return class_count_; }
    int feature_dim() const { return feature_dim_; }
    std::size_t size() const { return gaussians_.size(); }
    bool empty() const { return gaussians_.empty(); }

    /// Throws InvalidParameter when the logits/feature widths disagree with C/D
    /// or a value is non-finite.
    void add(Gaussian g);
    void reserve(std::size_t n) { gaussians_.reserve(n); }

    const Gaussian &operator[](std::size_t i) const { return gaussians_[i]; }
    Gaussian &operator[](std::size_t i) { return gaussians_[i]; }

    auto begin() const { return gaussians_.begin(); }
    auto end() const { return gaussians_.end(); }
    auto begin() { return gaussians_.begin(); }
    auto end() { return gaussians_.end(); }

    const std::vector<Gaussian> &gaussians() const { return gaussians_; }

private:
    int class_count_ = 1;
    int feature_dim_ = 1;
    std::vector<Gaussian> gaussians_;
};

/// Σ = R S Sᵀ Rᵀ. Throws InvalidParameter for a non-positive scale.
Mat3 covariance_from_scale_rotation(const Vec3 &scale, const Quaternion &q);

/// exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ)).
double evaluate_density(const Gaussian &g, const Vec3 &x);

/// Rigidly moves means and rotations; every other attribute is copied.
GaussianSet transform_gaussian_set(const GaussianSet &set, const Pose &transform);

} // namespace worldkit
