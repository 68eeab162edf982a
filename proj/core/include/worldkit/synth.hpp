#pragma once

#include "worldkit/geometry.hpp"
#include "worldkit/occupancy.hpp"
#include "worldkit/recon_loss.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace worldkit {

/// Class ids used by the synthetic scenes. Id 0 is the explicit empty class.
namespace scene_class {
inline constexpr int empty = 0;
inline constexpr int ground = 1;
inline constexpr int static_box = 2;
inline constexpr int moving_box = 3;
inline constexpr int count = 4;
} // namespace scene_class

/// Oriented box resting in the world frame, moving at constant velocity.
struct BoxPrimitive {
    Vec3 center = Vec3::Zero(); ///< at time 0, meters
    Vec3 half_extents = Vec3::Ones();
    double yaw = 0.0;
    int class_id = scene_class::static_box;
    Vec3 velocity = Vec3::Zero(); ///< m/s

    Vec3 center_at(double time) const { return center + time * velocity; }
    /// Closed containment test, optionally inflated by `margin` on every side.
    bool contains(const Vec3 &world, double time, double margin = 0.0) const;
    /// Ray parameter of the first hit with s >= 0, if any.
    std::optional<double> intersect(const Vec3 &origin, const Vec3 &dir, double time) const;
};

/// A procedurally generated driving scene. World frame: z up, ground plane
/// z = 0. Ego frame: x forward, y left, z up, origin on the ground.
struct SceneSpec {
    int schema_version = 1;
    std::uint64_t seed = 0;
    int class_count = scene_class::count;
    int ground_class = scene_class::ground;
    double ground_half_extent = 40.0; ///< ground is the square |x|,|y| <= this
    double frame_dt = 0.5;            ///< seconds between frames (2 Hz)
    double max_range = 40.0;          ///< depth beyond this has no return
    double sparse_rate = 0.05;        ///< LiDAR-analog sampling rate
    std::vector<BoxPrimitive> boxes;
    std::vector<Pose> ego_trajectory; ///< world_from_ego per frame
    std::vector<Camera> camera_rig;   ///< `world_from_cam` holds ego_from_cam

    int frames() const { return static_cast<int>(ego_trajectory.size()); }
    /// Throws InvalidParameter for t outside [0, frames).
    const Pose &ego_pose(int t) const;
    /// Camera `index` placed in the world at frame t.
    Camera world_camera(int t, int index) const;
    /// Camera `index` with its pose expressed in the ego frame of `frame`.
    Camera camera_in_ego(int t, int index, int frame) const;
    /// ego_{t+1} from ego_t.
    Pose next_from_current(int t) const;
    /// Ego velocity in the world frame at frame t (finite difference).
    Vec3 ego_velocity(int t) const;
};

struct SceneKnobs {
    int min_boxes = 3;
    int max_boxes = 6;
    double moving_fraction = 0.5;
    double max_box_speed = 3.0; ///< m/s
    double ego_speed = 2.0;     ///< m/s along the ego heading
    double ego_yaw_rate = 0.0;  ///< rad/s
    int frames = 8;
    int image_size = 64;
    double camera_fov = M_PI / 2.0;
    double camera_pitch = 0.35; ///< radians below the horizon
    double camera_height = 1.5; ///< meters
    double placement_half = 14.0;
};

/// Deterministic for a fixed seed. Boxes do not intersect each other or the
/// ego corridor at t = 0.
SceneSpec generate_scene(std::uint64_t seed, const SceneKnobs &knobs = {});

/// The fitting benchmark scene: one static box, one frame.
SceneSpec canonical_scene(std::uint64_t seed = 7);

/// Camera pitched `pitch` below the horizon, looking along ego yaw `yaw`.
Camera rig_camera(int width, int height, double fov, double yaw, double pitch, double height_m);

/// Exact ray cast of the scene at frame t for camera `cam`. Depth is camera
/// z-depth; pixels without a hit within max_range are invalid in both depth
/// maps and carry a valid empty label.
ReconTargets oracle_render(const SceneSpec &scene, int t, int cam);
/// Same ray cast for an arbitrary world-placed camera.
ReconTargets oracle_render(const SceneSpec &scene, int t, const Camera &world_camera, int cam_tag = 0);

/// Voxel labels of the world at frame t, in the ego frame of `ego_frame`
/// (default: t). Box class if the voxel centre is inside a box, ground class
/// if within half a voxel of the ground, else empty.
OccupancyGrid scene_occupancy_gt(const SceneSpec &scene, int t, const OccSpec &spec = {}, int ego_frame = -1);

/// Feature layout of the oracle Gaussians: one-hot class (C), then the ego
/// relative velocity (x, y) and the object velocity (x, y), both in the ego
/// frame and divided by 10 m/s. Truncated or zero-padded to `feature_dim`.
VecX encode_feature(int class_id, const Vec3 &relative_velocity, const Vec3 &object_velocity, int class_count,
                    int feature_dim);
inline int default_feature_dim(int class_count) { return class_count + 4; }

struct OracleGaussianOptions {
    double ground_spacing = 1.0;
    double ground_half = 30.0; ///< lattice half-width around the ego
    /// Vertical σ of the ground splats, thick enough to reach the centre of
    /// the ground voxel layer.
    double ground_thickness = 0.2;
    /// When positive, drops splats whose depth in some rig camera of frame t
    /// or t+1 (at its position in that frame) lies in [0, camera_clearance * largest σ).
    /// Such splats linearize into
    /// footprints wider than the image and hide everything behind them, so
    /// sets meant for rendering use 3.
    double camera_clearance = 0.0;
    double box_spacing = 0.5;
    double logit_peak = 6.0;
    int feature_dim = 0; ///< 0 means default_feature_dim
};

/// Reference Gaussian set in the ego frame of frame t: a world-fixed ground
/// lattice near the ego plus a box-local lattice inside every box. Box points
/// keep their box-local positions and order for every t.
GaussianSet scene_gaussians(const SceneSpec &scene, int t, const OracleGaussianOptions &opt = {});

/// Per-Gaussian displacement over one frame for means (ego frame t) that lie
/// inside a moving box; zero elsewhere. Expressed in ego frame t.
std::vector<Vec3> oracle_flow(const SceneSpec &scene, int t, const GaussianSet &set, double margin = 0.3);

/// Rewrites every feature with encode_feature() of the primitive under the
/// Gaussian mean (ego frame t): the containing box, else ground near z = 0,
/// else empty.
void annotate_features(GaussianSet &set, const SceneSpec &scene, int t, double margin = 0.5);

/// Ego positions (x, y) of frames t+1..t+horizon in the ego frame of t.
std::vector<Vec2> ego_waypoints(const SceneSpec &scene, int t, int horizon);

std::string scene_to_json(const SceneSpec &scene);
SceneSpec scene_from_json(const std::string &text);
void save_scene(const std::filesystem::path &path, const SceneSpec &scene);
SceneSpec load_scene(const std::filesystem::path &path);

} // namespace worldkit
