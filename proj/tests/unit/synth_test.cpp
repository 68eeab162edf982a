#include "worldkit/error.hpp"
#include "worldkit/synth.hpp"

#include <Eigen/Geometry>
#include <gtest/gtest.h>

#include <cmath>
#include <limits>

using namespace worldkit;

namespace {

SceneSpec empty_scene(int frames = 1) {
    SceneKnobs k;
    k.min_boxes = k.max_boxes = 0;
    k.frames = frames;
    return generate_scene(1, k);
}

// Camera at `height` looking along ego +x with no pitch, odd size so one
// pixel sits on the optical axis.
Camera level_camera(int size, double height) {
    Mat3 r;
    r.col(0) = Vec3(0, -1, 0);
    r.col(1) = Vec3(0, 0, -1);
    r.col(2) = Vec3(1, 0, 0);
    return Camera::with_fov(size, size, M_PI / 2, Pose::make(r, Vec3(0, 0, height)));
}

// Independent ray/box test: intersect the six face planes in box-local
// coordinates and keep hits that land on the face rectangle.
double brute_box_hit(const BoxPrimitive &box, const Vec3 &origin, const Vec3 &dir, double time) {
    const double c = std::cos(box.yaw), s = std::sin(box.yaw);
    auto to_local = [&](const Vec3 &v) { return Vec3(c * v.x() + s * v.y(), -s * v.x() + c * v.y(), v.z()); };
    const Vec3 o = to_local(origin - box.center_at(time));
    const Vec3 d = to_local(dir);
    double best = std::numeric_limits<double>::infinity();
    for (int axis = 0; axis < 3; ++axis) {
        if (d[axis] == 0.0) continue;
        for (double sign : {-1.0, 1.0}) {
            const double t = (sign * box.half_extents[axis] - o[axis]) / d[axis];
            if (t < 0.0) continue;
            const Vec3 p = o + t * d;
            bool on_face = true;
            for (int k = 0; k < 3; ++k) {
                if (k != axis && std::abs(p[k]) > box.half_extents[k] + 1e-12) on_face = false;
            }
            if (on_face) best = std::min(best, t);
        }
    }
    return best;
}

struct BruteHit {
    double depth = std::numeric_limits<double>::infinity();
    int label = 0;
};

BruteHit brute_cast(const SceneSpec &scene, double time, const Vec3 &origin, const Vec3 &dir) {
    BruteHit best;
    if (dir.z() != 0.0) {
        const double t = -origin.z() / dir.z();
        const Vec3 p = origin + t * dir;
        if (t >= 0.0 && std::max(std::abs(p.x()), std::abs(p.y())) <= scene.ground_half_extent) {
            best = {t, scene.ground_class};
        }
    }
    for (const BoxPrimitive &b : scene.boxes) {
        const double t = brute_box_hit(b, origin, dir, time);
        if (t < best.depth) best = {t, b.class_id};
    }
    return best;
}

// A 1x1 camera at `from` whose optical axis points at `to`.
Camera aimed_camera(const Vec3 &from, const Vec3 &to) {
    const Vec3 z = (to - from).normalized();
    Vec3 x = z.cross(Vec3::UnitZ());
    if (x.norm() < 1e-6) x = Vec3::UnitX();
    x.normalize();
    Mat3 r;
    r.col(0) = x;
    r.col(1) = z.cross(x);
    r.col(2) = z;
    return Camera::make(1.0, 1.0, 0.0, 0.0, 1, 1, Pose::make(r, from));
}

} // namespace

// ---- generate_scene ----

TEST(GenerateScene, DeterministicForSeed) {
    EXPECT_EQ(scene_to_json(generate_scene(42)), scene_to_json(generate_scene(42)));
    EXPECT_NE(scene_to_json(generate_scene(42)), scene_to_json(generate_scene(43)));
}

TEST(GenerateScene, ZeroBoxesIsGroundOnly) {
    const SceneSpec s = empty_scene();
    EXPECT_TRUE(s.boxes.empty());
    const ReconTargets t = oracle_render(s, 0, 0);
    for (std::size_t p = 0; p < t.labels.pixels(); ++p) {
        if (t.dense_depth.valid[p]) EXPECT_EQ(t.labels.label[p], scene_class::ground);
    }
}

TEST(GenerateScene, BoxCountAndNonOverlap) {
    SceneKnobs k;
    k.min_boxes = 3;
    k.max_boxes = 6;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const SceneSpec s = generate_scene(seed, k);
        EXPECT_GE(s.boxes.size(), 3u);
        EXPECT_LE(s.boxes.size(), 6u);
        EXPECT_GE(s.camera_rig.size(), 1u);
        for (const BoxPrimitive &b : s.boxes) {
            EXPECT_LT(b.class_id, s.class_count);
            EXPECT_LE(b.velocity.norm(), k.max_box_speed + 1e-12);
        }
        // Lattice points of each footprint must not fall inside any other box.
        for (std::size_t i = 0; i < s.boxes.size(); ++i) {
            const BoxPrimitive &a = s.boxes[i];
            const double c = std::cos(a.yaw), sn = std::sin(a.yaw);
            for (double u = -a.half_extents.x(); u <= a.half_extents.x(); u += 0.05)
                for (double v = -a.half_extents.y(); v <= a.half_extents.y(); v += 0.05) {
                    const Vec3 p = a.center + Vec3(c * u - sn * v, sn * u + c * v, 0.0);
                    for (std::size_t j = 0; j < s.boxes.size(); ++j) {
                        if (j == i) continue;
                        const Vec3 q(p.x(), p.y(), s.boxes[j].center.z());
                        ASSERT_FALSE(s.boxes[j].contains(q, 0.0)) << "seed " << seed << " boxes " << i << "," << j;
                    }
                }
        }
    }
}

TEST(GenerateScene, InconsistentKnobsThrow) {
    SceneKnobs k;
    k.min_boxes = 5;
    k.max_boxes = 2;
    EXPECT_THROW(generate_scene(1, k), InvalidParameter);
}

TEST(GenerateScene, EgoWaypointsFollowConstantSpeed) {
    SceneKnobs k;
    k.min_boxes = k.max_boxes = 0;
    k.ego_speed = 2.0;
    k.frames = 8;
    const SceneSpec s = generate_scene(3, k);
    const std::vector<Vec2> w = ego_waypoints(s, 1, 6);
    ASSERT_EQ(w.size(), 6u);
    for (int i = 0; i < 6; ++i) {
        EXPECT_NEAR(w[i].x(), 1.0 * (i + 1), 1e-12);
        EXPECT_NEAR(w[i].y(), 0.0, 1e-12);
    }
    EXPECT_NEAR(s.next_from_current(0).translation.x(), -1.0, 1e-12);
}

// ---- oracle_render ----

TEST(OracleRender, SkyIsInvalidDepthWithEmptyLabel) {
    SceneSpec s = empty_scene();
    // pitched 0.6 rad above the horizon with a 90° field of view: the top rows see sky
    s.camera_rig = {rig_camera(17, 17, M_PI / 2, 0.0, -0.6, 1.5)};
    const ReconTargets t = oracle_render(s, 0, 0);
    for (int u = 0; u < 17; ++u) {
        const std::size_t p = t.dense_depth.index(u, 0);
        EXPECT_FALSE(t.dense_depth.valid[p]);
        EXPECT_FALSE(t.sparse_depth.valid[p]);
        EXPECT_TRUE(t.labels.valid[p]);
        EXPECT_EQ(t.labels.label[p], scene_class::empty);
    }
}

TEST(OracleRender, BoxFaceAtFourMeters) {
    SceneSpec s = empty_scene();
    BoxPrimitive box;
    box.center = Vec3(5.0, 0.0, 1.0);
    box.half_extents = Vec3(1.0, 1.0, 1.0);
    s.boxes = {box};
    s.camera_rig = {level_camera(33, 1.0)};
    const ReconTargets t = oracle_render(s, 0, 0);
    const std::size_t centre = t.dense_depth.index(16, 16);
    ASSERT_TRUE(t.dense_depth.valid[centre]);
    EXPECT_EQ(t.dense_depth.depth[centre], 4.0);
    EXPECT_EQ(t.labels.label[centre], scene_class::static_box);
    // camera z-depth is 4 on the whole visible face
    const std::size_t off = t.dense_depth.index(20, 13);
    EXPECT_NEAR(t.dense_depth.depth[off], 4.0, 1e-12);
}

TEST(OracleRender, GroundAtFortyFiveDegrees) {
    SceneSpec s = empty_scene();
    s.camera_rig = {rig_camera(33, 33, M_PI / 2, 0.0, M_PI / 4, 1.5)};
    const ReconTargets t = oracle_render(s, 0, 0);
    const std::size_t centre = t.dense_depth.index(16, 16);
    EXPECT_NEAR(t.dense_depth.depth[centre], 1.5 * std::sqrt(2.0), 1e-12);
    EXPECT_EQ(t.labels.label[centre], scene_class::ground);
}

TEST(OracleRender, MatchesBruteForceIntersection) {
    for (std::uint64_t seed : {5u, 6u}) {
        SceneKnobs k;
        k.image_size = 24;
        k.frames = 3;
        const SceneSpec s = generate_scene(seed, k);
        for (int t = 0; t < 3; ++t)
            for (int c = 0; c < static_cast<int>(s.camera_rig.size()); ++c) {
                const ReconTargets r = oracle_render(s, t, c);
                const Camera cam = s.world_camera(t, c);
                for (int v = 0; v < cam.height; ++v)
                    for (int u = 0; u < cam.width; ++u) {
                        const Vec3 dir = cam.world_from_cam.rotation * cam.pixel_direction(u, v);
                        const BruteHit h = brute_cast(s, t * s.frame_dt, cam.world_from_cam.translation, dir);
                        const std::size_t p = r.dense_depth.index(u, v);
                        const bool expect_valid = h.depth <= s.max_range;
                        ASSERT_EQ(bool(r.dense_depth.valid[p]), expect_valid) << u << "," << v;
                        if (!expect_valid) continue;
                        EXPECT_NEAR(r.dense_depth.depth[p], h.depth, 1e-9);
                        EXPECT_EQ(r.labels.label[p], h.label);
                    }
            }
    }
}

TEST(OracleRender, SparseMaskSubsamplesDense) {
    SceneKnobs k;
    k.image_size = 64;
    const SceneSpec s = generate_scene(9, k);
    std::size_t dense = 0, sparse = 0;
    for (int c = 0; c < 2; ++c) {
        const ReconTargets r = oracle_render(s, 0, c);
        for (std::size_t p = 0; p < r.dense_depth.pixels(); ++p) {
            dense += r.dense_depth.valid[p];
            sparse += r.sparse_depth.valid[p];
            if (r.sparse_depth.valid[p]) {
                EXPECT_TRUE(r.dense_depth.valid[p]);
                EXPECT_EQ(r.sparse_depth.depth[p], r.dense_depth.depth[p]);
            }
        }
    }
    const double rate = double(sparse) / double(dense);
    EXPECT_GT(rate, 0.03);
    EXPECT_LT(rate, 0.07);
}

TEST(OracleRender, Deterministic) {
    const SceneSpec s = generate_scene(4);
    const ReconTargets a = oracle_render(s, 2, 1), b = oracle_render(s, 2, 1);
    EXPECT_EQ(a.dense_depth.depth, b.dense_depth.depth);
    EXPECT_EQ(a.sparse_depth.valid, b.sparse_depth.valid);
    EXPECT_EQ(a.labels.label, b.labels.label);
}

TEST(OracleRender, OutOfRangeFrameThrows) {
    const SceneSpec s = generate_scene(4);
    EXPECT_THROW(oracle_render(s, s.frames(), 0), InvalidParameter);
    EXPECT_THROW(oracle_render(s, -1, 0), InvalidParameter);
    EXPECT_THROW(scene_occupancy_gt(s, s.frames()), InvalidParameter);
}

// ---- scene_occupancy_gt ----

TEST(OccupancyGt, NoBoxesOnlyGroundLayer) {
    const OccupancyGrid g = scene_occupancy_gt(empty_scene(), 0);
    // default voxel height 0.8: only the layer centred at z = 0.2 is within half a voxel of the ground
    for (int iz = 0; iz < g.spec.nz; ++iz)
        for (int iy = 0; iy < g.spec.ny; ++iy)
            for (int ix = 0; ix < g.spec.nx; ++ix)
                EXPECT_EQ(g.at(ix, iy, iz), iz == 1 ? scene_class::ground : scene_class::empty);
}

TEST(OccupancyGt, UnitBoxAtVoxelCentre) {
    SceneSpec s = empty_scene();
    OccSpec spec;
    BoxPrimitive box;
    box.center = spec.voxel_center(20, 9, 4);
    box.half_extents = Vec3::Constant(0.5);
    s.boxes = {box};
    const OccupancyGrid g = scene_occupancy_gt(s, 0, spec);
    EXPECT_EQ(g.at(20, 9, 4), scene_class::static_box);
    EXPECT_EQ(g.at(21, 9, 4), scene_class::empty);
    EXPECT_EQ(g.at(20, 9, 5), scene_class::empty);
}

TEST(OccupancyGt, MovingBoxShiftsOneVoxelPerFrame) {
    SceneSpec s = empty_scene(4);
    s.ego_trajectory.assign(4, Pose::identity()); // parked ego
    OccSpec spec; // 1 m voxels in x and y
    BoxPrimitive box;
    box.center = Vec3(-4.0, 3.0, 1.4);
    box.half_extents = Vec3(1.2, 0.9, 1.0);
    box.class_id = scene_class::moving_box;
    box.velocity = Vec3(1.0 / s.frame_dt, 0.0, 0.0);
    s.boxes = {box};
    for (int t = 0; t + 1 < 4; ++t) {
        const OccupancyGrid a = scene_occupancy_gt(s, t, spec), b = scene_occupancy_gt(s, t + 1, spec);
        std::size_t moving = 0;
        for (int iz = 0; iz < spec.nz; ++iz)
            for (int iy = 0; iy < spec.ny; ++iy)
                for (int ix = 0; ix + 1 < spec.nx; ++ix) {
                    const bool was = a.at(ix, iy, iz) == scene_class::moving_box;
                    EXPECT_EQ(was, b.at(ix + 1, iy, iz) == scene_class::moving_box);
                    moving += was;
                }
        EXPECT_GT(moving, 0u);
    }
}

TEST(OccupancyGt, ConsistentWithRayCast) {
    const SceneSpec s = generate_scene(12);
    const OccSpec spec;
    const OccupancyGrid g = scene_occupancy_gt(s, 0, spec);
    const Vec3 eye = s.world_camera(0, 0).world_from_cam.translation;
    const double diag = spec.voxel_size().norm();
    int checked = 0;
    for (int iz = 0; iz < spec.nz; ++iz)
        for (int iy = 0; iy < spec.ny; ++iy)
            for (int ix = 0; ix < spec.nx; ++ix) {
                if (g.at(ix, iy, iz) == kEmptyLabel) continue;
                Vec3 centre = s.ego_pose(0).apply(spec.voxel_center(ix, iy, iz));
                // ground voxels are labelled from the plane, so aim at the plane point below the centre
                if (g.at(ix, iy, iz) == scene_class::ground) centre.z() = 0.0;
                const ReconTargets r = oracle_render(s, 0, aimed_camera(eye, centre));
                ASSERT_TRUE(r.dense_depth.valid[0]);
                EXPECT_LE(r.dense_depth.depth[0], (centre - eye).norm() + diag);
                ++checked;
            }
    EXPECT_GT(checked, 100);
}

// ---- oracle Gaussians, flow and features ----

TEST(EncodeFeature, Layout) {
    const VecX f = encode_feature(2, Vec3(10, -5, 3), Vec3(1, 2, 0), 4, 8);
    VecX expected(8);
    expected << 0, 0, 1, 0, 1.0, -0.5, 0.1, 0.2;
    EXPECT_TRUE(f.isApprox(expected, 1e-15));
    EXPECT_EQ(encode_feature(1, Vec3::Zero(), Vec3::Zero(), 4, 3).size(), 3);
    EXPECT_EQ(encode_feature(1, Vec3::Zero(), Vec3::Zero(), 4, 10).tail(2), Eigen::Vector2d::Zero());
    EXPECT_EQ(default_feature_dim(4), 8);
}

TEST(SceneGaussians, BoxPointsMoveRigidlyWithTheBox) {
    SceneKnobs k;
    k.moving_fraction = 1.0;
    k.frames = 3;
    const SceneSpec s = generate_scene(21, k);
    const GaussianSet a = scene_gaussians(s, 0), b = scene_gaussians(s, 1);
    ASSERT_EQ(a.size(), b.size());
    const Pose next = s.next_from_current(0);
    const std::vector<Vec3> flow = oracle_flow(s, 0, a);
    std::size_t moved = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const int cls = int(std::distance(a[i].feature.data(),
                                          std::max_element(a[i].feature.data(), a[i].feature.data() + s.class_count)));
        if (cls != scene_class::moving_box) continue;
        // position at t+1 in ego t+1 = next(μ + Δμ)
        EXPECT_LT((next.apply(a[i].mean + flow[i]) - b[i].mean).norm(), 1e-9);
        ++moved;
    }
    EXPECT_GT(moved, 0u);
}

TEST(OracleFlow, ZeroOutsideMovingBoxes) {
    SceneKnobs k;
    k.moving_fraction = 1.0;
    k.frames = 2;
    const SceneSpec s = generate_scene(22, k);
    const GaussianSet set = scene_gaussians(s, 0);
    const std::vector<Vec3> flow = oracle_flow(s, 0, set);
    const Mat3 ego_rot_t = s.ego_pose(0).rotation.transpose();
    for (std::size_t i = 0; i < set.size(); ++i) {
        const Vec3 w = s.ego_pose(0).apply(set[i].mean);
        const BoxPrimitive *owner = nullptr;
        for (const BoxPrimitive &b : s.boxes)
            if (b.contains(w, 0.0, 0.3)) owner = &b;
        const Vec3 expected = owner ? Vec3(ego_rot_t * owner->velocity * s.frame_dt) : Vec3::Zero();
        EXPECT_LT((flow[i] - expected).norm(), 1e-12);
    }
}

TEST(AnnotateFeatures, ClassFromPrimitive) {
    const SceneSpec s = generate_scene(23);
    GaussianSet set = scene_gaussians(s, 0);
    const GaussianSet reference = set;
    for (Gaussian &g : set) g.feature.setZero();
    annotate_features(set, s, 0);
    std::size_t agree = 0;
    for (std::size_t i = 0; i < set.size(); ++i) agree += set[i].feature.isApprox(reference[i].feature, 1e-12);
    EXPECT_GT(double(agree) / set.size(), 0.95);
}

// ---- JSON ----

TEST(SceneJson, RoundTrip) {
    const SceneSpec s = generate_scene(31);
    const SceneSpec r = scene_from_json(scene_to_json(s));
    EXPECT_EQ(scene_to_json(r), scene_to_json(s));
    ASSERT_EQ(r.boxes.size(), s.boxes.size());
    for (std::size_t i = 0; i < s.boxes.size(); ++i) {
        EXPECT_EQ(r.boxes[i].center, s.boxes[i].center);
        EXPECT_EQ(r.boxes[i].yaw, s.boxes[i].yaw);
        EXPECT_EQ(r.boxes[i].velocity, s.boxes[i].velocity);
        EXPECT_EQ(r.boxes[i].class_id, s.boxes[i].class_id);
    }
    const ReconTargets a = oracle_render(s, 1, 0), b = oracle_render(r, 1, 0);
    EXPECT_EQ(a.dense_depth.depth, b.dense_depth.depth);
    EXPECT_EQ(a.sparse_depth.valid, b.sparse_depth.valid);
}

TEST(SceneJson, RejectsBadDocuments) {
    EXPECT_ANY_THROW(scene_from_json("{not json"));
    EXPECT_ANY_THROW(scene_from_json("{\"schema_version\": 99}"));
}
