#include "worldkit/synth.hpp"

#include "worldkit/error.hpp"
#include "worldkit/parallel.hpp"

#include <Eigen/Geometry>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

namespace worldkit {

namespace {

Mat3 yaw_matrix(double yaw) {
    const double c = std::cos(yaw), s = std::sin(yaw);
    Mat3 r;
    r << c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0;
    return r;
}

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Uniform in [0, 1) from a 64-bit hash.
double hash_unit(std::uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }

// Separating-axis test for two yawed rectangles in the xy plane.
bool footprints_overlap(const Vec2 &ca, const Vec2 &ha, double yaw_a, const Vec2 &cb, const Vec2 &hb,
                        double yaw_b) {
    const Vec2 axes[4] = {{std::cos(yaw_a), std::sin(yaw_a)},
                          {-std::sin(yaw_a), std::cos(yaw_a)},
                          {std::cos(yaw_b), std::sin(yaw_b)},
                          {-std::sin(yaw_b), std::cos(yaw_b)}};
    const Vec2 d = cb - ca;
    for (const Vec2 &axis : axes) {
        const double ra = ha.x() * std::abs(axes[0].dot(axis)) + ha.y() * std::abs(axes[1].dot(axis));
        const double rb = hb.x() * std::abs(axes[2].dot(axis)) + hb.y() * std::abs(axes[3].dot(axis));
        if (std::abs(d.dot(axis)) > ra + rb) return false;
    }
    return true;
}

struct Hit {
    double depth = std::numeric_limits<double>::infinity();
    int label = scene_class::empty;
};

Hit cast_ray(const SceneSpec &scene, double time, const Vec3 &origin, const Vec3 &dir) {
    Hit best;
    if (dir.z() < 0.0) {
        const double s = -origin.z() / dir.z();
        const Vec3 p = origin + s * dir;
        if (s >= 0.0 && std::abs(p.x()) <= scene.ground_half_extent && std::abs(p.y()) <= scene.ground_half_extent) {
            best = {s, scene.ground_class};
        }
    }
    for (const BoxPrimitive &box : scene.boxes) {
        if (const auto s = box.intersect(origin, dir, time); s && *s < best.depth) best = {*s, box.class_id};
    }
    return best;
}

Pose pose_from_json(const nlohmann::json &j) {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 3; ++k) r(i, k) = j.at("rotation").at(i).at(k).get<double>();
    const auto &t = j.at("translation");
    return Pose::make(r, Vec3(t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>()));
}

nlohmann::json pose_to_json(const Pose &p) {
    nlohmann::json rot = nlohmann::json::array();
    for (int i = 0; i < 3; ++i) rot.push_back({p.rotation(i, 0), p.rotation(i, 1), p.rotation(i, 2)});
    return {{"rotation", rot}, {"translation", {p.translation.x(), p.translation.y(), p.translation.z()}}};
}

nlohmann::json vec_to_json(const Vec3 &v) { return {v.x(), v.y(), v.z()}; }
Vec3 vec_from_json(const nlohmann::json &j) {
    return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()};
}

} // namespace

bool BoxPrimitive::contains(const Vec3 &world, double time, double margin) const {
    const Vec3 local = yaw_matrix(yaw).transpose() * (world - center_at(time));
    return (local.cwiseAbs() - half_extents).maxCoeff() <= margin;
}

std::optional<double> BoxPrimitive::intersect(const Vec3 &origin, const Vec3 &dir, double time) const {
    const Mat3 rt = yaw_matrix(yaw).transpose();
    const Vec3 o = rt * (origin - center_at(time));
    const Vec3 d = rt * dir;
    double t_near = -std::numeric_limits<double>::infinity();
    double t_far = std::numeric_limits<double>::infinity();
    for (int i = 0; i < 3; ++i) {
        if (d[i] == 0.0) {
            if (std::abs(o[i]) > half_extents[i]) return std::nullopt;
            continue;
        }
        double a = (-half_extents[i] - o[i]) / d[i];
        double b = (half_extents[i] - o[i]) / d[i];
        if (a > b) std::swap(a, b);
        t_near = std::max(t_near, a);
        t_far = std::min(t_far, b);
    }
    if (t_near > t_far || t_far < 0.0) return std::nullopt;
    return t_near >= 0.0 ? t_near : 0.0; // origin inside the box
}

const Pose &SceneSpec::ego_pose(int t) const {
    if (t < 0 || t >= frames()) {
        throw InvalidParameter("frame " + std::to_string(t) + " outside [0, " + std::to_string(frames()) + ")");
    }
    return ego_trajectory[static_cast<std::size_t>(t)];
}

Camera SceneSpec::world_camera(int t, int index) const {
    if (index < 0 || index >= static_cast<int>(camera_rig.size())) throw InvalidParameter("camera index out of range");
    Camera cam = camera_rig[static_cast<std::size_t>(index)];
    cam.world_from_cam = compose(ego_pose(t), cam.world_from_cam);
    return cam;
}

Camera SceneSpec::camera_in_ego(int t, int index, int frame) const {
    Camera cam = world_camera(t, index);
    cam.world_from_cam = compose(invert(ego_pose(frame)), cam.world_from_cam);
    return cam;
}

Pose SceneSpec::next_from_current(int t) const { return relative_pose(ego_pose(t), ego_pose(t + 1)); }

Vec3 SceneSpec::ego_velocity(int t) const {
    if (frames() < 2) return Vec3::Zero();
    const int a = std::min(t, frames() - 2);
    return (ego_pose(a + 1).translation - ego_pose(a).translation) / frame_dt;
}

Camera rig_camera(int width, int height, double fov, double yaw, double pitch, double height_m) {
    // Camera z looks forward and down, x points right (ego -y), y = z × x.
    const Vec3 z(std::cos(pitch), 0.0, -std::sin(pitch));
    const Vec3 x(0.0, -1.0, 0.0);
    Mat3 r;
    r.col(0) = x;
    r.col(1) = z.cross(x);
    r.col(2) = z;
    const Pose ego_from_cam = Pose::make(yaw_matrix(yaw) * r, Vec3(0.0, 0.0, height_m));
    return Camera::with_fov(width, height, fov, ego_from_cam);
}

SceneSpec generate_scene(std::uint64_t seed, const SceneKnobs &knobs) {
    if (knobs.frames < 1 || knobs.min_boxes < 0 || knobs.max_boxes < knobs.min_boxes) {
        throw InvalidParameter("generate_scene: inconsistent knobs");
    }
    SceneSpec scene;
    scene.seed = seed;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

    double yaw = 0.0;
    Vec3 pos = Vec3::Zero();
    for (int t = 0; t < knobs.frames; ++t) {
        scene.ego_trajectory.push_back(Pose::from_yaw(yaw, pos));
        pos += knobs.ego_speed * scene.frame_dt * Vec3(std::cos(yaw), std::sin(yaw), 0.0);
        yaw += knobs.ego_yaw_rate * scene.frame_dt;
    }
    const double path_end = knobs.ego_speed * scene.frame_dt * knobs.frames;

    const int count = knobs.min_boxes + static_cast<int>(rng() % std::uint64_t(knobs.max_boxes - knobs.min_boxes + 1));
    for (int attempt = 0; static_cast<int>(scene.boxes.size()) < count && attempt < 1000; ++attempt) {
        BoxPrimitive box;
        box.half_extents = Vec3(uniform(0.8, 2.2), uniform(0.6, 1.2), uniform(0.6, 1.5));
        box.center = Vec3(uniform(-knobs.placement_half, knobs.placement_half),
                          uniform(-knobs.placement_half, knobs.placement_half), box.half_extents.z());
        box.yaw = uniform(-M_PI, M_PI);
        const bool moving = unit(rng) < knobs.moving_fraction;
        if (moving) {
            box.class_id = scene_class::moving_box;
            const double speed = uniform(0.5, std::max(0.5, knobs.max_box_speed));
            box.velocity = speed * Vec3(std::cos(box.yaw), std::sin(box.yaw), 0.0);
        }
        const Vec2 c = box.center.head<2>(), h = box.half_extents.head<2>();
        // Keep the ego corridor clear at t = 0.
        const Vec2 corridor_c(0.5 * path_end, 0.0);
        const Vec2 corridor_h(0.5 * path_end + 3.0, 2.5);
        if (footprints_overlap(c, h, box.yaw, corridor_c, corridor_h, 0.0)) continue;
        bool clash = false;
        for (const BoxPrimitive &other : scene.boxes) {
            clash = clash || footprints_overlap(c, h, box.yaw, other.center.head<2>(), other.half_extents.head<2>(),
                                                other.yaw);
        }
        if (!clash) scene.boxes.push_back(box);
    }

    scene.camera_rig.push_back(
        rig_camera(knobs.image_size, knobs.image_size, knobs.camera_fov, 0.0, knobs.camera_pitch, knobs.camera_height));
    scene.camera_rig.push_back(
        rig_camera(knobs.image_size, knobs.image_size, knobs.camera_fov, M_PI, knobs.camera_pitch, knobs.camera_height));
    return scene;
}

SceneSpec canonical_scene(std::uint64_t seed) {
    SceneKnobs knobs;
    knobs.min_boxes = knobs.max_boxes = 0;
    knobs.frames = 1;
    SceneSpec scene = generate_scene(seed, knobs);
    // One static box ahead of the ego so the front camera sees it.
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    BoxPrimitive box;
    box.half_extents = Vec3(1.0 + unit(rng), 0.8 + 0.4 * unit(rng), 0.8 + 0.6 * unit(rng));
    box.center = Vec3(7.0 + 3.0 * unit(rng), -2.0 + 4.0 * unit(rng), box.half_extents.z());
    box.yaw = -0.6 + 1.2 * unit(rng);
    scene.boxes.push_back(box);
    return scene;
}

ReconTargets oracle_render(const SceneSpec &scene, int t, int cam) {
    return oracle_render(scene, t, scene.world_camera(t, cam), cam);
}

ReconTargets oracle_render(const SceneSpec &scene, int t, const Camera &cam, int cam_tag) {
    scene.ego_pose(t);
    const int w = cam.width, h = cam.height;
    ReconTargets out{DepthImage(w, h), DepthImage(w, h), LabelImage(w, h)};
    const double time = t * scene.frame_dt;
    const Vec3 origin = cam.world_from_cam.translation;
    parallel_for(static_cast<std::size_t>(h), [&](std::size_t row) {
        const int v = static_cast<int>(row);
        for (int u = 0; u < w; ++u) {
            const std::size_t p = out.dense_depth.index(u, v);
            // Unit-z direction: the ray parameter is the camera z-depth.
            const Vec3 dir = cam.world_from_cam.apply_direction(cam.pixel_direction(u, v));
            const Hit hit = cast_ray(scene, time, origin, dir);
            out.labels.valid[p] = 1;
            if (hit.depth > scene.max_range || !std::isfinite(hit.depth)) continue;
            out.labels.label[p] = hit.label;
            out.dense_depth.depth[p] = hit.depth;
            out.dense_depth.valid[p] = 1;
            const std::uint64_t key =
                splitmix(scene.seed ^ splitmix(std::uint64_t(t) * 1315423911ULL ^ splitmix(std::uint64_t(cam_tag) * 2654435761ULL + p)));
            if (hash_unit(key) < scene.sparse_rate) {
                out.sparse_depth.depth[p] = hit.depth;
                out.sparse_depth.valid[p] = 1;
            }
        }
    });
    return out;
}

OccupancyGrid scene_occupancy_gt(const SceneSpec &scene, int t, const OccSpec &spec, int ego_frame) {
    OccupancyGrid grid(spec);
    scene.ego_pose(t);
    const Pose &ego = scene.ego_pose(ego_frame < 0 ? t : ego_frame);
    const double time = t * scene.frame_dt;
    const double half_z = 0.5 * spec.voxel_size().z();
    for (int iz = 0; iz < spec.nz; ++iz)
        for (int iy = 0; iy < spec.ny; ++iy)
            for (int ix = 0; ix < spec.nx; ++ix) {
                const Vec3 w = ego.apply(spec.voxel_center(ix, iy, iz));
                std::uint8_t label = kEmptyLabel;
                for (const BoxPrimitive &box : scene.boxes) {
                    if (box.contains(w, time)) {
                        label = static_cast<std::uint8_t>(box.class_id);
                        break;
                    }
                }
                if (label == kEmptyLabel && std::abs(w.z()) <= half_z && std::abs(w.x()) <= scene.ground_half_extent &&
                    std::abs(w.y()) <= scene.ground_half_extent) {
                    label = static_cast<std::uint8_t>(scene.ground_class);
                }
                grid.at(ix, iy, iz) = label;
            }
    return grid;
}

VecX encode_feature(int class_id, const Vec3 &relative_velocity, const Vec3 &object_velocity, int class_count,
                    int feature_dim) {
    VecX full = VecX::Zero(class_count + 4);
    if (class_id >= 0 && class_id < class_count) full[class_id] = 1.0;
    full[class_count + 0] = relative_velocity.x() / 10.0;
    full[class_count + 1] = relative_velocity.y() / 10.0;
    full[class_count + 2] = object_velocity.x() / 10.0;
    full[class_count + 3] = object_velocity.y() / 10.0;
    VecX out = VecX::Zero(feature_dim);
    const Eigen::Index n = std::min<Eigen::Index>(feature_dim, full.size());
    out.head(n) = full.head(n);
    return out;
}

namespace {

VecX feature_for(const SceneSpec &scene, int t, int class_id, const Vec3 &world_velocity, int feature_dim) {
    const Mat3 rt = scene.ego_pose(t).rotation.transpose();
    return encode_feature(class_id, rt * (world_velocity - scene.ego_velocity(t)), rt * world_velocity,
                          scene.class_count, feature_dim);
}

} // namespace

GaussianSet scene_gaussians(const SceneSpec &scene, int t, const OracleGaussianOptions &opt) {
    const int d = opt.feature_dim > 0 ? opt.feature_dim : default_feature_dim(scene.class_count);
    GaussianSet set(scene.class_count, d);
    const Pose ego_from_world = invert(scene.ego_pose(t));
    const double time = t * scene.frame_dt;
    std::vector<Vec3> motion; // per splat, ego frame t, over one frame
    auto peaked = [&](int cls) {
        VecX l = VecX::Zero(scene.class_count);
        l[cls] = opt.logit_peak;
        return l;
    };

    // World-fixed ground lattice inside a window around the ego.
    const Vec3 ego = scene.ego_pose(t).translation;
    const double s = opt.ground_spacing;
    const VecX ground_feature = feature_for(scene, t, scene.ground_class, Vec3::Zero(), d);
    const auto i0 = static_cast<long>(std::ceil((ego.x() - opt.ground_half) / s));
    const auto i1 = static_cast<long>(std::floor((ego.x() + opt.ground_half) / s));
    const auto j0 = static_cast<long>(std::ceil((ego.y() - opt.ground_half) / s));
    const auto j1 = static_cast<long>(std::floor((ego.y() + opt.ground_half) / s));
    const Quaternion ground_q = Quaternion::from_matrix(ego_from_world.rotation);
    for (long i = i0; i <= i1; ++i)
        for (long j = j0; j <= j1; ++j) {
            const Vec3 w((i + 0.5) * s, (j + 0.5) * s, 0.0);
            if (std::abs(w.x()) > scene.ground_half_extent || std::abs(w.y()) > scene.ground_half_extent) continue;
            set.add(Gaussian::make(ego_from_world.apply(w), Vec3(0.6 * s, 0.6 * s, opt.ground_thickness), ground_q, 0.95,
                                   peaked(scene.ground_class), ground_feature));
            motion.push_back(Vec3::Zero());
        }

    for (const BoxPrimitive &box : scene.boxes) {
        const Mat3 world_from_box = yaw_matrix(box.yaw);
        const Quaternion q = Quaternion::from_matrix(ego_from_world.rotation * world_from_box);
        const VecX feature = feature_for(scene, t, box.class_id, box.velocity, d);
        Eigen::Vector3i n;
        Vec3 step;
        for (int a = 0; a < 3; ++a) {
            n[a] = std::max(1, static_cast<int>(std::ceil(2.0 * box.half_extents[a] / opt.box_spacing)));
            step[a] = 2.0 * box.half_extents[a] / n[a];
        }
        for (int a = 0; a < n.x(); ++a)
            for (int b = 0; b < n.y(); ++b)
                for (int c = 0; c < n.z(); ++c) {
                    const Vec3 local = -box.half_extents + Vec3((a + 0.5) * step.x(), (b + 0.5) * step.y(), (c + 0.5) * step.z());
                    const Vec3 w = box.center_at(time) + world_from_box * local;
                    set.add(Gaussian::make(ego_from_world.apply(w), 0.6 * step, q, 0.9, peaked(box.class_id), feature));
                    motion.push_back(ego_from_world.rotation * box.velocity * scene.frame_dt);
                }
    }
    if (opt.camera_clearance <= 0.0) return set;

    // Cameras of frame t and, when it exists, frame t+1, mapped from ego frame t.
    std::vector<std::pair<Pose, int>> cam_from_ego;
    for (int f = t; f <= std::min(t + 1, scene.frames() - 1); ++f) {
        const Pose ego_f_from_t = relative_pose(scene.ego_pose(t), scene.ego_pose(f));
        for (const Camera &cam : scene.camera_rig) {
            cam_from_ego.emplace_back(compose(invert(cam.world_from_cam), ego_f_from_t), f - t);
        }
    }
    GaussianSet kept(set.class_count(), set.feature_dim());
    for (std::size_t k = 0; k < set.size(); ++k) {
        const double reach = opt.camera_clearance * std::exp(set[k].log_scale.maxCoeff());
        bool clear = true;
        for (const auto &[p, dt] : cam_from_ego) {
            const double z = p.apply(set[k].mean + dt * motion[k]).z();
            clear = clear && !(z >= 0.0 && z < reach);
        }
        if (clear) kept.add(set[k]);
    }
    return kept;
}

std::vector<Vec3> oracle_flow(const SceneSpec &scene, int t, const GaussianSet &set, double margin) {
    const Pose &ego = scene.ego_pose(t);
    const double time = t * scene.frame_dt;
    std::vector<Vec3> flow(set.size(), Vec3::Zero());
    for (std::size_t k = 0; k < set.size(); ++k) {
        const Vec3 w = ego.apply(set[k].mean);
        for (const BoxPrimitive &box : scene.boxes) {
            if (box.velocity.isZero() || !box.contains(w, time, margin)) continue;
            flow[k] = ego.rotation.transpose() * (box.velocity * scene.frame_dt);
            break;
        }
    }
    return flow;
}

void annotate_features(GaussianSet &set, const SceneSpec &scene, int t, double margin) {
    const Pose &ego = scene.ego_pose(t);
    const double time = t * scene.frame_dt;
    for (Gaussian &g : set) {
        const Vec3 w = ego.apply(g.mean);
        int cls = scene_class::empty;
        Vec3 vel = Vec3::Zero();
        for (const BoxPrimitive &box : scene.boxes) {
            if (box.contains(w, time, margin)) {
                cls = box.class_id;
                vel = box.velocity;
                break;
            }
        }
        if (cls == scene_class::empty && std::abs(w.z()) <= margin) cls = scene.ground_class;
        g.feature = cls == scene_class::empty ? VecX::Zero(set.feature_dim())
                                              : feature_for(scene, t, cls, vel, set.feature_dim());
    }
}

std::vector<Vec2> ego_waypoints(const SceneSpec &scene, int t, int horizon) {
    std::vector<Vec2> out;
    for (int k = 1; k <= horizon; ++k) {
        out.push_back(relative_pose(scene.ego_pose(t + k), scene.ego_pose(t)).translation.head<2>());
    }
    return out;
}

std::string scene_to_json(const SceneSpec &scene) {
    nlohmann::json j;
    j["schema_version"] = scene.schema_version;
    j["seed"] = scene.seed;
    j["class_count"] = scene.class_count;
    j["ground_class"] = scene.ground_class;
    j["ground_half_extent"] = scene.ground_half_extent;
    j["frame_dt"] = scene.frame_dt;
    j["max_range"] = scene.max_range;
    j["sparse_rate"] = scene.sparse_rate;
    j["boxes"] = nlohmann::json::array();
    for (const BoxPrimitive &b : scene.boxes) {
        j["boxes"].push_back({{"center", vec_to_json(b.center)},
                              {"half_extents", vec_to_json(b.half_extents)},
                              {"yaw", b.yaw},
                              {"class_id", b.class_id},
                              {"velocity", vec_to_json(b.velocity)}});
    }
    j["ego_trajectory"] = nlohmann::json::array();
    for (const Pose &p : scene.ego_trajectory) j["ego_trajectory"].push_back(pose_to_json(p));
    j["camera_rig"] = nlohmann::json::array();
    for (const Camera &c : scene.camera_rig) {
        j["camera_rig"].push_back({{"fx", c.fx},
                                   {"fy", c.fy},
                                   {"cx", c.cx},
                                   {"cy", c.cy},
                                   {"width", c.width},
                                   {"height", c.height},
                                   {"ego_from_camera", pose_to_json(c.world_from_cam)}});
    }
    return j.dump(2) + "\n";
}

SceneSpec scene_from_json(const std::string &text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception &e) {
        throw FormatError(std::string("scene JSON: ") + e.what());
    }
    try {
        SceneSpec s;
        s.schema_version = j.at("schema_version").get<int>();
        if (s.schema_version != 1) throw FormatError("unsupported scene schema_version");
        s.seed = j.at("seed").get<std::uint64_t>();
        s.class_count = j.at("class_count").get<int>();
        s.ground_class = j.at("ground_class").get<int>();
        s.ground_half_extent = j.at("ground_half_extent").get<double>();
        s.frame_dt = j.at("frame_dt").get<double>();
        s.max_range = j.at("max_range").get<double>();
        s.sparse_rate = j.at("sparse_rate").get<double>();
        for (const auto &b : j.at("boxes")) {
            BoxPrimitive box;
            box.center = vec_from_json(b.at("center"));
            box.half_extents = vec_from_json(b.at("half_extents"));
            box.yaw = b.at("yaw").get<double>();
            box.class_id = b.at("class_id").get<int>();
            box.velocity = vec_from_json(b.at("velocity"));
            if (box.class_id < 0 || box.class_id >= s.class_count) throw FormatError("box class_id out of range");
            s.boxes.push_back(box);
        }
        for (const auto &p : j.at("ego_trajectory")) s.ego_trajectory.push_back(pose_from_json(p));
        for (const auto &c : j.at("camera_rig")) {
            s.camera_rig.push_back(Camera::make(c.at("fx").get<double>(), c.at("fy").get<double>(),
                                                c.at("cx").get<double>(), c.at("cy").get<double>(),
                                                c.at("width").get<int>(), c.at("height").get<int>(),
                                                pose_from_json(c.at("ego_from_camera"))));
        }
        if (s.camera_rig.empty()) throw FormatError("scene has no cameras");
        return s;
    } catch (const nlohmann::json::exception &e) {
        throw FormatError(std::string("scene JSON: ") + e.what());
    }
}

void save_scene(const std::filesystem::path &path, const SceneSpec &scene) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open " + path.string() + " for writing");
    out << scene_to_json(scene);
}

SceneSpec load_scene(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return scene_from_json(buf.str());
}

} // namespace worldkit
