#include "run_config.hpp"

#include "worldkit/error.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace worldkit::cli {

using nlohmann::json;

namespace {

json scene_json(const SceneKnobs &k) {
    return {{"min_boxes", k.min_boxes},       {"max_boxes", k.max_boxes},     {"moving_fraction", k.moving_fraction},
            {"max_box_speed", k.max_box_speed}, {"ego_speed", k.ego_speed},   {"ego_yaw_rate", k.ego_yaw_rate},
            {"frames", k.frames},             {"image_size", k.image_size},   {"camera_fov", k.camera_fov},
            {"camera_pitch", k.camera_pitch}, {"camera_height", k.camera_height}, {"placement_half", k.placement_half}};
}

json bev_json(const BevSpec &b) {
    return {{"x_min", b.x_min}, {"x_max", b.x_max}, {"y_min", b.y_min}, {"y_max", b.y_max}, {"z_min", b.z_min},
            {"z_max", b.z_max}, {"nx", b.nx},       {"ny", b.ny},       {"z_bins", b.z_bins}};
}

json occ_json(const OccSpec &o) {
    return {{"x_min", o.x_min}, {"x_max", o.x_max}, {"y_min", o.y_min}, {"y_max", o.y_max},
            {"z_min", o.z_min}, {"z_max", o.z_max}, {"nx", o.nx},       {"ny", o.ny},
            {"nz", o.nz},       {"class_count", o.class_count}};
}

json optim_json(const OptimSettings &o) {
    return {{"fit_iters", o.fit_iters},     {"fit_step", o.fit_step},       {"flow_iters", o.flow_iters},
            {"flow_step", o.flow_step},     {"flow_hidden", o.flow_hidden}, {"flow_transitions", o.flow_transitions},
            {"plan_steps", o.plan_steps},   {"plan_step", o.plan_step},     {"plan_batch", o.plan_batch},
            {"plan_scenes", o.plan_scenes}};
}

// Recursive merge that only accepts keys already present in `base`.
void merge_known(json &base, const json &patch, const std::string &path) {
    if (!patch.is_object()) throw ConfigError((path.empty() ? std::string("config") : path) + ": expected an object");
    for (auto it = patch.begin(); it != patch.end(); ++it) {
        const std::string key = path.empty() ? it.key() : path + "." + it.key();
        if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
        json &slot = base[it.key()];
        const json &v = it.value();
        if (slot.is_object()) {
            merge_known(slot, v, key);
        } else if (slot.is_number_integer()) {
            if (!v.is_number_integer()) throw ConfigError(key + ": expected an integer");
            slot = v;
        } else if (slot.is_number()) {
            if (!v.is_number()) throw ConfigError(key + ": expected a number");
            slot = v.get<double>();
        } else if (slot.is_string()) {
            if (!v.is_string()) throw ConfigError(key + ": expected a string");
            slot = v;
        }
    }
}

json parse_override(const std::string &item) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + item + "' is not key=value");
    const std::string key = item.substr(0, eq), raw = item.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    json patch = value;
    std::string rest = key;
    std::vector<std::string> parts;
    for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest = rest.substr(pos + 1)) {
        parts.push_back(rest.substr(0, pos));
    }
    parts.push_back(rest);
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
        if (it->empty()) throw ConfigError("override '" + item + "' has an empty key segment");
        patch = json{{*it, patch}};
    }
    return patch;
}

template <class T> T field(const json &j, const char *key) { return j.at(key).get<T>(); }

} // namespace

json config_to_json(const RunConfig &c) {
    return {{"seed", c.seed},
            {"output_dir", c.output_dir},
            {"scene", scene_json(c.scene)},
            {"gaussians", c.gaussians},
            {"bev", bev_json(c.bev)},
            {"occ", occ_json(c.occ)},
            {"optim", optim_json(c.optim)},
            {"horizon", c.horizon},
            {"forecast_steps", c.forecast_steps},
            {"tau", c.tau},
            {"loss", {{"depth", c.loss.depth}, {"pseudo_depth", c.loss.pseudo_depth}, {"semantic", c.loss.semantic}}},
            {"bev_weight", c.bev_weight},
            {"gradcheck",
             {{"scenes", c.gradcheck.scenes},
              {"gaussians", c.gradcheck.gaussians},
              {"image", c.gradcheck.image},
              {"threshold", c.gradcheck.threshold}}}};
}

RunConfig config_from_json(const json &doc) {
    json j = config_to_json(RunConfig{});
    merge_known(j, doc, "");
    RunConfig c;
    if (!j.at("seed").is_number_unsigned()) throw ConfigError("seed: must be non-negative");
    c.seed = field<std::uint64_t>(j, "seed");
    c.output_dir = field<std::string>(j, "output_dir");

    const json &s = j.at("scene");
    c.scene.min_boxes = field<int>(s, "min_boxes");
    c.scene.max_boxes = field<int>(s, "max_boxes");
    c.scene.moving_fraction = field<double>(s, "moving_fraction");
    c.scene.max_box_speed = field<double>(s, "max_box_speed");
    c.scene.ego_speed = field<double>(s, "ego_speed");
    c.scene.ego_yaw_rate = field<double>(s, "ego_yaw_rate");
    c.scene.frames = field<int>(s, "frames");
    c.scene.image_size = field<int>(s, "image_size");
    c.scene.camera_fov = field<double>(s, "camera_fov");
    c.scene.camera_pitch = field<double>(s, "camera_pitch");
    c.scene.camera_height = field<double>(s, "camera_height");
    c.scene.placement_half = field<double>(s, "placement_half");

    c.gaussians = field<int>(j, "gaussians");

    const json &b = j.at("bev");
    c.bev.x_min = field<double>(b, "x_min");
    c.bev.x_max = field<double>(b, "x_max");
    c.bev.y_min = field<double>(b, "y_min");
    c.bev.y_max = field<double>(b, "y_max");
    c.bev.z_min = field<double>(b, "z_min");
    c.bev.z_max = field<double>(b, "z_max");
    c.bev.nx = field<int>(b, "nx");
    c.bev.ny = field<int>(b, "ny");
    c.bev.z_bins = field<int>(b, "z_bins");

    const json &o = j.at("occ");
    c.occ.x_min = field<double>(o, "x_min");
    c.occ.x_max = field<double>(o, "x_max");
    c.occ.y_min = field<double>(o, "y_min");
    c.occ.y_max = field<double>(o, "y_max");
    c.occ.z_min = field<double>(o, "z_min");
    c.occ.z_max = field<double>(o, "z_max");
    c.occ.nx = field<int>(o, "nx");
    c.occ.ny = field<int>(o, "ny");
    c.occ.nz = field<int>(o, "nz");
    c.occ.class_count = field<int>(o, "class_count");

    const json &p = j.at("optim");
    c.optim.fit_iters = field<int>(p, "fit_iters");
    c.optim.fit_step = field<double>(p, "fit_step");
    c.optim.flow_iters = field<int>(p, "flow_iters");
    c.optim.flow_step = field<double>(p, "flow_step");
    c.optim.flow_hidden = field<int>(p, "flow_hidden");
    c.optim.flow_transitions = field<int>(p, "flow_transitions");
    c.optim.plan_steps = field<int>(p, "plan_steps");
    c.optim.plan_step = field<double>(p, "plan_step");
    c.optim.plan_batch = field<int>(p, "plan_batch");
    c.optim.plan_scenes = field<int>(p, "plan_scenes");

    c.horizon = field<int>(j, "horizon");
    c.forecast_steps = field<int>(j, "forecast_steps");
    c.tau = field<double>(j, "tau");
    const json &l = j.at("loss");
    c.loss.depth = field<double>(l, "depth");
    c.loss.pseudo_depth = field<double>(l, "pseudo_depth");
    c.loss.semantic = field<double>(l, "semantic");
    c.bev_weight = field<double>(j, "bev_weight");

    const json &g = j.at("gradcheck");
    c.gradcheck.scenes = field<int>(g, "scenes");
    c.gradcheck.gaussians = field<int>(g, "gaussians");
    c.gradcheck.image = field<int>(g, "image");
    c.gradcheck.threshold = field<double>(g, "threshold");

    c.validate();
    return c;
}

void RunConfig::validate() const {
    auto require = [](bool ok, const char *what) {
        if (!ok) throw ConfigError(what);
    };
    require(loss.depth >= 0 && loss.pseudo_depth >= 0 && loss.semantic >= 0, "loss: weights must be >= 0");
    require(bev_weight >= 0, "bev_weight: must be >= 0");
    require(gaussians > 0, "gaussians: must be positive");
    require(scene.frames >= 2, "scene.frames: need at least 2 frames");
    require(scene.image_size > 0, "scene.image_size: must be positive");
    require(scene.min_boxes >= 0 && scene.max_boxes >= scene.min_boxes, "scene: need 0 <= min_boxes <= max_boxes");
    require(scene.moving_fraction >= 0 && scene.moving_fraction <= 1, "scene.moving_fraction: must lie in [0, 1]");
    require(horizon > 0, "horizon: must be positive");
    require(forecast_steps > 0, "forecast_steps: must be positive");
    require(forecast_steps < scene.frames, "forecast_steps: must be below scene.frames");
    require(tau > 0, "tau: must be positive");
    require(optim.fit_iters >= 0 && optim.flow_iters >= 0 && optim.plan_steps >= 0, "optim: iteration counts must be >= 0");
    require(optim.fit_step > 0 && optim.flow_step > 0 && optim.plan_step > 0, "optim: step sizes must be positive");
    require(optim.flow_hidden > 0, "optim.flow_hidden: must be positive");
    require(optim.flow_transitions > 0 && optim.flow_transitions < scene.frames,
            "optim.flow_transitions: must lie in [1, scene.frames)");
    require(optim.plan_batch > 0 && optim.plan_scenes > 0, "optim: plan_batch and plan_scenes must be positive");
    require(gradcheck.scenes > 0 && gradcheck.gaussians > 0 && gradcheck.image > 0, "gradcheck: sizes must be positive");
    require(gradcheck.threshold > 0, "gradcheck.threshold: must be positive");
    require(occ.class_count == scene_class::count, "occ.class_count: must match the synthetic class count (4)");
    try {
        bev.validate();
    } catch (const InvalidParameter &e) {
        throw ConfigError(std::string("bev: ") + e.what());
    }
    try {
        occ.validate();
    } catch (const InvalidParameter &e) {
        throw ConfigError(std::string("occ: ") + e.what());
    }
}

RunConfig parse_config(const std::string &text, const std::vector<std::string> &overrides) {
    json doc = json::object();
    if (text.find_first_not_of(" \t\r\n") != std::string::npos) {
        try {
            doc = json::parse(text);
        } catch (const json::parse_error &e) {
            throw ConfigError(std::string("config parse error: ") + e.what());
        }
    }
    json merged = config_to_json(RunConfig{});
    merge_known(merged, doc, "");
    for (const std::string &item : overrides) merge_known(merged, parse_override(item), "");
    try {
        return config_from_json(merged);
    } catch (const json::exception &e) {
        throw ConfigError(e.what());
    }
}

RunConfig load_config(const std::filesystem::path &path, const std::vector<std::string> &overrides) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), overrides);
}

std::uint64_t config_hash(const RunConfig &cfg) {
    json j = config_to_json(cfg);
    j.erase("output_dir");
    std::uint64_t h = 1469598103934665603ULL;
    for (const unsigned char ch : j.dump()) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return h;
}

std::filesystem::path artifact_dir(const RunConfig &cfg) {
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(config_hash(cfg)));
    return std::filesystem::path(cfg.output_dir) / hex;
}

} // namespace worldkit::cli
