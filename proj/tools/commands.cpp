#include "commands.hpp"

#include "worldkit/error.hpp"
#include "worldkit/flow_world.hpp"
#include "worldkit/gaussian_io.hpp"
#include "worldkit/gradcheck.hpp"
#include "worldkit/image.hpp"
#include "worldkit/metrics.hpp"
#include "worldkit/optim.hpp"
#include "worldkit/parallel.hpp"
#include "worldkit/plan_world.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>

namespace worldkit::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Context {
    const RunConfig &cfg;
    const CommandOptions &opt;
    fs::path dir;
    std::ostream &log;
    int status = kExitOk;
};

std::string indexed(const char *prefix, int k, const char *suffix) {
    return prefix + std::to_string(k) + suffix;
}

void write_text(const fs::path &path, const std::string &text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

void write_json(const fs::path &path, const json &j) { write_text(path, j.dump(2) + "\n"); }

SceneSpec require_scene(const Context &c) {
    const fs::path p = c.dir / "scene.json";
    if (!fs::exists(p)) throw InvalidParameter("missing " + p.string() + "; run synth first");
    return load_scene(p);
}

GaussianSet require_gaussians(const Context &c) {
    const fs::path p = c.dir / "gaussians.gset";
    if (!fs::exists(p)) throw InvalidParameter("missing " + p.string() + "; run fit first");
    return load_gaussian_set(p);
}

OracleGaussianOptions render_safe() {
    OracleGaussianOptions o;
    o.camera_clearance = 3.0;
    return o;
}

void synth(Context &c) {
    const SceneSpec s = generate_scene(c.cfg.seed, c.cfg.scene);
    save_scene(c.dir / "scene.json", s);
    for (int t = 0; t < s.frames(); ++t) {
        const OccupancyGrid gt = scene_occupancy_gt(s, t, c.cfg.occ);
        save_occupancy(c.dir / indexed("gt_t", t, ".occ"), gt);
        if (t == 0) write_occupancy_ppm(c.dir / "gt_t0.ppm", gt);
    }
    c.log << "scene: " << s.boxes.size() << " boxes, " << s.frames() << " frames, " << s.camera_rig.size()
          << " cameras\n";
}

void fit(Context &c) {
    const SceneSpec s = require_scene(c);
    const GaussianSet init = initialize_gaussians(s, c.cfg.gaussians, c.cfg.seed);
    FitOptions o;
    o.iters = c.cfg.optim.fit_iters;
    o.step_size = c.cfg.optim.fit_step;
    o.weights = c.cfg.loss;
    const FitMetrics before = evaluate_fit(s, init, o.frames, o.render);
    FitResult r = fit_stage1(s, init, o);
    const FitMetrics after = evaluate_fit(s, r.set, o.frames, o.render);
    // Features are not fitted; downstream stages read the oracle encoding.
    annotate_features(r.set, s, 0);
    save_gaussian_set(c.dir / "gaussians.gset", r.set);
    std::ofstream trace(c.dir / "fit_trace.csv", std::ios::binary);
    write_loss_trace(trace, r.trace);
    write_json(c.dir / "fit_report.json", {{"gaussians", r.set.size()},
                                           {"iters", o.iters},
                                           {"initial_depth_l1", before.depth_l1},
                                           {"final_depth_l1", after.depth_l1},
                                           {"semantic_accuracy", after.semantic_accuracy},
                                           {"depth_pixels", after.depth_pixels}});
    c.log << "fit: depth L1 " << before.depth_l1 << " -> " << after.depth_l1 << ", semantic accuracy "
          << after.semantic_accuracy << "\n";
}

void gradcheck(Context &c) {
    const GradcheckSettings &g = c.cfg.gradcheck;
    GradCheckReport total;
    for (int i = 0; i < g.scenes; ++i) {
        const GradCheckScene sc = make_gradcheck_scene(c.cfg.seed + static_cast<std::uint64_t>(i), g.gaussians,
                                                       g.image, g.image);
        total.merge(check_render_gradients(sc.set, sc.camera, sc.targets, c.cfg.loss));
    }
    const bool pass = total.max_rel_error < g.threshold;
    write_json(c.dir / "gradcheck.json", {{"scenes", g.scenes},
                                          {"max_rel_error", total.max_rel_error},
                                          {"checked", total.checked},
                                          {"skipped", total.skipped},
                                          {"worst", total.worst},
                                          {"threshold", g.threshold},
                                          {"pass", pass}});
    c.log << "gradcheck: max relative error " << total.max_rel_error << " over " << total.checked << " probes ("
          << total.skipped << " skipped) -> " << (pass ? "pass" : "FAIL") << "\n";
    if (!pass) c.status = kExitValidation;
}

void flow_pretrain(Context &c) {
    const SceneSpec s = require_scene(c);
    const OracleGaussianOptions safe = render_safe();
    std::vector<FlowSample> samples;
    for (int t = 0; t < c.cfg.optim.flow_transitions; ++t) {
        FlowSample fs{scene_gaussians(s, t, safe), s.next_from_current(t), {}, {}};
        for (int cam = 0; cam < static_cast<int>(s.camera_rig.size()); ++cam) {
            fs.views.push_back({s.camera_in_ego(t + 1, cam, t + 1), oracle_render(s, t + 1, cam)});
        }
        fs.target_bev = rasterize_bev(scene_gaussians(s, t + 1), c.cfg.bev);
        samples.push_back(std::move(fs));
    }
    FlowHead head = FlowHead::random(default_feature_dim(s.class_count), c.cfg.optim.flow_hidden, c.cfg.seed);
    FlowTrainOptions o;
    o.iters = c.cfg.optim.flow_iters;
    o.step_size = c.cfg.optim.flow_step;
    o.loss.weights = c.cfg.loss;
    o.loss.bev_weight = c.cfg.bev_weight;
    o.loss.bev = c.cfg.bev;
    const std::vector<FlowLoss> trace = train_flow_head(head, samples, o);
    save_flow_head(c.dir / "flow_head.flwh", head);
    std::ofstream out(c.dir / "flow_trace.csv", std::ios::binary);
    out << "step,total,render,bev\n";
    out.precision(10);
    for (std::size_t i = 0; i < trace.size(); ++i) {
        out << i << ',' << trace[i].total << ',' << trace[i].render.total << ',' << trace[i].bev << '\n';
    }
    json report = {{"transitions", samples.size()}, {"iters", o.iters}};
    if (!trace.empty()) {
        report["initial_loss"] = trace.front().total;
        report["last_loss"] = trace.back().total;
    }
    write_json(c.dir / "flow_report.json", report);
    c.log << "flow-pretrain: " << samples.size() << " transitions, " << trace.size() << " steps";
    if (!trace.empty()) c.log << ", loss " << trace.front().total << " -> " << trace.back().total;
    c.log << "\n";
}

void plan_train(Context &c) {
    const RunConfig &cfg = c.cfg;
    const int n = cfg.optim.plan_scenes;
    std::vector<PlanSample> samples;
    std::vector<SceneSpec> scenes;
    for (int i = 0; i < n; ++i) {
        SceneKnobs k = cfg.scene;
        // Spread ego speeds so the waypoints carry signal.
        k.ego_speed = cfg.scene.ego_speed * (0.25 + 1.5 * (n > 1 ? double(i) / (n - 1) : 0.5));
        k.frames = std::max(k.frames, cfg.horizon + 1);
        SceneSpec s = generate_scene(cfg.seed + 1 + static_cast<std::uint64_t>(i), k);
        samples.push_back({rasterize_bev(scene_gaussians(s, 0), cfg.bev), rasterize_bev(scene_gaussians(s, 1), cfg.bev),
                           ego_waypoints(s, 0, cfg.horizon)});
        scenes.push_back(std::move(s));
    }
    PlannerConfig pc;
    pc.horizon = cfg.horizon;
    PlannerModel model = PlannerModel::random(pc, samples.front().bev.channels(), cfg.seed);
    const double l2_init = mean_plan_l2(model, samples);
    PlanTrainOptions o;
    o.steps = cfg.optim.plan_steps;
    o.step_size = cfg.optim.plan_step;
    o.batch = cfg.optim.plan_batch;
    const std::vector<PlanTrainStep> trace = train_planner(model, samples, o);
    const double l2_final = mean_plan_l2(model, samples);

    std::vector<CollisionScene> pred, gt;
    for (int i = 0; i < n; ++i) {
        const OccupancyGrid occ = scene_occupancy_gt(scenes[i], 0, cfg.occ);
        pred.push_back({plan_forward(model, samples[i].bev).trajectory, EgoFootprint{}, {occ}});
        gt.push_back({samples[i].trajectory, EgoFootprint{}, {occ}});
    }
    const int ground = scenes.front().ground_class;
    const double rate_pred = collision_rate(pred, ground), rate_gt = collision_rate(gt, ground);

    save_planner(c.dir / "planner.plnw", model);
    std::ofstream out(c.dir / "plan_trace.csv", std::ios::binary);
    out << "step,total,L_reg,L_bev\n";
    out.precision(10);
    for (std::size_t i = 0; i < trace.size(); ++i) {
        out << i << ',' << trace[i].loss.total << ',' << trace[i].loss.reg << ',' << trace[i].loss.bev << '\n';
    }
    std::ofstream traj(c.dir / "plan_traj_0.csv", std::ios::binary);
    write_trajectory_csv(traj, pred.front().trajectory);
    write_json(c.dir / "plan_report.json", {{"scenes", n},
                                            {"steps", o.steps},
                                            {"initial_l2", l2_init},
                                            {"final_l2", l2_final},
                                            {"collision_rate_pred", rate_pred},
                                            {"collision_rate_gt", rate_gt}});
    c.log << "plan-train: L2 " << l2_init << " m -> " << l2_final << " m, collision " << rate_pred << "% (gt "
          << rate_gt << "%)\n";
}

void forecast(Context &c) {
    const SceneSpec s = require_scene(c);
    const GaussianSet set = require_gaussians(c);
    std::vector<Pose> steps;
    for (int t = 0; t < c.cfg.forecast_steps; ++t) steps.push_back(s.next_from_current(t));
    Completer completer;
    completer.seed = c.cfg.seed;
    Refiner refiner;
    const fs::path head_path = c.dir / "flow_head.flwh";
    if (fs::exists(head_path)) refiner = flow_refiner(load_flow_head(head_path));
    const OccupancyGrid now = splat_to_occupancy(set, c.cfg.occ, c.cfg.tau);
    save_occupancy(c.dir / "pred_t0.occ", now);
    write_occupancy_ppm(c.dir / "pred_t0.ppm", now);
    const std::vector<OccupancyGrid> grids = forecast_rollout(set, steps, c.cfg.occ, c.cfg.tau, completer, refiner);
    for (std::size_t k = 0; k < grids.size(); ++k) {
        const int t = static_cast<int>(k) + 1;
        save_occupancy(c.dir / indexed("pred_t", t, ".occ"), grids[k]);
        write_occupancy_ppm(c.dir / indexed("pred_t", t, ".ppm"), grids[k]);
    }
    c.log << "forecast: " << grids.size() << " steps" << (refiner ? " with flow refiner" : "") << ", occupied t0 "
          << now.occupied() << ", last " << grids.back().occupied() << "\n";
}

void eval(Context &c) {
    std::vector<OccupancyGrid> preds, gts;
    std::vector<std::string> labels;
    if (!c.opt.pred.empty() || !c.opt.gt.empty()) {
        if (c.opt.pred.size() != c.opt.gt.size()) throw InvalidParameter("eval: --pred and --gt counts differ");
        for (std::size_t i = 0; i < c.opt.pred.size(); ++i) {
            preds.push_back(load_occupancy(c.opt.pred[i]));
            gts.push_back(load_occupancy(c.opt.gt[i]));
            labels.push_back(std::to_string(i));
        }
    } else {
        for (int t = 1; t <= c.cfg.forecast_steps; ++t) {
            const fs::path p = c.dir / indexed("pred_t", t, ".occ"), g = c.dir / indexed("gt_t", t, ".occ");
            if (!fs::exists(p) || !fs::exists(g)) throw InvalidParameter("eval: missing " + p.string() + " or " + g.string());
            preds.push_back(load_occupancy(p));
            gts.push_back(load_occupancy(g));
            labels.push_back("t+" + std::to_string(t));
        }
    }
    const ForecastReport r = forecast_metrics(preds, gts);
    std::ofstream csv(c.dir / "eval.csv", std::ios::binary);
    csv << "step,miou,iou\n";
    json steps = json::array();
    char line[96];
    c.log << "step      mIoU     IoU\n";
    for (std::size_t k = 0; k < r.steps.size(); ++k) {
        std::snprintf(line, sizeof line, "%s,%.6f,%.6f\n", labels[k].c_str(), r.steps[k].miou, r.steps[k].iou);
        csv << line;
        std::snprintf(line, sizeof line, "%-8s %6.3f  %6.3f\n", labels[k].c_str(), r.steps[k].miou, r.steps[k].iou);
        c.log << line;
        std::ofstream per(c.dir / indexed("eval_step", static_cast<int>(k), ".csv"), std::ios::binary);
        write_iou_csv(per, r.steps[k]);
        steps.push_back({{"step", labels[k]}, {"miou", r.steps[k].miou}, {"iou", r.steps[k].iou}});
    }
    std::snprintf(line, sizeof line, "mean,%.6f,%.6f\n", r.miou, r.iou);
    csv << line;
    std::snprintf(line, sizeof line, "%-8s %6.3f  %6.3f\n", "mean", r.miou, r.iou);
    c.log << line;
    write_json(c.dir / "eval.json", {{"miou", r.miou}, {"iou", r.iou}, {"steps", steps}});
}

std::vector<int> argmax_labels(const SemanticImage &s) {
    std::vector<int> out(s.pixels());
    for (std::size_t p = 0; p < out.size(); ++p) out[p] = s.argmax(p);
    return out;
}

void render(Context &c) {
    const SceneSpec s = require_scene(c);
    const fs::path gset = c.dir / "gaussians.gset";
    const GaussianSet set = fs::exists(gset) ? load_gaussian_set(gset) : scene_gaussians(s, 0, render_safe());
    for (int cam = 0; cam < static_cast<int>(s.camera_rig.size()); ++cam) {
        const Camera camera = s.camera_in_ego(0, cam, 0);
        const RenderResult r = render_views(set, camera);
        const std::string tag = "_c" + std::to_string(cam);
        write_depth_pgm(c.dir / ("render" + tag + "_depth.pgm"), r.depth, s.max_range);
        write_label_ppm(c.dir / ("render" + tag + "_labels.ppm"), r.depth.width, r.depth.height,
                        argmax_labels(r.semantics), r.depth.valid);
        const ReconTargets o = oracle_render(s, 0, cam);
        write_depth_pgm(c.dir / ("oracle" + tag + "_depth.pgm"), o.dense_depth, s.max_range);
        write_label_ppm(c.dir / ("oracle" + tag + "_labels.ppm"), o.labels.width, o.labels.height, o.labels.label,
                        o.labels.valid);
    }
    c.log << "render: " << set.size() << " Gaussians, " << s.camera_rig.size() << " cameras\n";
}

const std::map<std::string, std::function<void(Context &)>> &table() {
    static const std::map<std::string, std::function<void(Context &)>> t = {
        {"synth", synth},         {"fit", fit},           {"gradcheck", gradcheck}, {"flow-pretrain", flow_pretrain},
        {"plan-train", plan_train}, {"forecast", forecast}, {"eval", eval},           {"render", render}};
    return t;
}

} // namespace

const std::vector<std::string> &verbs() {
    static const std::vector<std::string> v = {"synth",      "fit",      "gradcheck", "flow-pretrain",
                                               "plan-train", "forecast", "eval",      "render"};
    return v;
}

int run_command(const std::string &verb, const RunConfig &cfg, const CommandOptions &opt, std::ostream &log,
                std::ostream &err) {
    const auto it = table().find(verb);
    if (it == table().end()) {
        err << "unknown command '" << verb << "'\n";
        return kExitValidation;
    }
    set_deterministic(opt.deterministic);
    try {
        cfg.validate();
        Context c{cfg, opt, artifact_dir(cfg), log};
        fs::create_directories(c.dir);
        // The hashed content; output_dir is left out so runs are relocatable.
        json hashed = config_to_json(cfg);
        hashed.erase("output_dir");
        write_json(c.dir / "config.json", hashed);
        const auto start = std::chrono::steady_clock::now();
        it->second(c);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        log << verb << " done in " << secs << " s; artifacts in " << c.dir.string() << "\n";
        return c.status;
    } catch (const ConfigError &e) {
        err << "config error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const InvalidParameter &e) {
        err << verb << ": " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception &e) {
        err << verb << " failed: " << e.what() << "\n";
        return kExitRuntime;
    }
}

} // namespace worldkit::cli
