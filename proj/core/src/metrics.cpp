#include "worldkit/metrics.hpp"

#include "worldkit/error.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>

namespace worldkit {

ConfusionTally tally_confusion(const OccupancyGrid &pred, const OccupancyGrid &gt) {
    if (!(pred.spec == gt.spec) || pred.labels.size() != gt.labels.size()) {
        throw InvalidParameter("occupancy grids have different specs");
    }
    const auto c = static_cast<std::size_t>(gt.spec.class_count);
    ConfusionTally t;
    t.tp.assign(c, 0);
    t.fp.assign(c, 0);
    t.fn.assign(c, 0);
    for (std::size_t i = 0; i < gt.labels.size(); ++i) {
        const std::uint8_t p = pred.labels[i], g = gt.labels[i];
        if (p >= c || g >= c) throw InvalidParameter("occupancy label out of range");
        if (p == g) {
            ++t.tp[p];
        } else {
            ++t.fp[p];
            ++t.fn[g];
        }
        const bool po = p != kEmptyLabel, go = g != kEmptyLabel;
        t.occupied_tp += po && go;
        t.occupied_fp += po && !go;
        t.occupied_fn += !po && go;
    }
    return t;
}

IouReport semantic_iou(const OccupancyGrid &pred, const OccupancyGrid &gt) {
    const ConfusionTally t = tally_confusion(pred, gt);
    IouReport r;
    double sum = 0.0;
    int evaluated = 0;
    for (int c = 1; c < gt.spec.class_count; ++c) {
        ClassIou ci{c, t.tp[c], t.fp[c], t.fn[c], 0.0, false};
        const std::size_t denom = ci.tp + ci.fp + ci.fn;
        if (denom > 0) {
            ci.evaluated = true;
            ci.iou = static_cast<double>(ci.tp) / static_cast<double>(denom);
            sum += ci.iou;
            ++evaluated;
        }
        r.per_class.push_back(ci);
    }
    r.miou = evaluated ? sum / evaluated : 1.0;
    const std::size_t occ = t.occupied_tp + t.occupied_fp + t.occupied_fn;
    r.iou = occ ? static_cast<double>(t.occupied_tp) / static_cast<double>(occ) : 1.0;
    return r;
}

ForecastReport forecast_metrics(const std::vector<OccupancyGrid> &preds, const std::vector<OccupancyGrid> &gts) {
    if (preds.empty() || preds.size() != gts.size()) {
        throw InvalidParameter("forecast_metrics: need equal, non-empty prediction and ground-truth lists");
    }
    ForecastReport r;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        r.steps.push_back(semantic_iou(preds[i], gts[i]));
        r.miou += r.steps.back().miou;
        r.iou += r.steps.back().iou;
    }
    r.miou /= static_cast<double>(preds.size());
    r.iou /= static_cast<double>(preds.size());
    return r;
}

double l2_error(const Trajectory &pred, const Trajectory &gt) {
    if (pred.empty() || pred.size() != gt.size()) throw InvalidParameter("l2_error: trajectory length mismatch");
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) sum += (pred[i] - gt[i]).norm();
    return sum / static_cast<double>(pred.size());
}

std::vector<double> waypoint_headings(const Trajectory &traj) {
    std::vector<double> yaw(traj.size(), 0.0);
    if (traj.size() == 1) {
        if (traj[0].norm() > 0.0) yaw[0] = std::atan2(traj[0].y(), traj[0].x());
        return yaw;
    }
    double previous = 0.0;
    for (std::size_t i = 0; i + 1 < traj.size(); ++i) {
        const Vec2 d = traj[i + 1] - traj[i];
        yaw[i] = d.norm() > 0.0 ? std::atan2(d.y(), d.x()) : previous;
        previous = yaw[i];
    }
    if (!traj.empty()) yaw.back() = traj.size() > 1 ? yaw[traj.size() - 2] : 0.0;
    return yaw;
}

bool box_overlaps_cell(const Vec2 &center, double yaw, double half_length, double half_width, const Vec2 &cell_min,
                       const Vec2 &cell_max) {
    const Vec2 ax(std::cos(yaw), std::sin(yaw));
    const Vec2 ay(-std::sin(yaw), std::cos(yaw));
    const Vec2 cell_c = 0.5 * (cell_min + cell_max);
    const Vec2 cell_h = 0.5 * (cell_max - cell_min);
    const Vec2 d = cell_c - center;
    const Vec2 axes[4] = {Vec2::UnitX(), Vec2::UnitY(), ax, ay};
    for (const Vec2 &a : axes) {
        const double r_box = half_length * std::abs(ax.dot(a)) + half_width * std::abs(ay.dot(a));
        const double r_cell = cell_h.x() * std::abs(a.x()) + cell_h.y() * std::abs(a.y());
        if (std::abs(d.dot(a)) > r_box + r_cell) return false; // touching still overlaps
    }
    return true;
}

bool trajectory_collides(const CollisionScene &scene, int ignore_label) {
    const std::size_t n = scene.trajectory.size();
    if (scene.occupancy.empty() || (scene.occupancy.size() != 1 && scene.occupancy.size() != n)) {
        throw InvalidParameter("collision scene needs one occupancy grid or one per waypoint");
    }
    if (!(scene.footprint.length > 0.0 && scene.footprint.width > 0.0)) {
        throw InvalidParameter("ego footprint dimensions must be positive");
    }
    const std::vector<double> yaw = waypoint_headings(scene.trajectory);
    const double hl = 0.5 * scene.footprint.length, hw = 0.5 * scene.footprint.width;
    for (std::size_t i = 0; i < n; ++i) {
        const OccupancyGrid &grid = scene.occupancy[scene.occupancy.size() == 1 ? 0 : i];
        const OccSpec &s = grid.spec;
        const Vec3 vs = s.voxel_size();
        const Vec2 c = scene.trajectory[i];
        const double reach = std::hypot(hl, hw);
        const int x0 = std::max(0, static_cast<int>(std::floor((c.x() - reach - s.x_min) / vs.x())) - 1);
        const int x1 = std::min(s.nx - 1, static_cast<int>(std::floor((c.x() + reach - s.x_min) / vs.x())) + 1);
        const int y0 = std::max(0, static_cast<int>(std::floor((c.y() - reach - s.y_min) / vs.y())) - 1);
        const int y1 = std::min(s.ny - 1, static_cast<int>(std::floor((c.y() + reach - s.y_min) / vs.y())) + 1);
        for (int iy = y0; iy <= y1; ++iy)
            for (int ix = x0; ix <= x1; ++ix) {
                bool obstacle = false;
                for (int iz = 0; iz < s.nz && !obstacle; ++iz) {
                    const std::uint8_t l = grid.at(ix, iy, iz);
                    obstacle = l != kEmptyLabel && l != ignore_label;
                }
                if (!obstacle) continue;
                const Vec2 lo(s.x_min + ix * vs.x(), s.y_min + iy * vs.y());
                if (box_overlaps_cell(c, yaw[i], hl, hw, lo, lo + vs.head<2>())) return true;
            }
    }
    return false;
}

double collision_rate(const std::vector<CollisionScene> &scenes, int ignore_label) {
    if (scenes.empty()) throw InvalidParameter("collision_rate: no scenes");
    std::size_t hits = 0;
    for (const CollisionScene &s : scenes) hits += trajectory_collides(s, ignore_label);
    return 100.0 * static_cast<double>(hits) / static_cast<double>(scenes.size());
}

void write_iou_csv(std::ostream &out, const IouReport &report) {
    out << "class_id,tp,fp,fn,iou\n" << std::fixed << std::setprecision(6);
    for (const ClassIou &c : report.per_class) {
        out << c.class_id << ',' << c.tp << ',' << c.fp << ',' << c.fn << ',';
        if (c.evaluated) {
            out << c.iou;
        } else {
            out << "nan";
        }
        out << '\n';
    }
    out << "miou,,,," << report.miou << "\niou,,,," << report.iou << '\n';
}

} // namespace worldkit
