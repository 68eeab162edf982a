#pragma once

#include "worldkit/geometry.hpp"
#include "worldkit/occupancy.hpp"

#include <cstddef>
#include <iosfwd>
#include <vector>

namespace worldkit {

/// Per-class true/false positive and false negative voxel counts, plus the
/// same counts for the binary occupied-vs-empty view.
struct ConfusionTally {
    std::vector<std::size_t> tp, fp, fn; ///< indexed by label, size class_count
    std::size_t occupied_tp = 0, occupied_fp = 0, occupied_fn = 0;
};

ConfusionTally tally_confusion(const OccupancyGrid &pred, const OccupancyGrid &gt);

struct ClassIou {
    int class_id = 0;
    std::size_t tp = 0, fp = 0, fn = 0;
    double iou = 0.0;
    bool evaluated = false; ///< false when tp + fp + fn == 0
};

struct IouReport {
    double miou = 0.0; ///< mean over non-empty classes with tp + fp + fn > 0
    double iou = 0.0;  ///< occupied-vs-empty
    std::vector<ClassIou> per_class; ///< classes 1..C-1
};

/// Throws InvalidParameter when the grids have different specs. A pair with
/// nothing occupied in either grid scores 1 on both metrics.
IouReport semantic_iou(const OccupancyGrid &pred, const OccupancyGrid &gt);

struct ForecastReport {
    double miou = 0.0; ///< mean of per-step mIoU
    double iou = 0.0;  ///< mean of per-step IoU
    std::vector<IouReport> steps;
};

/// Throws InvalidParameter for empty or unequal-length lists.
ForecastReport forecast_metrics(const std::vector<OccupancyGrid> &preds, const std::vector<OccupancyGrid> &gts);

/// Mean Euclidean distance between matching waypoints. Throws
/// InvalidParameter on a length mismatch or empty input.
double l2_error(const Trajectory &pred, const Trajectory &gt);

/// Ego box dimensions in meters (defaults: a mid-size car).
struct EgoFootprint {
    double length = 4.08;
    double width = 1.85;
};

/// Heading at each waypoint: direction to the next waypoint; the last one
/// reuses the previous heading. The first segment starts at the origin when
/// the trajectory has a single point. Zero-length segments keep the
/// previous heading (0 at the start).
std::vector<double> waypoint_headings(const Trajectory &traj);

/// Closed overlap between a yawed rectangle and an axis-aligned square.
bool box_overlaps_cell(const Vec2 &center, double yaw, double half_length, double half_width, const Vec2 &cell_min,
                       const Vec2 &cell_max);

struct CollisionScene {
    Trajectory trajectory;
    EgoFootprint footprint;
    /// Ground-truth occupancy in the trajectory's ego frame: one grid used at
    /// every waypoint, or one grid per waypoint.
    std::vector<OccupancyGrid> occupancy;
};

/// True when the ego box at any waypoint overlaps, in the xy projection, any
/// voxel that is occupied by a label other than `ignore_label` (the ground).
bool trajectory_collides(const CollisionScene &scene, int ignore_label);

/// Percentage of colliding scenes. Throws InvalidParameter on an empty list.
double collision_rate(const std::vector<CollisionScene> &scenes, int ignore_label);

/// class_id,tp,fp,fn,iou rows followed by miou and iou summary rows.
void write_iou_csv(std::ostream &out, const IouReport &report);

} // namespace worldkit
