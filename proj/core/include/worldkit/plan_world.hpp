#pragma once

#include "worldkit/bev_raster.hpp"
#include "worldkit/geometry.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace worldkit {

/// Query vectors (one per row) tied to the BEV patch they summarize.
struct QuerySet {
    MatX queries;                               ///< N_q x D_q
    std::vector<std::array<int, 2>> patch_origin; ///< first (ix, iy) cell of the patch
    int patch_cells_x = 0;                       ///< patch width in cells
    int patch_cells_y = 0;

    int size() const { return static_cast<int>(queries.rows()); }
    int dim() const { return static_cast<int>(queries.cols()); }
};

/// y = x W + b applied to row vectors. W is in x out, b is 1 x out.
struct Affine {
    MatX weight;
    MatX bias;

    static Affine zeros(int in, int out);
    /// Xavier-uniform weight, zero bias.
    static Affine random(int in, int out, std::uint64_t seed);
    int in() const { return static_cast<int>(weight.rows()); }
    int out() const { return static_cast<int>(weight.cols()); }
    MatX operator()(const MatX &x) const;
};

/// Pre-norm single-head attention block:
///   Q1 = Q + softmax(LN1(Q) Wq (LN1(C) Wk)^T / sqrt(D)) LN1(C) Wv Wo
///   Q2 = Q1 + relu(LN2(Q1) W1 + b1) W2 + b2
/// LN(x) = norm(x) ⊙ gamma + beta, one parameter pair per norm. Self-attention
/// passes C = Q.
struct AttentionBlock {
    MatX ln1_gamma, ln1_beta; // 1 x D
    MatX wq, wk, wv, wo;      // D x D
    MatX ln2_gamma, ln2_beta; // 1 x D
    MatX w1, b1;              // D x H, 1 x H
    MatX w2, b2;              // H x D, 1 x D

    static AttentionBlock random(int dim, int ff_hidden, std::uint64_t seed);
    int dim() const { return static_cast<int>(wq.rows()); }
};

inline constexpr double kLayerNormEpsilon = 1e-5;

/// Scale and shift maps of the motion-aware normalization, both 2·N_f → D_q.
struct MlnMaps {
    Affine gamma;
    Affine beta;
};

/// Mean-pools each of n×n equal patches of the grid (row-major over patches,
/// y outer) and projects it: proj maps channels → D_q. Throws
/// InvalidParameter when the grid is not divisible into n×n patches or the
/// projection width differs from the channel count.
QuerySet extract_scene_queries(const BevGrid &bev, int patches_per_side, const Affine &proj);

/// Throws InvalidParameter on a width mismatch.
MatX attention_block(const AttentionBlock &block, const MatX &queries, const MatX &context);
/// The softmax weight matrix (N_q x N_c) used inside attention_block.
MatX attention_weights(const AttentionBlock &block, const MatX &queries, const MatX &context);

/// Waypoint queries cross-attend to the scene through `blocks` in order; row
/// i of head(result) is waypoint i.
Trajectory predict_trajectory(const MatX &waypoint_queries, const QuerySet &scene,
                              const std::vector<AttentionBlock> &blocks, const Affine &head);

/// Row-major flatten (x0, y0, x1, y1, ...) as a 1 x 2N row.
MatX flatten_trajectory(const Trajectory &traj);

/// LN(q) ⊙ (1 + gamma(flatten(traj))) + beta(flatten(traj)) per query; LN has
/// no learned affine part here.
QuerySet mln_condition(const QuerySet &scene, const Trajectory &traj, const MlnMaps &mln);

/// mln_condition followed by self-attention through `blocks`.
QuerySet predict_next_queries(const QuerySet &scene, const Trajectory &traj, const MlnMaps &mln,
                              const std::vector<AttentionBlock> &blocks);

/// current + unproj(query of the patch holding the cell), broadcast over each
/// patch; weights are copied. Throws InvalidParameter for patch origins
/// outside the grid or an unproj width that differs from the channel count.
BevGrid fuse_future_bev(const QuerySet &next, const BevGrid &current, const Affine &unproj);

struct PlanLoss {
    double total = 0.0;
    double reg = 0.0; ///< mean absolute waypoint error per coordinate
    double bev = 0.0; ///< bev_l2_loss
};

/// total = reg + bev. Throws InvalidParameter on length mismatch.
PlanLoss plan_loss(const Trajectory &pred, const Trajectory &gt, const BevGrid &bev_pred, const BevGrid &bev_target);

struct PlannerConfig {
    int patches_per_side = 4;
    int query_dim = 32;
    int horizon = 6; ///< waypoints at 2 Hz
    int scene_blocks = 2;
    int waypoint_blocks = 2;
    int future_blocks = 2;
    int ff_hidden = 64;
};

/// Every trainable tensor of the planning world model.
struct PlannerModel {
    PlannerConfig config;
    int bev_channels = 0;
    Affine scene_proj;                        // channels -> D_q
    std::vector<AttentionBlock> scene_blocks; // self-attention over scene queries
    MatX waypoint_queries;                    // N_f x D_q
    std::vector<AttentionBlock> waypoint_blocks;
    Affine head; // D_q -> 2
    MlnMaps mln;
    std::vector<AttentionBlock> future_blocks;
    Affine unproj; // D_q -> channels

    /// Waypoint queries are 0.02 · N(0, 1); the MLN maps start at zero.
    static PlannerModel random(const PlannerConfig &config, int bev_channels, std::uint64_t seed);

    /// Visits every parameter tensor in a fixed order with a stable name.
    void visit(const std::function<void(const std::string &, MatX &)> &fn);
    void visit(const std::function<void(const std::string &, const MatX &)> &fn) const;
    std::size_t parameter_count() const;
};

struct PlanOutput {
    QuerySet scene;      ///< after the scene self-attention blocks
    Trajectory trajectory;
    QuerySet next;
    BevGrid future_bev;
};

PlanOutput plan_forward(const PlannerModel &model, const BevGrid &bev);

struct PlanSample {
    BevGrid bev;        ///< B_t
    BevGrid future_bev; ///< target B_{t+1}
    Trajectory trajectory; ///< ground-truth waypoints in ego frame t
};

struct PlanGradient {
    PlanLoss loss;
    std::vector<MatX> grads; ///< visit order
};

/// Loss of one sample and its gradient w.r.t. every parameter (tape reverse mode).
PlanGradient plan_gradients(const PlannerModel &model, const PlanSample &sample);

struct PlanTrainOptions {
    int steps = 2000;
    double step_size = 1e-3;
    int batch = 4; ///< samples per step, taken round-robin
};

struct PlanTrainStep {
    PlanLoss loss; ///< batch mean before the update
};

/// Adam on the batch-mean plan loss. Throws InvalidParameter on no samples.
std::vector<PlanTrainStep> train_planner(PlannerModel &model, const std::vector<PlanSample> &samples,
                                         const PlanTrainOptions &opt = {});

/// Mean l2_error of plan_forward trajectories over the samples.
double mean_plan_l2(const PlannerModel &model, const std::vector<PlanSample> &samples);

/// CSV rows t,x,y with t the 1-based waypoint index.
void write_trajectory_csv(std::ostream &out, const Trajectory &traj);

// "PLNW" v1: config (7 u32), u32 bev_channels, u32 tensor count, then per
// tensor: u32 name length, name bytes, u32 rows, u32 cols; then all tensor
// data as f64 in the same order.
void write_planner(std::ostream &out, const PlannerModel &model);
PlannerModel read_planner(std::istream &in);
void save_planner(const std::filesystem::path &path, const PlannerModel &model);
PlannerModel load_planner(const std::filesystem::path &path);

} // namespace worldkit
