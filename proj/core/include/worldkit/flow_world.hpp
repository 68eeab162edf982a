#pragma once

#include "worldkit/bev_raster.hpp"
#include "worldkit/geometry.hpp"
#include "worldkit/recon_loss.hpp"
#include "worldkit/splat_render.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <vector>

namespace worldkit {

/// Per-Gaussian displacement in the current ego frame, aligned to set order.
using FlowField = std::vector<Vec3>;

/// Two-layer perceptron mapping a Gaussian feature to its flow:
/// Δμ = w2 · max(0, w1 f + b1) + b2.
struct FlowHead {
    MatX w1; // hidden x input
    VecX b1;
    MatX w2; // 3 x hidden
    VecX b2;

    static FlowHead zeros(int input_dim, int hidden = 32);
    /// He-scaled first layer, small second layer, zero biases.
    static FlowHead random(int input_dim, int hidden, std::uint64_t seed);

    int input_dim() const { return static_cast<int>(w1.cols()); }
    int hidden() const { return static_cast<int>(w1.rows()); }
    Vec3 operator()(const VecX &feature) const;

    /// Parameters in the order w1 (row-major), b1, w2 (row-major), b2.
    std::size_t parameter_count() const;
    VecX flatten() const;
    void unflatten(const VecX &flat);
};

/// Δμ_k = head(f_k). Throws InvalidParameter on a feature width mismatch.
FlowField predict_flow(const FlowHead &head, const GaussianSet &set);

/// Adds Δμ to every mean; nothing else changes.
GaussianSet apply_flow(const GaussianSet &set, const FlowField &flow);

/// μ' = T(μ + Δμ), rotation composed with T, all other attributes kept.
/// Throws InvalidParameter when the flow length differs from the set size.
GaussianSet propagate_gaussians(const GaussianSet &set, const FlowField &flow, const Pose &next_from_current);

/// rasterize_bev(propagate_gaussians(set, predict_flow(head, set), T), spec).
BevGrid predict_future_latent(const GaussianSet &set, const FlowHead &head, const Pose &next_from_current,
                              const BevSpec &spec = {});

/// A supervised camera in the next frame. The camera pose is expressed in the
/// next ego frame.
struct FlowView {
    Camera camera;
    ReconTargets targets;
};

struct FlowLossOptions {
    LossWeights weights;
    double bev_weight = 1.0;
    RenderOptions render;
    BevSpec bev;
};

struct FlowLoss {
    double total = 0.0;
    Stage1Loss render; ///< mean over views
    double bev = 0.0;
};

/// Render loss of the propagated set in the next frame (mean over views)
/// plus bev_weight * bev_l2_loss against `target_bev`.
FlowLoss flow_stage2_loss(const GaussianSet &set, const FlowField &flow, const Pose &next_from_current,
                          const std::vector<FlowView> &views, const BevGrid &target_bev,
                          const FlowLossOptions &opt = {});
FlowLoss flow_stage2_loss(const GaussianSet &set, const FlowHead &head, const Pose &next_from_current,
                          const std::vector<FlowView> &views, const BevGrid &target_bev,
                          const FlowLossOptions &opt = {});

struct FlowLossGradient {
    FlowLoss loss;
    VecX head; ///< same layout as FlowHead::flatten()
};

/// Loss and its exact gradient with respect to the head parameters.
FlowLossGradient flow_stage2_gradients(const GaussianSet &set, const FlowHead &head, const Pose &next_from_current,
                                       const std::vector<FlowView> &views, const BevGrid &target_bev,
                                       const FlowLossOptions &opt = {});

/// One supervised transition for flow training.
struct FlowSample {
    GaussianSet set;
    Pose next_from_current;
    std::vector<FlowView> views;
    BevGrid target_bev;
};

struct FlowTrainOptions {
    int iters = 200;
    double step_size = 1e-2;
    FlowLossOptions loss;
};

/// Adam on the mean loss over all samples. Returns one FlowLoss per step
/// (evaluated before that step's update).
std::vector<FlowLoss> train_flow_head(FlowHead &head, const std::vector<FlowSample> &samples,
                                      const FlowTrainOptions &opt);

/// Refiner that shifts every mean by head(feature); usable as an occupancy
/// forecast refiner.
std::function<void(GaussianSet &)> flow_refiner(FlowHead head);

// "FLWH" v1: u32 input_dim, u32 hidden, then f32 parameters in flatten() order.
void write_flow_head(std::ostream &out, const FlowHead &head);
FlowHead read_flow_head(std::istream &in);
void save_flow_head(const std::filesystem::path &path, const FlowHead &head);
FlowHead load_flow_head(const std::filesystem::path &path);

} // namespace worldkit
