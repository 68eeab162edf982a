#pragma once

#include "worldkit/geometry.hpp"
#include "worldkit/recon_loss.hpp"
#include "worldkit/splat_render.hpp"
#include "worldkit/synth.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

namespace worldkit {

struct AdamOptions {
    double step_size = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0; ///< decoupled, applied as p -= step_size * weight_decay * p
};

/// Moment accumulators are sized on the first update.
struct OptimState {
    AdamOptions options;
    VecX m;
    VecX v;
    long step = 0;
};

/// One bias-corrected Adam update of a flat parameter vector. Throws
/// InvalidParameter when the gradient or accumulators have the wrong size.
void adam_update(VecX &params, const VecX &grad, OptimState &state);

/// Flat layout per Gaussian: mean[3], log_scale[3], rotation[4], opacity_logit,
/// logits[C]. Features are not optimized.
VecX flatten_parameters(const GaussianSet &set);
VecX flatten_gradients(const GradientBundle &grad, const GaussianSet &set);
/// Writes a flat vector back; quaternions are renormalized.
void unflatten_parameters(GaussianSet &set, const VecX &flat);

/// adam_update in the unconstrained parameterization. The quaternion moves
/// along its tangent gradient and is renormalized afterwards.
void adam_step(GaussianSet &set, const GradientBundle &grad, OptimState &state);

/// Uniform in the union of the camera frusta of frame `frame` (camera chosen
/// round-robin, pixel uniform, depth uniform in [min_depth, max_depth]); scale
/// 0.5 m, opacity logit -2, zero logits, small random features. Means are in
/// the ego frame of `frame`.
GaussianSet initialize_gaussians(const SceneSpec &scene, int count, std::uint64_t seed, int frame = 0,
                                 int feature_dim = 0, double min_depth = 1.0, double max_depth = 25.0);

struct FitOptions {
    std::vector<int> frames{0}; ///< the set lives in the ego frame of frames.front()
    int iters = 500;
    double step_size = 1e-2;
    LossWeights weights;
    /// Training renders count every covered pixel as valid, so thin initial
    /// coverage still yields gradients.
    RenderOptions render = [] {
        RenderOptions r;
        r.min_valid_weight = 0.0;
        return r;
    }();
};

struct FitResult {
    GaussianSet set;
    std::vector<Stage1Loss> trace; ///< loss before each step, mean over views
};

FitResult fit_stage1(const SceneSpec &scene, const GaussianSet &init, const FitOptions &opt = {});

struct FitMetrics {
    double depth_l1 = 0.0;          ///< masked L1 against the dense target
    std::size_t depth_pixels = 0;
    double semantic_accuracy = 0.0; ///< argmax agreement on pixels valid in both
    std::size_t semantic_pixels = 0;
};

/// Render-and-compare over every camera of the given frames.
FitMetrics evaluate_fit(const SceneSpec &scene, const GaussianSet &set, const std::vector<int> &frames,
                        const RenderOptions &render = {});

/// CSV with header step,total,L_d,L_pd,L_sem.
void write_loss_trace(std::ostream &out, const std::vector<Stage1Loss> &trace);

} // namespace worldkit
