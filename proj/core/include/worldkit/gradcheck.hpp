#pragma once

#include "worldkit/recon_loss.hpp"
#include "worldkit/splat_render.hpp"

#include <cstdint>
#include <string>

namespace worldkit {

// Central finite-difference verification of render_with_gradients. The
// oracle only calls render_views + stage1_loss; it never touches the
// backward pass it checks.

struct GradCheckOptions {
    double step = 1e-4;
    /// Gradients smaller than this are compared absolutely instead of relatively.
    double abs_floor = 1e-6;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    /// Probes whose ±step evaluations straddle a discrete boundary (clamp,
    /// footprint truncation, cull, validity, ordering, |·| kink). The loss is
    /// not differentiable there, so they are excluded.
    std::size_t skipped = 0;
    std::string worst; ///< "gaussian <k> <parameter>[<i>]" of the largest error

    void merge(const GradCheckReport &other);
};

double relative_error(double analytic, double numeric, double abs_floor);

GradCheckReport check_render_gradients(const GaussianSet &set, const Camera &cam, const ReconTargets &targets,
                                       const LossWeights &weights = {}, const RenderOptions &render = {},
                                       const GradCheckOptions &opt = {});

/// Seeded random instance: `gaussians` splats in front of a width x height
/// camera with random depth/label targets.
struct GradCheckScene {
    GaussianSet set;
    Camera camera;
    ReconTargets targets;
};
GradCheckScene make_gradcheck_scene(std::uint64_t seed, int gaussians = 20, int width = 32, int height = 32,
                                    int classes = 4);

} // namespace worldkit
