#pragma once

#include "worldkit/geometry.hpp"
#include "worldkit/image.hpp"
#include "worldkit/recon_loss.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace worldkit {

/// Rasterizer constants. The defaults are the standard splatting choices; only
/// `min_valid_weight` is commonly changed (see fit_stage1).
struct RenderOptions {
    double near_plane = 0.1;         ///< meters
    double alpha_max = 0.999;        ///< clamp keeps transmittance positive
    double alpha_min = 1.0 / 255.0;  ///< contributions below this are skipped
    double cov2d_floor = 0.3;        ///< px² added to the projected covariance diagonal
    double footprint_sigma = 3.0;    ///< footprint truncation radius in standard deviations
    double min_valid_weight = 0.5;   ///< accumulated weight below which a pixel has no depth
    int tile_size = 16;              ///< parallel work unit, pixels per side
};

/// A Gaussian projected into one camera.
struct Projected2D {
    Vec2 mean2d;     ///< pixels
    Mat2 cov2d;      ///< pixels², regularized
    double depth;    ///< camera-space z, meters
    int source_index;
};

/// First-order (EWA) projection. Empty when the mean is in front of the near
/// plane or the truncated footprint covers no pixel centre.
std::optional<Projected2D> project_gaussian(const Gaussian &g, const Camera &cam, int source_index = 0,
                                            const RenderOptions &opt = {});

struct RenderResult {
    DepthImage depth;
    SemanticImage semantics;
};

/// Depth-ordered alpha compositing of depth and semantic logits. Gaussians
/// are sorted by ascending camera depth, ties broken by set index.
RenderResult render_views(const GaussianSet &set, const Camera &cam, const RenderOptions &opt = {});

/// Gradient of a scalar loss with respect to one Gaussian's raw parameters.
/// `rotation` is the derivative through quaternion normalization, i.e. it is
/// tangent to the unit sphere at the stored quaternion.
struct GaussianGrad {
    Vec3 mean = Vec3::Zero();
    Vec3 log_scale = Vec3::Zero();
    Vec4 rotation = Vec4::Zero();
    double opacity_logit = 0.0;
    VecX logits;
};

struct GradientBundle {
    std::vector<GaussianGrad> grads;

    static GradientBundle zeros(const GaussianSet &set);
    std::size_t size() const { return grads.size(); }
    bool all_finite() const;
    GradientBundle &operator+=(const GradientBundle &rhs);
};

struct RenderLoss {
    Stage1Loss loss;
    GradientBundle grad;
    RenderResult views;
};

/// Renders, evaluates stage1_loss against `targets`, and back-propagates it
/// exactly through the compositing chain. Throws InvalidParameter when the
/// targets do not match the camera.
RenderLoss render_with_gradients(const GaussianSet &set, const Camera &cam, const ReconTargets &targets,
                                 const LossWeights &weights = {}, const RenderOptions &opt = {});

/// Hash of every discrete decision the renderer and loss make: which
/// Gaussians reach each pixel and in which order, which are clamped, which
/// pixels are valid, and (when targets are given) the sign of every depth
/// residual. The loss is smooth between parameter values with equal
/// signatures, which is what finite-difference checks need to know.
std::uint64_t render_signature(const GaussianSet &set, const Camera &cam, const ReconTargets *targets = nullptr,
                               const RenderOptions &opt = {});

} // namespace worldkit
