#pragma once

#include "worldkit/image.hpp"

#include <cstddef>

namespace worldkit {

/// Weights of the stage-1 reconstruction objective: sparse depth, dense
/// pseudo-depth and semantics.
struct LossWeights {
    double depth = 1.0;
    double pseudo_depth = 0.05;
    double semantic = 1.0;

    friend bool operator==(const LossWeights &, const LossWeights &) = default;
};

/// Supervision for one camera view.
struct ReconTargets {
    DepthImage sparse_depth; ///< LiDAR analog; `valid` is the sparse mask
    DepthImage dense_depth;  ///< pseudo-depth analog
    LabelImage labels;

    /// Throws InvalidParameter unless all three grids are width x height.
    void check_shape(int width, int height) const;
};

/// Mean over the selected pixels. `count == 0` flags an empty selection, in
/// which case `value` is 0.
struct MaskedMean {
    double value = 0.0;
    std::size_t count = 0;

    bool empty() const { return count == 0; }
};

/// Mean |pred - target| over pixels where `mask` and `pred.valid` both hold.
MaskedMean masked_l1(const DepthImage &pred, const DepthImage &target, const Mask &mask);
/// Same, using `target.valid` as the mask.
MaskedMean masked_l1(const DepthImage &pred, const DepthImage &target);

/// Mean -log softmax(logits)[label] over pixels where `mask` and
/// `labels.valid` both hold. Throws InvalidParameter for a label outside [0, C).
MaskedMean masked_cross_entropy(const SemanticImage &pred, const LabelImage &labels, const Mask &mask);

struct Stage1Loss {
    double total = 0.0;
    double depth = 0.0;
    double pseudo_depth = 0.0;
    double semantic = 0.0;

    Stage1Loss &operator+=(const Stage1Loss &rhs);
};

Stage1Loss combine_stage1(double depth, double pseudo_depth, double semantic, const LossWeights &w = {});

/// Full objective on one rendered view. Pixels the renderer marks invalid
/// (`depth.valid == 0`) are excluded from every term.
Stage1Loss stage1_loss(const DepthImage &depth, const SemanticImage &semantics, const ReconTargets &targets,
                       const LossWeights &w = {});

/// Numerically stable log(sum(exp(v))).
double log_sum_exp(const double *v, int n);

} // namespace worldkit
