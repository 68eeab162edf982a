#include "worldkit/recon_loss.hpp"

#include "worldkit/error.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace worldkit {

namespace {

void require_same_pixels(std::size_t a, std::size_t b, const char *what) {
    if (a != b) {
        throw InvalidParameter(std::string(what) + ": image sizes differ (" + std::to_string(a) + " vs " +
                               std::to_string(b) + " pixels)");
    }
}

} // namespace

void ReconTargets::check_shape(int width, int height) const {
    auto same = [&](int w, int h) { return w == width && h == height; };
    if (!same(sparse_depth.width, sparse_depth.height) || !same(dense_depth.width, dense_depth.height) ||
        !same(labels.width, labels.height)) {
        throw InvalidParameter("reconstruction targets do not match the camera dimensions " +
                               std::to_string(width) + "x" + std::to_string(height));
    }
}

double log_sum_exp(const double *v, int n) {
    const double m = *std::max_element(v, v + n);
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += std::exp(v[i] - m);
    return m + std::log(s);
}

MaskedMean masked_l1(const DepthImage &pred, const DepthImage &target, const Mask &mask) {
    require_same_pixels(pred.pixels(), target.pixels(), "masked_l1");
    require_same_pixels(pred.pixels(), mask.size(), "masked_l1 mask");
    MaskedMean out;
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.pixels(); ++i) {
        if (mask[i] && pred.valid[i]) {
            sum += std::abs(pred.depth[i] - target.depth[i]);
            ++out.count;
        }
    }
    out.value = out.count ? sum / static_cast<double>(out.count) : 0.0;
    return out;
}

MaskedMean masked_l1(const DepthImage &pred, const DepthImage &target) {
    return masked_l1(pred, target, target.valid);
}

MaskedMean masked_cross_entropy(const SemanticImage &pred, const LabelImage &labels, const Mask &mask) {
    require_same_pixels(pred.pixels(), labels.pixels(), "masked_cross_entropy");
    require_same_pixels(pred.pixels(), mask.size(), "masked_cross_entropy mask");
    MaskedMean out;
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.pixels(); ++i) {
        if (!(mask[i] && labels.valid[i])) continue;
        const int label = labels.label[i];
        if (label < 0 || label >= pred.classes) {
            throw InvalidParameter("label " + std::to_string(label) + " outside [0, " +
                                   std::to_string(pred.classes) + ")");
        }
        const double *z = pred.logits.data() + i * pred.classes;
        sum += log_sum_exp(z, pred.classes) - z[label];
        ++out.count;
    }
    out.value = out.count ? sum / static_cast<double>(out.count) : 0.0;
    return out;
}

Stage1Loss &Stage1Loss::operator+=(const Stage1Loss &rhs) {
    total += rhs.total;
    depth += rhs.depth;
    pseudo_depth += rhs.pseudo_depth;
    semantic += rhs.semantic;
    return *this;
}

Stage1Loss combine_stage1(double depth, double pseudo_depth, double semantic, const LossWeights &w) {
    return {w.depth * depth + w.pseudo_depth * pseudo_depth + w.semantic * semantic, depth, pseudo_depth, semantic};
}

Stage1Loss stage1_loss(const DepthImage &depth, const SemanticImage &semantics, const ReconTargets &targets,
                       const LossWeights &w) {
    targets.check_shape(depth.width, depth.height);
    const MaskedMean ld = masked_l1(depth, targets.sparse_depth);
    const MaskedMean lpd = masked_l1(depth, targets.dense_depth);
    const MaskedMean lsem = masked_cross_entropy(semantics, targets.labels, depth.valid);
    return combine_stage1(ld.value, lpd.value, lsem.value, w);
}

} // namespace worldkit
