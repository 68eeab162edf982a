#pragma once

#include "worldkit/geometry.hpp"

#include <cstdint>
#include <random>

namespace worldkit::testing {

// Seeded random Gaussians with means uniform in [lo, hi] per axis.
inline GaussianSet random_set(std::uint64_t seed, int count, const Vec3 &lo, const Vec3 &hi, int classes = 3,
                              int feature_dim = 2, double min_scale = 0.3, double max_scale = 1.5) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> n(0.0, 1.0);
    GaussianSet set(classes, feature_dim);
    for (int k = 0; k < count; ++k) {
        Vec3 mean, scale;
        for (int a = 0; a < 3; ++a) {
            mean[a] = lo[a] + (hi[a] - lo[a]) * u(rng);
            scale[a] = min_scale + (max_scale - min_scale) * u(rng);
        }
        const Quaternion q(n(rng), n(rng), n(rng), n(rng));
        VecX logits(classes), feature(feature_dim);
        for (int c = 0; c < classes; ++c) logits[c] = 2.0 * n(rng);
        for (int d = 0; d < feature_dim; ++d) feature[d] = n(rng);
        set.add(Gaussian::make(mean, scale, q, 0.1 + 0.85 * u(rng), logits, feature));
    }
    return set;
}

} // namespace worldkit::testing
