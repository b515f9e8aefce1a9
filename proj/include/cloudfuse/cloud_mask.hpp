#ifndef CLOUDFUSE_CLOUD_MASK_HPP
#define CLOUDFUSE_CLOUD_MASK_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "cloudfuse/errors.hpp"
#include "cloudfuse/raster_store.hpp"
#include "cloudfuse/tensor.hpp"

namespace cloudfuse {

inline constexpr double kCloudThreshold = 0.2;
inline constexpr float kSnowNdsiMax = 0.6f;
inline constexpr double kCloudWeightAlpha = 0.8;

// All maps are (1, H, W).
struct CloudScoreMap {
    Tensor<float> values;
};

struct CloudMask {
    Tensor<float> values;  // 0 or 1
    bool refined = false;

    std::size_t count() const {
        return static_cast<std::size_t>(std::count(values.values().begin(), values.values().end(), 1.0f));
    }
    double fraction() const { return values.empty() ? 0.0 : double(count()) / double(values.size()); }
};

struct WeightMap {
    Tensor<float> values;
    double alpha = kCloudWeightAlpha;
};

namespace detail {

inline void require_normalized(const OpticalPatch& opt, const char* what) {
    if (opt.bands.rank() != 3 || opt.bands.channels() != kOpticalBands) {
        throw ShapeError(std::string(what) + ": expected (13, H, W) optical patch, got " +
                         shape_str(opt.bands.shape()));
    }
    if (!opt.normalized) throw ValidationError(std::string(what) + ": patch is flagged as unnormalized");
    for (float v : opt.bands.values()) {
        if (!std::isfinite(v) || v < 0.0f || v > 1.0f) {
            throw ValidationError(std::string(what) + ": reflectance outside [0, 1]; normalize the patch first");
        }
    }
}

inline double unit_clamp(double v) { return std::clamp(v, 0.0, 1.0); }

}  // namespace detail

// Per-pixel minimum of four clamped brightness ratios. The breakpoints are
// taken at float precision, the precision reflectances are stored in, so a
// stored 0.1 sits exactly on the 0.1 breakpoint.
inline float cloud_score_pixel(double b1, double b2, double b3, double b4, double b10) {
    auto k = [](float v) { return double(v); };
    const double r1 = detail::unit_clamp((b2 - k(0.1f)) / (k(0.5f) - k(0.1f)));
    const double r2 = detail::unit_clamp((b1 - k(0.1f)) / (k(0.3f) - k(0.1f)));
    const double r3 = detail::unit_clamp((b10 + b1 - k(0.15f)) / (k(0.2f) - k(0.15f)));
    const double r4 = detail::unit_clamp((b4 + b3 + b2 - k(0.2f)) / (k(0.8f) - k(0.2f)));
    return static_cast<float>(std::min({r1, r2, r3, r4}));
}

inline CloudScoreMap cloud_score(const OpticalPatch& opt) {
    detail::require_normalized(opt, "cloud_score");
    const Tensor<float>& b = opt.bands;
    const std::size_t n = b.plane();
    CloudScoreMap out{Tensor<float>::chw(1, b.height(), b.width())};
    for (std::size_t i = 0; i < n; ++i) {
        out.values[i] = cloud_score_pixel(b[B1 * n + i], b[B2 * n + i], b[B3 * n + i], b[B4 * n + i], b[B10 * n + i]);
    }
    return out;
}

// M = 1 iff score > threshold.
inline CloudMask binarize(const CloudScoreMap& score, double threshold = kCloudThreshold) {
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw ValidationError("binarize: threshold must lie in [0, 1]");
    // Compared at map precision so a stored 0.2f is not above a 0.2 threshold.
    const auto t = static_cast<float>(threshold);
    CloudMask m{Tensor<float>(score.values.shape()), false};
    for (std::size_t i = 0; i < score.values.size(); ++i) {
        m.values[i] = score.values[i] > t ? 1.0f : 0.0f;
    }
    return m;
}

// (B3 - B11) / (B3 + B11), defined as 0 where the denominator vanishes.
inline Tensor<float> ndsi(const OpticalPatch& opt) {
    detail::require_normalized(opt, "ndsi");
    const Tensor<float>& b = opt.bands;
    const std::size_t n = b.plane();
    Tensor<float> out = Tensor<float>::chw(1, b.height(), b.width());
    for (std::size_t i = 0; i < n; ++i) {
        const double green = b[B3 * n + i], swir = b[B11 * n + i];
        const double denom = green + swir;
        out[i] = denom == 0.0 ? 0.0f : static_cast<float>((green - swir) / denom);
    }
    return out;
}

// Snow rejection: M' = M * [NDSI <= 0.6].
inline CloudMask refine_mask(const CloudMask& m, const Tensor<float>& ndsi_map) {
    if (m.values.size() != ndsi_map.size() || m.values.height() != ndsi_map.height()) {
        throw ShapeError("refine_mask: mask " + shape_str(m.values.shape()) + " vs NDSI " +
                         shape_str(ndsi_map.shape()));
    }
    CloudMask out{m.values, true};
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        const float v = m.values[i];
        if (v != 0.0f && v != 1.0f) throw ValidationError("refine_mask: mask is not binary");
        if (!(ndsi_map[i] <= kSnowNdsiMax)) out.values[i] = 0.0f;
    }
    return out;
}

// W = alpha * M' + (1 - alpha) * (1 - M').
inline WeightMap weight_map(const CloudMask& m, double alpha = kCloudWeightAlpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("weight_map: alpha must lie in [0, 1]");
    const auto cloud = static_cast<float>(alpha), clear = static_cast<float>(1.0 - alpha);
    WeightMap w{Tensor<float>(m.values.shape()), alpha};
    for (std::size_t i = 0; i < m.values.size(); ++i) {
        const float v = m.values[i];
        if (v != 0.0f && v != 1.0f) throw ValidationError("weight_map: mask is not binary");
        w.values[i] = v == 1.0f ? cloud : clear;
    }
    return w;
}

inline WeightMap uniform_weight_map(std::size_t h, std::size_t w) {
    return {Tensor<float>::chw(1, h, w, 1.0f), 1.0};
}

// cloud_score -> binarize -> NDSI refinement.
inline CloudMask refined_cloud_mask(const OpticalPatch& opt, double threshold = kCloudThreshold) {
    return refine_mask(binarize(cloud_score(opt), threshold), ndsi(opt));
}

}  // namespace cloudfuse

#endif  // CLOUDFUSE_CLOUD_MASK_HPP
