#ifndef CLOUDFUSE_METRICS_HPP
#define CLOUDFUSE_METRICS_HPP

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "cloudfuse/cloud_mask.hpp"
#include "cloudfuse/errors.hpp"
#include "cloudfuse/objective.hpp"
#include "cloudfuse/tensor.hpp"

namespace cloudfuse {

// Reported PSNR for identical images.
inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

inline double psnr_from_mse(double mse, double max_val = 1.0) {
    if (mse == 0.0) return kPsnrIdentical;
    return 10.0 * std::log10(max_val * max_val / mse);
}

template <typename T>
double mean_squared_error(const Tensor<T>& gt, const Tensor<T>& pred) {
    Tensor<T>::require_same_shape(gt, pred, "mse");
    double s = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        const double d = double(pred[i]) - double(gt[i]);
        s += d * d;
    }
    return s / double(gt.size());
}

template <typename T>
double psnr(const Tensor<T>& gt, const Tensor<T>& pred, double max_val = 1.0) {
    return psnr_from_mse(mean_squared_error(gt, pred), max_val);
}

template <typename T>
double mae(const Tensor<T>& gt, const Tensor<T>& pred) {
    Tensor<T>::require_same_shape(gt, pred, "mae");
    double s = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) s += std::abs(double(pred[i]) - double(gt[i]));
    return s / double(gt.size());
}

// Mean of the per-pixel SSIM map used by the training objective.
template <typename T>
double ssim_global(const Tensor<T>& gt, const Tensor<T>& pred, const LossConfig& cfg = {}) {
    const Tensor<T> m = ssim_map(pred, gt, cfg);
    double s = 0;
    for (T v : m.values()) s += double(v);
    return s / double(m.size());
}

struct MaskedMetrics {
    double psnr_db = 0;
    double mae = 0;
    double mse = 0;
};

// PSNR / MAE over the pixels where mask == 1 (all bands of those pixels).
template <typename T>
MaskedMetrics masked_metrics(const Tensor<T>& gt, const Tensor<T>& pred, const CloudMask& mask, double max_val = 1.0) {
    Tensor<T>::require_same_shape(gt, pred, "masked_metrics");
    const std::size_t c = gt.channels(), n = gt.plane();
    if (mask.values.size() != n) {
        throw ShapeError("masked_metrics: mask " + shape_str(mask.values.shape()) + " vs image " + shape_str(gt.shape()));
    }
    double se = 0, ae = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (mask.values[i] != 1.0f) continue;
        ++count;
        for (std::size_t b = 0; b < c; ++b) {
            const double d = double(pred[b * n + i]) - double(gt[b * n + i]);
            se += d * d;
            ae += std::abs(d);
        }
    }
    if (count == 0) throw ValidationError("masked_metrics: mask selects no pixels");
    const double denom = double(count * c);
    return {psnr_from_mse(se / denom, max_val), ae / denom, se / denom};
}

struct PatchMetrics {
    std::string id;
    double psnr_db = 0;
    double ssim = 0;
    double mae = 0;
    std::optional<double> cloud_psnr_db;  // absent when the patch has no masked pixels
    std::optional<double> cloud_mae;
    std::optional<double> cloud_mse;
    double cloud_fraction = 0;
};

struct MetricsReport {
    double psnr_db = 0;
    double ssim = 0;
    double mae = 0;
    std::optional<double> cloud_psnr_db;
    std::optional<double> cloud_mae;
    std::optional<double> cloud_mse;
    std::size_t n_patches = 0;
    std::vector<PatchMetrics> patches;
};

template <typename T>
PatchMetrics patch_metrics(const std::string& id, const Tensor<T>& gt, const Tensor<T>& pred, const CloudMask& mask,
                           double max_val = 1.0) {
    PatchMetrics m;
    m.id = id;
    m.psnr_db = psnr(gt, pred, max_val);
    m.ssim = ssim_global(gt, pred);
    m.mae = mae(gt, pred);
    m.cloud_fraction = mask.fraction();
    if (mask.count() > 0) {
        const auto mm = masked_metrics(gt, pred, mask, max_val);
        m.cloud_psnr_db = mm.psnr_db;
        m.cloud_mae = mm.mae;
        m.cloud_mse = mm.mse;
    }
    return m;
}

// Aggregates are plain means over patches; cloud metrics average only the
// patches that have masked pixels.
inline MetricsReport aggregate(std::vector<PatchMetrics> patches) {
    MetricsReport r;
    r.n_patches = patches.size();
    if (patches.empty()) return r;
    double cp = 0, cm = 0, cs = 0;
    std::size_t cn = 0;
    for (const auto& p : patches) {
        r.psnr_db += p.psnr_db;
        r.ssim += p.ssim;
        r.mae += p.mae;
        if (p.cloud_mae) {
            cp += *p.cloud_psnr_db;
            cm += *p.cloud_mae;
            cs += *p.cloud_mse;
            ++cn;
        }
    }
    const double n = double(patches.size());
    r.psnr_db /= n;
    r.ssim /= n;
    r.mae /= n;
    if (cn > 0) {
        r.cloud_psnr_db = cp / double(cn);
        r.cloud_mae = cm / double(cn);
        r.cloud_mse = cs / double(cn);
    }
    r.patches = std::move(patches);
    return r;
}

}  // namespace cloudfuse

#endif  // CLOUDFUSE_METRICS_HPP
