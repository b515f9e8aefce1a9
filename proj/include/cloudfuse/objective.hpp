#ifndef CLOUDFUSE_OBJECTIVE_HPP
#define CLOUDFUSE_OBJECTIVE_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "cloudfuse/errors.hpp"
#include "cloudfuse/tensor.hpp"

namespace cloudfuse {

struct LossConfig {
    double lambda1 = 0.5;
    double lambda2 = 0.5;
    std::size_t ssim_window = 11;
    double ssim_sigma = 1.5;
    double dynamic_range = 1.0;

    double c1() const { return (0.01 * dynamic_range) * (0.01 * dynamic_range); }
    double c2() const { return (0.03 * dynamic_range) * (0.03 * dynamic_range); }

    void validate() const {
        if (lambda1 < 0 || lambda2 < 0 || (lambda1 == 0 && lambda2 == 0)) {
            throw ValidationError("loss weights must be non-negative and not both zero");
        }
        if (ssim_window == 0 || ssim_window % 2 == 0) throw ValidationError("ssim_window must be odd");
        if (!(ssim_sigma > 0) || !(dynamic_range > 0)) throw ValidationError("ssim_sigma and dynamic_range must be positive");
    }
};

namespace detail {

inline void require_pair(const Shape& a, const Shape& b, const char* what) {
    if (a != b || a.size() != 3) {
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
}

// Symmetric (edge-repeating) reflection of an arbitrary index into [0, n).
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
    const auto period = static_cast<std::ptrdiff_t>(2 * n);
    i %= period;
    if (i < 0) i += period;
    return static_cast<std::size_t>(i < static_cast<std::ptrdiff_t>(n) ? i : period - 1 - i);
}

}  // namespace detail

inline std::vector<double> gaussian_kernel(std::size_t size, double sigma) {
    std::vector<double> k(size);
    const double r = double(size / 2);
    double sum = 0;
    for (std::size_t i = 0; i < size; ++i) {
        const double d = double(i) - r;
        k[i] = std::exp(-d * d / (2 * sigma * sigma));
        sum += k[i];
    }
    for (auto& v : k) v /= sum;
    return k;
}

// Separable Gaussian filter over one (H, W) plane with symmetric padding, and
// its adjoint (used by the SSIM backward pass).
template <typename T>
class GaussianFilter {
public:
    GaussianFilter(std::size_t size, double sigma) : kernel_(gaussian_kernel(size, sigma)) {}

    std::vector<T> apply(const T* in, std::size_t h, std::size_t w) const {
        std::vector<T> tmp(h * w, T(0)), out(h * w, T(0));
        const auto r = static_cast<std::ptrdiff_t>(kernel_.size() / 2);
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                T s = 0;
                for (std::ptrdiff_t k = -r; k <= r; ++k) {
                    s += T(kernel_[k + r]) * in[y * w + detail::reflect_index(std::ptrdiff_t(x) + k, w)];
                }
                tmp[y * w + x] = s;
            }
        }
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                T s = 0;
                for (std::ptrdiff_t k = -r; k <= r; ++k) {
                    s += T(kernel_[k + r]) * tmp[detail::reflect_index(std::ptrdiff_t(y) + k, h) * w + x];
                }
                out[y * w + x] = s;
            }
        }
        return out;
    }

    std::vector<T> adjoint(const T* in, std::size_t h, std::size_t w) const {
        std::vector<T> tmp(h * w, T(0)), out(h * w, T(0));
        const auto r = static_cast<std::ptrdiff_t>(kernel_.size() / 2);
        for (std::size_t y = 0; y < h; ++y) {
            for (std::ptrdiff_t k = -r; k <= r; ++k) {
                const std::size_t src = detail::reflect_index(std::ptrdiff_t(y) + k, h);
                for (std::size_t x = 0; x < w; ++x) tmp[src * w + x] += T(kernel_[k + r]) * in[y * w + x];
            }
        }
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                for (std::ptrdiff_t k = -r; k <= r; ++k) {
                    out[y * w + detail::reflect_index(std::ptrdiff_t(x) + k, w)] += T(kernel_[k + r]) * tmp[y * w + x];
                }
            }
        }
        return out;
    }

private:
    std::vector<double> kernel_;
};

// Per-pixel mean over bands of the squared error; (1, H, W).
template <typename T>
Tensor<T> mse_map(const Tensor<T>& pred, const Tensor<T>& gt) {
    detail::require_pair(pred.shape(), gt.shape(), "mse_map");
    const std::size_t c = pred.channels(), n = pred.plane();
    Tensor<T> out = Tensor<T>::chw(1, pred.height(), pred.width());
    for (std::size_t b = 0; b < c; ++b) {
        for (std::size_t i = 0; i < n; ++i) {
            const T d = pred[b * n + i] - gt[b * n + i];
            out[i] += d * d;
        }
    }
    for (auto& v : out.values()) v /= T(c);
    return out;
}

namespace detail {

// Local statistics of one band pair under the Gaussian window.
template <typename T>
struct SsimMoments {
    std::vector<T> mx, my, exx, eyy, exy;
};

template <typename T>
SsimMoments<T> ssim_moments(const GaussianFilter<T>& f, const T* x, const T* y, std::size_t h, std::size_t w) {
    const std::size_t n = h * w;
    std::vector<T> xx(n), yy(n), xy(n);
    for (std::size_t i = 0; i < n; ++i) {
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    return {f.apply(x, h, w), f.apply(y, h, w), f.apply(xx.data(), h, w), f.apply(yy.data(), h, w),
            f.apply(xy.data(), h, w)};
}

}  // namespace detail

// Per-pixel local SSIM (Gaussian window, symmetric padding) averaged over
// bands; (1, H, W).
template <typename T>
Tensor<T> ssim_map(const Tensor<T>& pred, const Tensor<T>& gt, const LossConfig& cfg = {}) {
    detail::require_pair(pred.shape(), gt.shape(), "ssim_map");
    const std::size_t c = pred.channels(), h = pred.height(), w = pred.width(), n = h * w;
    const T c1 = T(cfg.c1()), c2 = T(cfg.c2());
    GaussianFilter<T> filter(cfg.ssim_window, cfg.ssim_sigma);
    Tensor<T> out = Tensor<T>::chw(1, h, w);
    for (std::size_t b = 0; b < c; ++b) {
        auto m = detail::ssim_moments(filter, pred.data() + b * n, gt.data() + b * n, h, w);
        for (std::size_t i = 0; i < n; ++i) {
            const T sxx = m.exx[i] - m.mx[i] * m.mx[i];
            const T syy = m.eyy[i] - m.my[i] * m.my[i];
            const T sxy = m.exy[i] - m.mx[i] * m.my[i];
            out[i] += ((T(2) * m.mx[i] * m.my[i] + c1) * (T(2) * sxy + c2)) /
                      ((m.mx[i] * m.mx[i] + m.my[i] * m.my[i] + c1) * (sxx + syy + c2));
        }
    }
    for (auto& v : out.values()) v /= T(c);
    return out;
}

template <typename T>
struct LossResult {
    T value = 0;
    Tensor<T> grad;  // d loss / d pred, same shape as pred
    bool degenerate_weight = false;  // weight map identically zero
};

// mean_p W(p) * (lambda1 * mse(p) + lambda2 * (1 - ssim(p))) together with
// its gradient with respect to `pred`.
template <typename T>
LossResult<T> cloud_aware_loss_with_grad(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& weight,
                                         const LossConfig& cfg = {}, bool want_grad = true) {
    detail::require_pair(pred.shape(), gt.shape(), "cloud_aware_loss");
    cfg.validate();
    const std::size_t c = pred.channels(), h = pred.height(), w = pred.width(), n = h * w;
    if (weight.size() != n || weight.height() != h) {
        throw ShapeError("cloud_aware_loss: weight map " + shape_str(weight.shape()) + " does not cover " +
                         shape_str(pred.shape()));
    }
    const T l1 = T(cfg.lambda1), l2 = T(cfg.lambda2), c1 = T(cfg.c1()), c2 = T(cfg.c2());
    const T inv_pix = T(1) / T(n), inv_c = T(1) / T(c);

    LossResult<T> res;
    res.degenerate_weight = std::all_of(weight.values().begin(), weight.values().end(), [](T v) { return v == T(0); });
    if (want_grad) res.grad = Tensor<T>(pred.shape());

    std::vector<T> ssim_sum(n, T(0)), mse_sum(n, T(0));
    GaussianFilter<T> filter(cfg.ssim_window, cfg.ssim_sigma);
    std::vector<T> g_mu(n), g_xx(n), g_xy(n);
    for (std::size_t b = 0; b < c; ++b) {
        const T* x = pred.data() + b * n;
        const T* y = gt.data() + b * n;
        for (std::size_t i = 0; i < n; ++i) {
            const T d = x[i] - y[i];
            mse_sum[i] += d * d;
        }
        if (l2 == T(0)) continue;
        auto m = detail::ssim_moments(filter, x, y, h, w);
        for (std::size_t i = 0; i < n; ++i) {
            const T mx = m.mx[i], my = m.my[i];
            const T sxx = m.exx[i] - mx * mx, syy = m.eyy[i] - my * my, sxy = m.exy[i] - mx * my;
            const T a1 = T(2) * mx * my + c1, a2 = T(2) * sxy + c2;
            const T b1 = mx * mx + my * my + c1, b2 = sxx + syy + c2;
            const T s = (a1 * a2) / (b1 * b2);
            ssim_sum[i] += s;
            if (!want_grad) continue;
            // d loss / d ssim_b(p)
            const T up = -weight[i] * l2 * inv_c * inv_pix;
            const T ds_dmx = (T(2) * my * a2) / (b1 * b2) - s * T(2) * mx / b1;
            const T ds_dsxx = -s / b2;
            const T ds_dsxy = T(2) * a1 / (b1 * b2);
            g_mu[i] = up * (ds_dmx - T(2) * mx * ds_dsxx - my * ds_dsxy);
            g_xx[i] = up * ds_dsxx;
            g_xy[i] = up * ds_dsxy;
        }
        if (!want_grad) continue;
        const auto a_mu = filter.adjoint(g_mu.data(), h, w);
        const auto a_xx = filter.adjoint(g_xx.data(), h, w);
        const auto a_xy = filter.adjoint(g_xy.data(), h, w);
        T* gx = res.grad.data() + b * n;
        for (std::size_t i = 0; i < n; ++i) gx[i] += a_mu[i] + T(2) * x[i] * a_xx[i] + y[i] * a_xy[i];
    }
    T total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const T ssim_term = l2 == T(0) ? T(0) : T(1) - ssim_sum[i] * inv_c;
        total += weight[i] * (l1 * mse_sum[i] * inv_c + l2 * ssim_term);
    }
    res.value = total * inv_pix;
    if (want_grad) {
        for (std::size_t b = 0; b < c; ++b) {
            for (std::size_t i = 0; i < n; ++i) {
                res.grad[b * n + i] += weight[i] * l1 * T(2) * (pred[b * n + i] - gt[b * n + i]) * inv_c * inv_pix;
            }
        }
    }
    return res;
}

template <typename T>
T cloud_aware_loss(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& weight, const LossConfig& cfg = {}) {
    return cloud_aware_loss_with_grad(pred, gt, weight, cfg, false).value;
}

}  // namespace cloudfuse

#endif  // CLOUDFUSE_OBJECTIVE_HPP
