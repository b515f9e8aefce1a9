#ifndef CLOUDFUSE_IMAGE_GRID_HPP
#define CLOUDFUSE_IMAGE_GRID_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "cloudfuse/errors.hpp"
#include "cloudfuse/raster_store.hpp"
#include "cloudfuse/tensor.hpp"

namespace cloudfuse {

// Interleaved 8-bit RGB image.
struct RgbImage {
    std::size_t width = 0, height = 0;
    std::vector<std::uint8_t> pixels;  // row-major, 3 bytes per pixel

    RgbImage() = default;
    RgbImage(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), pixels(w * h * 3, fill) {}

    std::uint8_t* at(std::size_t x, std::size_t y) { return pixels.data() + 3 * (y * width + x); }
};

struct Stretch {
    double lo = 0, hi = 1;

    std::uint8_t operator()(double v) const {
        const double t = hi > lo ? (v - lo) / (hi - lo) : 0.0;
        return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(t, 0.0, 1.0)));
    }
};

// 2nd/98th percentile of the true-colour bands (B4, B3, B2) over all panels,
// so every optical panel shares one stretch.
inline Stretch true_colour_stretch(const std::vector<const Tensor<float>*>& panels) {
    std::vector<float> v;
    for (const auto* p : panels) {
        const std::size_t n = p->plane();
        for (std::size_t b : {B4, B3, B2}) v.insert(v.end(), p->data() + b * n, p->data() + (b + 1) * n);
    }
    if (v.empty()) return {};
    std::sort(v.begin(), v.end());
    const auto q = [&](double f) { return double(v[std::size_t(f * double(v.size() - 1))]); };
    return {q(0.02), q(0.98)};
}

inline RgbImage true_colour(const Tensor<float>& optical, const Stretch& s) {
    if (optical.channels() != kOpticalBands) throw ShapeError("true_colour: expected an optical patch");
    const std::size_t h = optical.height(), w = optical.width();
    RgbImage img(w, h);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            std::uint8_t* px = img.at(x, y);
            px[0] = s(optical.at(B4, y, x));
            px[1] = s(optical.at(B3, y, x));
            px[2] = s(optical.at(B2, y, x));
        }
    }
    return img;
}

inline RgbImage sar_grey(const Tensor<float>& sar) {
    if (sar.channels() != kSarChannels) throw ShapeError("sar_grey: expected a SAR patch");
    const std::size_t h = sar.height(), w = sar.width();
    RgbImage img(w, h);
    const Stretch unit;
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            std::uint8_t* px = img.at(x, y);
            px[0] = px[1] = px[2] = unit(sar.at(VV, y, x));
        }
    }
    return img;
}

// Panels side by side, separated by `gap` white columns.
inline RgbImage hconcat(const std::vector<RgbImage>& panels, std::size_t gap = 4) {
    if (panels.empty()) return {};
    const std::size_t h = panels.front().height;
    std::size_t w = gap * (panels.size() - 1);
    for (const auto& p : panels) {
        if (p.height != h) throw ShapeError("hconcat: panels differ in height");
        w += p.width;
    }
    RgbImage out(w, h, 255);
    std::size_t x0 = 0;
    for (const auto& p : panels) {
        for (std::size_t y = 0; y < h; ++y) {
            std::copy_n(p.pixels.data() + 3 * y * p.width, 3 * p.width, out.at(x0, y));
        }
        x0 += p.width + gap;
    }
    return out;
}

// Cloudy | SAR (VV) | prediction | ground truth (when given).
inline RgbImage comparison_grid(const Tensor<float>& cloudy, const Tensor<float>& sar, const Tensor<float>& prediction,
                                const Tensor<float>* clear = nullptr) {
    std::vector<const Tensor<float>*> optical{&cloudy, &prediction};
    if (clear) optical.push_back(clear);
    const Stretch s = true_colour_stretch(optical);
    std::vector<RgbImage> panels{true_colour(cloudy, s), sar_grey(sar), true_colour(prediction, s)};
    if (clear) panels.push_back(true_colour(*clear, s));
    return hconcat(panels);
}

}  // namespace cloudfuse

#endif  // CLOUDFUSE_IMAGE_GRID_HPP
