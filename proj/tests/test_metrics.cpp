#include <gtest/gtest.h>

#include <cmath>

#include "cloudfuse/metrics.hpp"
#include "test_util.hpp"

using namespace cloudfuse;
using namespace cloudfuse::testing;

namespace {

CloudMask block_mask(std::size_t h, std::size_t w, std::size_t y0, std::size_t y1, std::size_t x0, std::size_t x1) {
    CloudMask m{Tensor<float>(Shape{1, h, w}), true};
    for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x) m.values.at(0, y, x) = 1.0f;
    return m;
}

}  // namespace

TEST(Psnr, IdenticalIsSentinel) {
    const auto x = random_tensor<float>({13, 8, 8}, 1, 0.0, 1.0);
    EXPECT_TRUE(std::isinf(psnr(x, x)));
    EXPECT_GT(psnr(x, x), 0);
    EXPECT_EQ(psnr(x, x), kPsnrIdentical);
}

TEST(Psnr, UniformTenthErrorIsTwentyDecibels) {
    const auto gt = random_tensor<double>({13, 16, 16}, 2, 0.0, 0.8);
    Tensor<double> pred = gt;
    for (auto& v : pred.values()) v += 0.1;
    EXPECT_NEAR(psnr(gt, pred), 20.0, 1e-6);
    EXPECT_NEAR(mae(gt, pred), 0.1, 1e-6);
}

TEST(Psnr, MaxValueParameter) {
    Tensor<double> gt(Shape{1, 2, 2}), pred(Shape{1, 2, 2}, 1.0);
    EXPECT_NEAR(psnr(gt, pred, 1.0), 0.0, 1e-12);
    EXPECT_NEAR(psnr(gt, pred, 10.0), 20.0, 1e-12);
    EXPECT_NEAR(psnr_from_mse(1e-4), 40.0, 1e-12);
}

TEST(Mae, HandComputed) {
    Tensor<double> gt(Shape{1, 1, 4}), pred(Shape{1, 1, 4});
    pred[0] = 0.2;
    pred[1] = -0.4;
    EXPECT_NEAR(mae(gt, pred), 0.15, 1e-15);
    EXPECT_EQ(mae(gt, gt), 0.0);
    EXPECT_THROW(mae(gt, Tensor<double>(Shape{1, 1, 5})), ShapeError);
}

TEST(Ssim, IdenticalIsOne) {
    const auto x = random_tensor<double>({13, 16, 16}, 3, 0.0, 1.0);
    EXPECT_NEAR(ssim_global(x, x), 1.0, 1e-12);
    const auto y = random_tensor<double>({13, 16, 16}, 4, 0.0, 1.0);
    EXPECT_LT(ssim_global(x, y), 0.5);
}

TEST(Masked, OnlySelectedPixelsCount) {
    const auto gt = random_tensor<float>({13, 8, 8}, 5, 0.0, 0.5);
    Tensor<float> pred = gt;
    const CloudMask m = block_mask(8, 8, 0, 4, 0, 8);
    // Error 0.2 inside the mask, 0.05 outside.
    for (std::size_t b = 0; b < 13; ++b)
        for (std::size_t y = 0; y < 8; ++y)
            for (std::size_t x = 0; x < 8; ++x) pred.at(b, y, x) += y < 4 ? 0.25f : 0.05f;
    const MaskedMetrics mm = masked_metrics(gt, pred, m);
    EXPECT_NEAR(mm.mae, 0.25, 1e-6);
    EXPECT_NEAR(mm.mse, 0.0625, 1e-6);
    EXPECT_NEAR(mm.psnr_db, 10 * std::log10(1 / 0.0625), 1e-4);
    EXPECT_NEAR(mae(gt, pred), 0.15, 1e-6);
}

TEST(Masked, EmptyMaskRefused) {
    const auto gt = random_tensor<float>({13, 4, 4}, 6, 0.0, 1.0);
    CloudMask empty{Tensor<float>(Shape{1, 4, 4}), true};
    EXPECT_THROW(masked_metrics(gt, gt, empty), ValidationError);
    EXPECT_THROW(masked_metrics(gt, gt, block_mask(4, 5, 0, 1, 0, 1)), ShapeError);
}

TEST(PatchMetricsAndAggregate, CloudFieldsOnlyWhenMasked) {
    const auto gt = random_tensor<float>({13, 16, 16}, 7, 0.0, 0.8);
    Tensor<float> pred = gt;
    for (auto& v : pred.values()) v += 0.1f;
    const auto a = patch_metrics("a", gt, pred, block_mask(16, 16, 0, 8, 0, 16));
    const auto b = patch_metrics("b", gt, gt, CloudMask{Tensor<float>(Shape{1, 16, 16}), true});
    ASSERT_TRUE(a.cloud_mae.has_value());
    EXPECT_NEAR(*a.cloud_mae, 0.1, 1e-6);
    EXPECT_DOUBLE_EQ(a.cloud_fraction, 0.5);
    EXPECT_FALSE(b.cloud_mae.has_value());
    EXPECT_TRUE(std::isinf(b.psnr_db));

    const MetricsReport r = aggregate({a, b});
    EXPECT_EQ(r.n_patches, 2u);
    EXPECT_NEAR(r.mae, 0.05, 1e-6);
    EXPECT_NEAR(*r.cloud_mae, 0.1, 1e-6);  // only the masked patch contributes
    EXPECT_TRUE(std::isinf(r.psnr_db));
    EXPECT_EQ(r.patches.size(), 2u);

    const MetricsReport finite = aggregate({a, a});
    EXPECT_NEAR(finite.psnr_db, 20.0, 1e-4);
    EXPECT_EQ(aggregate({}).n_patches, 0u);
}
