#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cloudfuse/grad_check.hpp"
#include "cloudfuse/objective.hpp"
#include "test_util.hpp"

using namespace cloudfuse;
using namespace cloudfuse::testing;

namespace {

// Mirror an out-of-range index back into [0, n) by repeated folding.
std::size_t fold(long i, long n) {
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - 1 - i;
    return std::size_t(i);
}

// Direct 2D-window SSIM for one band, no separability.
Tensor<double> ssim_band_oracle(const Tensor<double>& x, const Tensor<double>& y, std::size_t band) {
    const long h = long(x.height()), w = long(x.width());
    const double c1 = 1e-4, c2 = 9e-4;
    double g[11][11], total = 0;
    for (int a = 0; a < 11; ++a) {
        for (int b = 0; b < 11; ++b) {
            g[a][b] = std::exp(-((a - 5) * (a - 5) + (b - 5) * (b - 5)) / (2 * 1.5 * 1.5));
            total += g[a][b];
        }
    }
    Tensor<double> out = Tensor<double>::chw(1, x.height(), x.width());
    for (long i = 0; i < h; ++i) {
        for (long j = 0; j < w; ++j) {
            double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
            for (int a = 0; a < 11; ++a) {
                for (int b = 0; b < 11; ++b) {
                    const double wt = g[a][b] / total;
                    const double u = x.at(band, fold(i + a - 5, h), fold(j + b - 5, w));
                    const double v = y.at(band, fold(i + a - 5, h), fold(j + b - 5, w));
                    mx += wt * u;
                    my += wt * v;
                    xx += wt * u * u;
                    yy += wt * v * v;
                    xy += wt * u * v;
                }
            }
            const double sx = xx - mx * mx, sy = yy - my * my, sxy = xy - mx * my;
            out.at(0, i, j) = (2 * mx * my + c1) * (2 * sxy + c2) / ((mx * mx + my * my + c1) * (sx + sy + c2));
        }
    }
    return out;
}

double loss_oracle(const Tensor<double>& pred, const Tensor<double>& gt, const Tensor<double>& w, double l1, double l2) {
    const std::size_t c = pred.channels(), n = pred.plane();
    std::vector<double> ssim(n, 0.0);
    for (std::size_t b = 0; b < c; ++b) {
        const Tensor<double> s = ssim_band_oracle(pred, gt, b);
        for (std::size_t i = 0; i < n; ++i) ssim[i] += s[i] / double(c);
    }
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double mse = 0;
        for (std::size_t b = 0; b < c; ++b) mse += std::pow(pred[b * n + i] - gt[b * n + i], 2) / double(c);
        total += w[i] * (l1 * mse + l2 * (1 - ssim[i]));
    }
    return total / double(n);
}

Tensor<double> ones(std::size_t h, std::size_t w) { return Tensor<double>::chw(1, h, w, 1.0); }

LossConfig lambdas(double l1, double l2) {
    LossConfig c;
    c.lambda1 = l1;
    c.lambda2 = l2;
    return c;
}

}  // namespace

TEST(MseMap, Examples) {
    const auto gt = random_tensor({13, 4, 5}, 1, 0.0, 1.0);
    const Tensor<double> zero = mse_map(gt, gt);
    for (double v : zero.values()) EXPECT_EQ(v, 0.0);

    Tensor<double> off = gt;
    for (auto& v : off.values()) v += 0.1;
    const Tensor<double> shifted = mse_map(off, gt);
    for (double v : shifted.values()) EXPECT_NEAR(v, 0.01, 1e-15);

    Tensor<double> one = gt;
    one.at(6, 2, 3) += 0.3;
    const Tensor<double> m = mse_map(one, gt);
    EXPECT_NEAR(m.at(0, 2, 3), 0.09 / 13, 1e-15);
    EXPECT_EQ(m.at(0, 1, 3), 0.0);
    EXPECT_THROW(mse_map(gt, random_tensor({13, 4, 4}, 1)), ShapeError);
}

TEST(SsimMap, IdenticalIsOne) {
    const auto x = random_tensor({13, 12, 12}, 2, 0.0, 1.0);
    const Tensor<double> s = ssim_map(x, x);
    for (double v : s.values()) EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(SsimMap, MatchesDirectWindowOracle) {
    const auto x = random_tensor({3, 14, 17}, 3, 0.0, 1.0);
    const auto y = random_tensor({3, 14, 17}, 4, 0.0, 1.0);
    const Tensor<double> s = ssim_map(x, y);
    Tensor<double> expect = Tensor<double>::chw(1, 14, 17);
    for (std::size_t b = 0; b < 3; ++b) {
        const Tensor<double> o = ssim_band_oracle(x, y, b);
        for (std::size_t i = 0; i < o.size(); ++i) expect[i] += o[i] / 3;
    }
    EXPECT_LT(max_abs_diff(s, expect), 1e-12);
}

TEST(SsimMap, Symmetric) {
    const auto x = random_tensor({13, 10, 10}, 5, 0.0, 1.0);
    const auto y = random_tensor({13, 10, 10}, 6, 0.0, 1.0);
    EXPECT_LT(max_abs_diff(ssim_map(x, y), ssim_map(y, x)), 1e-15);
}

TEST(SsimMap, NoiseOnConstantIsNearZero) {
    Tensor<double> gt = Tensor<double>::chw(13, 32, 32, 0.5);
    Tensor<double> pred = gt;
    std::mt19937_64 rng(7);
    std::normal_distribution<double> n(0.0, 0.3);
    for (auto& v : pred.values()) v += n(rng);
    double mean = 0;
    const Tensor<double> s = ssim_map(pred, gt);
    for (double v : s.values()) mean += v / 1024;
    EXPECT_LT(std::abs(mean), 0.05);
}

TEST(Loss, ZeroAtPerfectPrediction) {
    const auto gt = random_tensor({13, 16, 16}, 8, 0.0, 1.0);
    const auto w = random_tensor({1, 16, 16}, 9, 0.0, 1.0);
    EXPECT_NEAR(cloud_aware_loss(gt, gt, w), 0.0, 1e-15);
    EXPECT_NEAR(cloud_aware_loss(gt, gt, ones(16, 16)), 0.0, 1e-15);
}

TEST(Loss, ReducesToMeanSquaredError) {
    const auto pred = random_tensor({13, 8, 8}, 10, 0.0, 1.0);
    const auto gt = random_tensor({13, 8, 8}, 11, 0.0, 1.0);
    double mse = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) mse += std::pow(pred[i] - gt[i], 2);
    mse /= double(pred.size());
    EXPECT_NEAR(cloud_aware_loss(pred, gt, ones(8, 8), lambdas(1, 0)), mse, 1e-15);
}

TEST(Loss, MatchesBruteForceOracle) {
    const auto pred = random_tensor({13, 16, 16}, 12, 0.0, 1.0);
    const auto gt = random_tensor({13, 16, 16}, 13, 0.0, 1.0);
    Tensor<double> w = Tensor<double>::chw(1, 16, 16, 0.2);
    for (std::size_t y = 3; y < 9; ++y)
        for (std::size_t x = 5; x < 12; ++x) w.at(0, y, x) = 0.8;
    const double expect = loss_oracle(pred, gt, w, 0.5, 0.5);
    EXPECT_NEAR(cloud_aware_loss(pred, gt, w), expect, 1e-12);
    // Float evaluation stays within 1e-6 of the double oracle.
    EXPECT_NEAR(cloud_aware_loss(pred.cast<float>(), gt.cast<float>(), w.cast<float>()), expect, 1e-6);
}

TEST(Loss, NonNegativeAndPositiveOnError) {
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto pred = random_tensor({13, 12, 12}, 100 + s, 0.0, 1.0);
        const auto gt = random_tensor({13, 12, 12}, 200 + s, 0.0, 1.0);
        const auto w = random_tensor({1, 12, 12}, 300 + s, 0.0, 1.0);
        EXPECT_GT(cloud_aware_loss(pred, gt, w), 0.0);
    }
}

TEST(Loss, WeightScalingScalesValueAndGradient) {
    const auto pred = random_tensor({13, 12, 12}, 20, 0.0, 1.0);
    const auto gt = random_tensor({13, 12, 12}, 21, 0.0, 1.0);
    const auto w = random_tensor({1, 12, 12}, 22, 0.1, 1.0);
    Tensor<double> w3 = w;
    for (auto& v : w3.values()) v *= 3;
    const auto a = cloud_aware_loss_with_grad(pred, gt, w);
    const auto b = cloud_aware_loss_with_grad(pred, gt, w3);
    EXPECT_NEAR(b.value, 3 * a.value, 1e-14);
    for (std::size_t i = 0; i < a.grad.size(); ++i) EXPECT_NEAR(b.grad[i], 3 * a.grad[i], 1e-15);
}

TEST(Loss, RaisingAlphaRaisesMaskedShare) {
    // Error only inside the masked block: the loss grows with alpha.
    const auto gt = random_tensor({13, 16, 16}, 30, 0.2, 0.8);
    Tensor<double> pred = gt;
    Tensor<double> mask = Tensor<double>::chw(1, 16, 16);
    for (std::size_t y = 4; y < 10; ++y) {
        for (std::size_t x = 4; x < 10; ++x) {
            mask.at(0, y, x) = 1;
            for (std::size_t b = 0; b < 13; ++b) pred.at(b, y, x) += 0.1;
        }
    }
    auto weights = [&](double alpha) {
        Tensor<double> w(mask.shape());
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = mask[i] == 1 ? alpha : 1 - alpha;
        return w;
    };
    double prev = -1;
    for (double alpha : {0.5, 0.6, 0.8, 0.95}) {
        const auto w = weights(alpha);
        double masked = 0, total = 0;
        const Tensor<double> m = mse_map(pred, gt), s = ssim_map(pred, gt);
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double term = w[i] * (0.5 * m[i] + 0.5 * (1 - s[i]));
            total += term;
            if (mask[i] == 1) masked += term;
        }
        EXPECT_NEAR(total / 256, cloud_aware_loss(pred, gt, w), 1e-15);
        EXPECT_GT(masked / total, prev);
        prev = masked / total;
    }
}

TEST(Loss, DegenerateWeightIsFlagged) {
    const auto pred = random_tensor({13, 8, 8}, 40, 0.0, 1.0);
    const auto gt = random_tensor({13, 8, 8}, 41, 0.0, 1.0);
    const auto r = cloud_aware_loss_with_grad(pred, gt, Tensor<double>::chw(1, 8, 8));
    EXPECT_TRUE(r.degenerate_weight);
    EXPECT_EQ(r.value, 0.0);
    EXPECT_FALSE(cloud_aware_loss_with_grad(pred, gt, ones(8, 8)).degenerate_weight);
}

TEST(Loss, Refusals) {
    const auto x = random_tensor({13, 8, 8}, 50, 0.0, 1.0);
    EXPECT_THROW(cloud_aware_loss(x, random_tensor({13, 8, 9}, 1), ones(8, 8)), ShapeError);
    EXPECT_THROW(cloud_aware_loss(x, x, ones(8, 9)), ShapeError);
    EXPECT_THROW(cloud_aware_loss(x, x, ones(8, 8), lambdas(0, 0)), ValidationError);
    EXPECT_THROW(cloud_aware_loss(x, x, ones(8, 8), lambdas(-0.5, 1)), ValidationError);
    LossConfig even;
    even.ssim_window = 10;
    EXPECT_THROW(cloud_aware_loss(x, x, ones(8, 8), even), ValidationError);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
    for (const LossConfig& cfg : {lambdas(0.5, 0.5), lambdas(1, 0), lambdas(0, 1)}) {
        const auto gt = random_tensor({3, 12, 12}, 60, 0.0, 1.0);
        const auto w = random_tensor({1, 12, 12}, 61, 0.1, 1.0);
        ObjectiveFn fn = [&](Graph<double>&, const std::vector<Var<double>>& in, ParameterSet<double>&) {
            const auto r = cloud_aware_loss_with_grad(in[0].value(), gt, w, cfg);
            return Objective{in[0], r.value, r.grad};
        };
        const auto res = grad_check_objective(fn, {random_tensor({3, 12, 12}, 62, 0.0, 1.0)}, {});
        EXPECT_LT(res.max_rel_error, 1e-4) << res.worst;
        EXPECT_EQ(res.coords_checked, 3u * 144u);
    }
}
