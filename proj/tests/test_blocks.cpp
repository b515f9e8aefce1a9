#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "cloudfuse/blocks.hpp"
#include "cloudfuse/grad_check.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace cloudfuse;
using namespace cloudfuse::testing;


// --------------------------------------------------------------------------- reformat

TEST(Reformat, ShapeAlgebra) {
    Tensor<float> x = Tensor<float>::chw(13, 256, 256);
    EXPECT_EQ(reformat(x, 2).shape(), (Shape{52, 128, 128}));
    EXPECT_EQ(reformat_inv(reformat(x, 2), 2).shape(), (Shape{13, 256, 256}));
    EXPECT_EQ(reformat_inv(Tensor<float>::chw(52, 128, 128), 2).shape(), (Shape{13, 256, 256}));
}

TEST(Reformat, ScaleOneIsIdentity) {
    auto x = random_tensor({3, 5, 7}, 1);
    EXPECT_EQ(reformat(x, 1), x);
    EXPECT_EQ(reformat_inv(x, 1), x);
}

TEST(Reformat, RoundTripIsExact) {
    for (std::size_t s : {1u, 2u, 4u}) {
        auto x = random_tensor({3, 8, 16}, 10 + s);
        EXPECT_EQ(reformat_inv(reformat(x, s), s), x) << "s=" << s;
        auto y = random_tensor({3 * s * s, 4, 2}, 20 + s);
        EXPECT_EQ(reformat(reformat_inv(y, s), s), y) << "s=" << s;
    }
}

TEST(Reformat, PhaseLayout) {
    auto x = random_tensor({2, 6, 4}, 3);
    auto y = reformat(x, 2);
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx)
                for (std::size_t i = 0; i < 3; ++i)
                    for (std::size_t j = 0; j < 2; ++j)
                        EXPECT_EQ(y.at(c * 4 + dy * 2 + dx, i, j), x.at(c, i * 2 + dy, j * 2 + dx));
}

TEST(Reformat, RejectsIndivisibleShapes) {
    EXPECT_THROW(reformat(Tensor<float>::chw(1, 5, 4), 2), ShapeError);
    EXPECT_THROW(reformat_inv(Tensor<float>::chw(6, 4, 4), 2), ShapeError);
}

// --------------------------------------------------------------------------- conv2d

TEST(Conv2d, IdentityKernel) {
    auto x = random_tensor({4, 5, 6}, 7);
    Tensor<double> w(Shape{4, 4, 1, 1});
    for (std::size_t i = 0; i < 4; ++i) w[i * 4 + i] = 1.0;
    EXPECT_EQ(conv2d(x, w, Tensor<double>(Shape{4})), x);
}

TEST(Conv2d, ZeroKernelGivesBias) {
    auto x = random_tensor({2, 4, 4}, 8);
    Tensor<double> b(Shape{3});
    b[0] = 0.5;
    b[1] = -1.0;
    b[2] = 2.0;
    auto y = conv2d(x, Tensor<double>(Shape{3, 2, 3, 3}), b);
    for (std::size_t c = 0; c < 3; ++c)
        for (double v : y.channel(c)) EXPECT_EQ(v, b[c]);
}

TEST(Conv2d, MatchesNestedLoopOracle) {
    for (std::size_t k : {1u, 3u}) {
        auto x = random_tensor({3, 4, 4}, 30 + k);
        auto w = random_tensor({5, 3, k, k}, 40 + k);
        auto b = random_tensor({5}, 50 + k);
        EXPECT_LT(max_abs_diff(conv2d(x, w, b), conv_oracle(x, w, b)), 1e-6);
    }
}

TEST(Conv2d, ChannelMismatch) {
    EXPECT_THROW(conv2d(Tensor<double>::chw(2, 4, 4), Tensor<double>(Shape{1, 3, 3, 3}), Tensor<double>(Shape{1})),
                 ShapeError);
}

// --------------------------------------------------------------------------- layer norm / mlp

TEST(LayerNorm, ConstantChannelVectorNormalizesToZero) {
    Graph<double> g;
    Tensor<double> x = Tensor<double>::chw(6, 2, 2, 3.25);
    auto y = layer_norm(g.input(x), g.input(Tensor<double>(Shape{6}, 1.0)), g.input(Tensor<double>(Shape{6})));
    for (double v : y.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, MatchesDirectStatistics) {
    auto x = random_tensor({8, 3, 3}, 60);
    auto gamma = random_tensor({8}, 61);
    auto beta = random_tensor({8}, 62);
    Graph<double> g;
    const auto y = layer_norm(g.input(x), g.input(gamma), g.input(beta)).value();
    for (std::size_t p = 0; p < 9; ++p) {
        double mean = 0, var = 0;
        for (std::size_t c = 0; c < 8; ++c) mean += x[c * 9 + p];
        mean /= 8;
        for (std::size_t c = 0; c < 8; ++c) var += (x[c * 9 + p] - mean) * (x[c * 9 + p] - mean);
        var /= 8;
        for (std::size_t c = 0; c < 8; ++c) {
            const double expect = (x[c * 9 + p] - mean) / std::sqrt(var + kLayerNormEps) * gamma[c] + beta[c];
            EXPECT_NEAR(y[c * 9 + p], expect, 1e-6);
        }
        // Before scale/shift the channel vector has zero mean and unit variance.
        double m2 = 0, v2 = 0;
        for (std::size_t c = 0; c < 8; ++c) m2 += (y[c * 9 + p] - beta[c]) / gamma[c];
        m2 /= 8;
        for (std::size_t c = 0; c < 8; ++c) v2 += std::pow((y[c * 9 + p] - beta[c]) / gamma[c] - m2, 2);
        EXPECT_NEAR(m2, 0.0, 1e-6);
        EXPECT_NEAR(v2 / 8, var / (var + kLayerNormEps), 1e-6);
    }
}

TEST(Mlp, ZeroWeightsBroadcastBias) {
    MlpLayer mlp{"mlp", 4, 2};
    ParameterSet<double> p;
    Rng rng(1);
    mlp.init(p, rng);
    for (auto& [_, v] : p.values()) v.fill(0);
    auto& b = p.value("mlp.fc2.bias");
    for (std::size_t i = 0; i < 4; ++i) b[i] = 0.1 * double(i + 1);
    Graph<double> g;
    auto y = mlp(g, p, g.input(random_tensor({4, 3, 3}, 5))).value();
    for (std::size_t c = 0; c < 4; ++c)
        for (double v : y.channel(c)) EXPECT_EQ(v, b[c]);
}

// --------------------------------------------------------------------------- attention

TEST(WindowAttention, ConstantWindowGivesValueProjection) {
    const WindowGeometry geo{4, 2};
    auto p = random_attention(4, geo, 70, /*zero_rel=*/true);
    const std::vector<double> c{0.3, -0.2, 0.7, 0.1};
    Tensor<double> x = Tensor<double>::chw(4, 4, 4);
    for (std::size_t ch = 0; ch < 4; ++ch)
        for (auto& v : x.channel(ch)) v = c[ch];
    AttentionTrace<double> tr;
    auto y = run_wmsa(x, geo, p, &tr);
    for (double a : tr.probs) EXPECT_NEAR(a, 1.0 / 16.0, 1e-12);
    const auto expect = value_projection(c, p);
    for (std::size_t ch = 0; ch < 4; ++ch)
        for (double v : y.channel(ch)) EXPECT_NEAR(v, expect[ch], 1e-12);
}

TEST(WindowAttention, SingleTokenWindowIsValueProjection) {
    const WindowGeometry geo{1, 2};
    auto p = random_attention(4, geo, 80);
    auto x = random_tensor({4, 3, 2}, 81);
    auto y = run_wmsa(x, geo, p);
    for (std::size_t py = 0; py < 3; ++py)
        for (std::size_t px = 0; px < 2; ++px) {
            std::vector<double> v(4);
            for (std::size_t ch = 0; ch < 4; ++ch) v[ch] = x.at(ch, py, px);
            const auto expect = value_projection(v, p);
            for (std::size_t ch = 0; ch < 4; ++ch) EXPECT_NEAR(y.at(ch, py, px), expect[ch], 1e-12);
        }
}

TEST(WindowAttention, MatchesSoftmaxOracle) {
    for (std::size_t heads : {1u, 2u}) {
        const WindowGeometry geo{2, heads};
        auto p = random_attention(4, geo, 90 + heads);
        auto x = random_tensor({4, 2, 2}, 95 + heads);
        EXPECT_LT(max_abs_diff(run_wmsa(x, geo, p), attention_oracle(x, geo, p)), 1e-6);
    }
}

TEST(WindowAttention, WeightsAreConvexAndWindowsIndependent) {
    const WindowGeometry geo{2, 2};
    auto p = random_attention(4, geo, 100);
    auto x = random_tensor({4, 4, 4}, 101);
    AttentionTrace<double> tr;
    auto y = run_wmsa(x, geo, p, &tr);
    const std::size_t n = geo.tokens();
    for (std::size_t row = 0; row < tr.probs.size() / n; ++row) {
        double s = 0;
        for (std::size_t u = 0; u < n; ++u) {
            EXPECT_GE(tr.probs[row * n + u], 0.0);
            s += tr.probs[row * n + u];
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
    // Perturb the top-left window only; the other three windows are unchanged.
    auto x2 = x;
    x2.at(0, 0, 0) += 1.0;
    x2.at(3, 1, 1) -= 0.5;
    auto y2 = run_wmsa(x2, geo, p);
    for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t py = 0; py < 4; ++py)
            for (std::size_t px = 0; px < 4; ++px)
                if (py >= 2 || px >= 2) {
                    EXPECT_EQ(y.at(c, py, px), y2.at(c, py, px));
                }
}

TEST(WindowAttention, RejectsBadGeometry) {
    const WindowGeometry geo{4, 3};
    auto p = random_attention(4, WindowGeometry{4, 2}, 1);
    EXPECT_THROW(run_wmsa(Tensor<double>::chw(4, 8, 8), geo, p), ShapeError);  // 4 channels, 3 heads
    EXPECT_THROW(run_wmsa(Tensor<double>::chw(4, 6, 8), WindowGeometry{4, 2}, p), ShapeError);
}

// --------------------------------------------------------------------------- gradient checks

namespace {

OpFn conv_op(std::size_t in, std::size_t out, std::size_t k) {
    return [=](Graph<double>& g, const std::vector<Var<double>>& x, ParameterSet<double>& p) {
        return Conv2dLayer{"c", in, out, k}(g, p, x[0]);
    };
}

ParameterSet<double> init_params(const auto& layer, std::uint64_t seed) {
    ParameterSet<double> p;
    Rng rng(seed);
    if constexpr (requires { layer.init(p, rng); }) {
        layer.init(p, rng);
    } else {
        layer.init(p);
    }
    cloudfuse::testing::randomize(p, seed + 1, 0.5);
    return p;
}

}  // namespace

TEST(GradCheck, Conv3x3) {
    auto p = init_params(Conv2dLayer{"c", 1, 2, 3}, 1);
    auto r = grad_check(conv_op(1, 2, 3), {random_tensor({1, 8, 8}, 2)}, p);
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(GradCheck, Conv1x1IsLinear) {
    auto p = init_params(Conv2dLayer{"c", 3, 2, 1}, 3);
    GradCheckOptions opt;
    opt.max_param_coords = 1000;
    auto r = grad_check(conv_op(3, 2, 1), {random_tensor({3, 5, 5}, 4)}, p, opt);
    EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
    EXPECT_EQ(r.kinks_detected, 0u);
}

TEST(GradCheck, WindowAttention) {
    WindowAttentionLayer layer{"a", 8, {4, 2}};
    auto p = init_params(layer, 5);
    OpFn op = [&](Graph<double>& g, const std::vector<Var<double>>& x, ParameterSet<double>& ps) {
        return layer(g, ps, x[0]);
    };
    auto r = grad_check(op, {random_tensor({8, 8, 8}, 6)}, p);
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(GradCheck, EveryBlockOnThreeShapes) {
    const std::vector<Shape> shapes{{4, 4, 4}, {8, 4, 8}, {4, 8, 4}};
    for (std::size_t si = 0; si < shapes.size(); ++si) {
        const Shape& s = shapes[si];
        const std::size_t c = s[0];
        auto x = random_tensor(Shape(s), 200 + si);
        SCOPED_TRACE(shape_str(s));
        {
            auto p = init_params(Conv2dLayer{"c", c, 3, 3}, 10 + si);
            EXPECT_LT(grad_check(conv_op(c, 3, 3), {x}, p).max_rel_error, 1e-4) << "conv3x3";
        }
        {
            LayerNormLayer ln{"ln", c};
            auto p = init_params(ln, 20 + si);
            OpFn op = [&](Graph<double>& g, const std::vector<Var<double>>& in, ParameterSet<double>& ps) {
                return ln(g, ps, in[0]);
            };
            EXPECT_LT(grad_check(op, {x}, p).max_rel_error, 1e-4) << "layer_norm";
        }
        {
            MlpLayer mlp{"mlp", c, 2};
            auto p = init_params(mlp, 30 + si);
            OpFn op = [&](Graph<double>& g, const std::vector<Var<double>>& in, ParameterSet<double>& ps) {
                return mlp(g, ps, in[0]);
            };
            EXPECT_LT(grad_check(op, {x}, p).max_rel_error, 1e-4) << "mlp_gelu";
        }
        {
            WindowAttentionLayer att{"a", c, {4, 2}};
            auto p = init_params(att, 40 + si);
            OpFn op = [&](Graph<double>& g, const std::vector<Var<double>>& in, ParameterSet<double>& ps) {
                return att(g, ps, in[0]);
            };
            EXPECT_LT(grad_check(op, {x}, p).max_rel_error, 1e-4) << "w_msa";
        }
        {
            OpFn op = [](Graph<double>&, const std::vector<Var<double>>& in, ParameterSet<double>&) {
                return reformat_inv(relu(reformat(in[0], 2)), 2);
            };
            auto r = grad_check(op, {x}, {});
            EXPECT_LT(r.max_rel_error, 1e-4) << "reformat/relu";
        }
        {
            OpFn op = [](Graph<double>&, const std::vector<Var<double>>& in, ParameterSet<double>&) {
                return concat(std::vector<Var<double>>{gelu(in[0]), add(in[0], in[1])});
            };
            auto r = grad_check(op, {x, random_tensor(Shape(s), 300 + si)}, {});
            EXPECT_LT(r.max_rel_error, 1e-4) << "concat/add/gelu";
        }
    }
}

TEST(GradCheck, DetectsWrongGradient) {
    // Identity ops whose backward is scaled by a deliberate error factor. The
    // larger fallback steps must not hide either one.
    auto scaled = [](double factor) {
        return OpFn([factor](Graph<double>& g, const std::vector<Var<double>>& in, ParameterSet<double>&) {
            Var<double> x = in[0];
            Tensor<double> y = x.value();
            return g.record(std::move(y), {x}, [x, factor](Graph<double>& gg, const Tensor<double>& dy) {
                Tensor<double> scaled_dy = dy;
                for (auto& v : scaled_dy.values()) v *= factor;
                *gg.grad_buffer(x) += scaled_dy;
            });
        });
    };
    const GradCheckResult gross = grad_check(scaled(2.0), {random_tensor({1, 3, 3}, 9)}, {});
    EXPECT_GT(gross.max_rel_error, 0.1);
    EXPECT_EQ(gross.refined, gross.coords_checked);
    EXPECT_GT(grad_check(scaled(1.001), {random_tensor({1, 3, 3}, 9)}, {}).max_rel_error, 5e-4);
    EXPECT_LT(grad_check(scaled(1.0), {random_tensor({1, 3, 3}, 9)}, {}).max_rel_error, 1e-8);
}
