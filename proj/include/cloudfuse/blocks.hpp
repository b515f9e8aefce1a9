#ifndef CLOUDFUSE_BLOCKS_HPP
#define CLOUDFUSE_BLOCKS_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "cloudfuse/graph.hpp"
#include "cloudfuse/tensor.hpp"

namespace cloudfuse {

using Rng = std::mt19937_64;

namespace detail {

inline void require_rank3(const Shape& s, const char* what) {
    if (s.size() != 3 || s[0] == 0 || s[1] == 0 || s[2] == 0) {
        throw ShapeError(std::string(what) + ": expected non-empty (C, H, W) feature map, got " + shape_str(s));
    }
}

template <typename T>
void accumulate(Tensor<T>* dst, const Tensor<T>& src) {
    if (dst) *dst += src;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pointwise and structural ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    Tensor<T>::require_same_shape(a.value(), b.value(), "add");
    Tensor<T> out = a.value();
    out += b.value();
    return a.graph->record(std::move(out), {a, b}, [a, b](Graph<T>& g, const Tensor<T>& dy) {
        detail::accumulate(g.grad_buffer(a), dy);
        detail::accumulate(g.grad_buffer(b), dy);
    });
}

template <typename T>
Var<T> relu(Var<T> x) {
    Tensor<T> out = x.value();
    for (auto& v : out.values()) v = v > T(0) ? v : T(0);
    return x.graph->record(std::move(out), {x}, [x](Graph<T>& g, const Tensor<T>& dy) {
        Tensor<T>* dx = g.grad_buffer(x);
        if (!dx) return;
        const Tensor<T>& in = g.value(x);
        for (std::size_t i = 0; i < dy.size(); ++i) {
            if (in[i] > T(0)) (*dx)[i] += dy[i];
        }
    });
}

// Exact (erf) GELU.
template <typename T>
T gelu_value(T v) {
    return T(0.5) * v * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_derivative(T v) {
    const T cdf = T(0.5) * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
    const T pdf = std::exp(T(-0.5) * v * v) * std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
    return cdf + v * pdf;
}

template <typename T>
Var<T> gelu(Var<T> x) {
    Tensor<T> out = x.value();
    for (auto& v : out.values()) v = gelu_value(v);
    return x.graph->record(std::move(out), {x}, [x](Graph<T>& g, const Tensor<T>& dy) {
        Tensor<T>* dx = g.grad_buffer(x);
        if (!dx) return;
        const Tensor<T>& in = g.value(x);
        for (std::size_t i = 0; i < dy.size(); ++i) (*dx)[i] += dy[i] * gelu_derivative(in[i]);
    });
}

// Channel-wise concatenation of feature maps with equal spatial size.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& first = parts.front().shape();
    detail::require_rank3(first, "concat");
    std::size_t channels = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        detail::require_rank3(s, "concat");
        if (s[1] != first[1] || s[2] != first[2]) {
            throw ShapeError("concat: spatial mismatch " + shape_str(first) + " vs " + shape_str(s));
        }
        channels += s[0];
    }
    Tensor<T> out = Tensor<T>::chw(channels, first[1], first[2]);
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const Tensor<T>& v = p.value();
        std::copy(v.data(), v.data() + v.size(), out.data() + offset);
        offset += v.size();
    }
    return parts.front().graph->record(std::move(out), parts, [parts](Graph<T>& g, const Tensor<T>& dy) {
        std::size_t off = 0;
        for (const auto& p : parts) {
            const std::size_t n = g.value(p).size();
            if (Tensor<T>* dx = g.grad_buffer(p)) {
                for (std::size_t i = 0; i < n; ++i) (*dx)[i] += dy[off + i];
            }
            off += n;
        }
    });
}

// ---------------------------------------------------------------------------
// Reformat (space-to-depth) and its inverse.
//
// Output channel c*s*s + dy*s + dx holds input channel c sampled at spatial
// phase (dy, dx): out[c*s*s + dy*s + dx][y][x] = in[c][y*s + dy][x*s + dx].
// ---------------------------------------------------------------------------

namespace detail {

// Visits every (shallow index, deep index) pair of the phase bijection
// between a (C, h*s, w*s) map and its (C*s*s, h, w) counterpart.
template <typename Fn>
void for_each_phase(std::size_t c_small, std::size_t h, std::size_t w, std::size_t s, Fn&& fn) {
    const std::size_t big_w = w * s;
    for (std::size_t c = 0; c < c_small; ++c) {
        for (std::size_t dy = 0; dy < s; ++dy) {
            for (std::size_t dx = 0; dx < s; ++dx) {
                const std::size_t cd = c * s * s + dy * s + dx;
                for (std::size_t y = 0; y < h; ++y) {
                    for (std::size_t x = 0; x < w; ++x) {
                        fn((c * h * s + y * s + dy) * big_w + x * s + dx, (cd * h + y) * w + x);
                    }
                }
            }
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> reformat(const Tensor<T>& f, std::size_t s) {
    detail::require_rank3(f.shape(), "reformat");
    if (s == 0 || f.height() % s != 0 || f.width() % s != 0) {
        throw ShapeError("reformat: spatial size " + shape_str(f.shape()) + " not divisible by scale " +
                         std::to_string(s));
    }
    Tensor<T> out = Tensor<T>::chw(f.channels() * s * s, f.height() / s, f.width() / s);
    detail::for_each_phase(f.channels(), out.height(), out.width(), s,
                           [&](std::size_t shallow, std::size_t deep) { out[deep] = f[shallow]; });
    return out;
}

template <typename T>
Tensor<T> reformat_inv(const Tensor<T>& f, std::size_t s) {
    detail::require_rank3(f.shape(), "reformat_inv");
    if (s == 0 || f.channels() % (s * s) != 0) {
        throw ShapeError("reformat_inv: channel count " + std::to_string(f.channels()) +
                         " not divisible by s^2 = " + std::to_string(s * s));
    }
    Tensor<T> out = Tensor<T>::chw(f.channels() / (s * s), f.height() * s, f.width() * s);
    detail::for_each_phase(out.channels(), f.height(), f.width(), s,
                           [&](std::size_t shallow, std::size_t deep) { out[shallow] = f[deep]; });
    return out;
}

template <typename T>
Var<T> reformat(Var<T> x, std::size_t s) {
    return x.graph->record(reformat(x.value(), s), {x}, [x, s](Graph<T>& g, const Tensor<T>& dy) {
        if (Tensor<T>* dx = g.grad_buffer(x)) *dx += reformat_inv(dy, s);
    });
}

template <typename T>
Var<T> reformat_inv(Var<T> x, std::size_t s) {
    return x.graph->record(reformat_inv(x.value(), s), {x}, [x, s](Graph<T>& g, const Tensor<T>& dy) {
        if (Tensor<T>* dx = g.grad_buffer(x)) *dx += reformat(dy, s);
    });
}

// ---------------------------------------------------------------------------
// 2-D convolution, stride 1, "same" zero padding, odd square kernels.
// weight: (out, in, k, k), bias: (out).
// ---------------------------------------------------------------------------

namespace detail {

struct ConvTap {
    std::ptrdiff_t dy, dx;
    std::size_t y0, y1, x0, x1;  // output rows/cols where the tap reads inside the image
};

inline ConvTap conv_tap(std::size_t ky, std::size_t kx, std::size_t k, std::size_t h, std::size_t w) {
    const auto pad = static_cast<std::ptrdiff_t>(k / 2);
    ConvTap t{};
    t.dy = static_cast<std::ptrdiff_t>(ky) - pad;
    t.dx = static_cast<std::ptrdiff_t>(kx) - pad;
    const auto ih = static_cast<std::ptrdiff_t>(h), iw = static_cast<std::ptrdiff_t>(w);
    t.y0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -t.dy));
    t.y1 = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(ih - t.dy, 0, ih));
    t.x0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -t.dx));
    t.x1 = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(iw - t.dx, 0, iw));
    return t;
}

inline void check_conv_shapes(const Shape& x, const Shape& w, const Shape& b) {
    require_rank3(x, "conv2d");
    if (w.size() != 4 || w[2] != w[3] || w[2] % 2 == 0) {
        throw ShapeError("conv2d: weight must be (out, in, k, k) with odd k, got " + shape_str(w));
    }
    if (w[1] != x[0]) {
        throw ShapeError("conv2d: input has " + std::to_string(x[0]) + " channels, kernel expects " +
                         std::to_string(w[1]));
    }
    if (b.size() != 1 || b[0] != w[0]) {
        throw ShapeError("conv2d: bias shape " + shape_str(b) + " does not match " + std::to_string(w[0]) +
                         " output channels");
    }
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    detail::check_conv_shapes(x.shape(), w.shape(), b.shape());
    const std::size_t cin = x.channels(), h = x.height(), wd = x.width();
    const std::size_t cout = w.dim(0), k = w.dim(2);
    Tensor<T> out = Tensor<T>::chw(cout, h, wd);
    for (std::size_t o = 0; o < cout; ++o) {
        T* op = out.data() + o * h * wd;
        std::fill(op, op + h * wd, b[o]);
        for (std::size_t i = 0; i < cin; ++i) {
            const T* ip = x.data() + i * h * wd;
            const T* wp = w.data() + (o * cin + i) * k * k;
            for (std::size_t ky = 0; ky < k; ++ky) {
                for (std::size_t kx = 0; kx < k; ++kx) {
                    const T wv = wp[ky * k + kx];
                    if (wv == T(0)) continue;
                    const auto t = detail::conv_tap(ky, kx, k, h, wd);
                    for (std::size_t y = t.y0; y < t.y1; ++y) {
                        T* orow = op + y * wd;
                        const T* irow = ip + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(y) + t.dy) * wd + t.dx;
                        for (std::size_t xx = t.x0; xx < t.x1; ++xx) orow[xx] += wv * irow[xx];
                    }
                }
            }
        }
    }
    return out;
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b) {
    return x.graph->record(conv2d(x.value(), w.value(), b.value()), {x, w, b},
                           [x, w, b](Graph<T>& g, const Tensor<T>& dy) {
        const Tensor<T>& in = g.value(x);
        const Tensor<T>& wt = g.value(w);
        Tensor<T>* dx = g.grad_buffer(x);
        Tensor<T>* dw = g.grad_buffer(w);
        Tensor<T>* db = g.grad_buffer(b);
        const std::size_t cin = in.channels(), h = in.height(), wd = in.width();
        const std::size_t cout = wt.dim(0), k = wt.dim(2);
        for (std::size_t o = 0; o < cout; ++o) {
            const T* gp = dy.data() + o * h * wd;
            if (db) {
                T s = 0;
                for (std::size_t p = 0; p < h * wd; ++p) s += gp[p];
                (*db)[o] += s;
            }
            for (std::size_t i = 0; i < cin; ++i) {
                const T* ip = in.data() + i * h * wd;
                const std::size_t wbase = (o * cin + i) * k * k;
                for (std::size_t ky = 0; ky < k; ++ky) {
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const auto t = detail::conv_tap(ky, kx, k, h, wd);
                        const T wv = wt[wbase + ky * k + kx];
                        T acc = 0;
                        for (std::size_t y = t.y0; y < t.y1; ++y) {
                            const T* grow = gp + y * wd;
                            const std::size_t src = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(y) + t.dy) * wd;
                            const T* irow = ip + src + t.dx;
                            if (dw) {
                                for (std::size_t xx = t.x0; xx < t.x1; ++xx) acc += grow[xx] * irow[xx];
                            }
                            if (dx && wv != T(0)) {
                                T* drow = dx->data() + i * h * wd + src + t.dx;
                                for (std::size_t xx = t.x0; xx < t.x1; ++xx) drow[xx] += wv * grow[xx];
                            }
                        }
                        if (dw) (*dw)[wbase + ky * k + kx] += acc;
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Layer normalization over the channel axis at every spatial position.
// ---------------------------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta) {
    const Tensor<T>& in = x.value();
    detail::require_rank3(in.shape(), "layer_norm");
    const std::size_t c = in.channels(), hw = in.plane();
    if (gamma.value().size() != c || beta.value().size() != c) {
        throw ShapeError("layer_norm: scale/shift must have " + std::to_string(c) + " entries");
    }
    auto normalized = std::make_shared<Tensor<T>>(in.shape());
    auto inv_std = std::make_shared<std::vector<T>>(hw);
    Tensor<T> out(in.shape());
    const Tensor<T>& ga = gamma.value();
    const Tensor<T>& be = beta.value();
    for (std::size_t p = 0; p < hw; ++p) {
        T mean = 0;
        for (std::size_t ch = 0; ch < c; ++ch) mean += in[ch * hw + p];
        mean /= T(c);
        T var = 0;
        for (std::size_t ch = 0; ch < c; ++ch) {
            const T d = in[ch * hw + p] - mean;
            var += d * d;
        }
        var /= T(c);
        const T rs = T(1) / std::sqrt(var + T(kLayerNormEps));
        (*inv_std)[p] = rs;
        for (std::size_t ch = 0; ch < c; ++ch) {
            const T xh = (in[ch * hw + p] - mean) * rs;
            (*normalized)[ch * hw + p] = xh;
            out[ch * hw + p] = xh * ga[ch] + be[ch];
        }
    }
    return x.graph->record(std::move(out), {x, gamma, beta},
                           [x, gamma, beta, normalized, inv_std, c, hw](Graph<T>& g, const Tensor<T>& dy) {
        const Tensor<T>& ga = g.value(gamma);
        Tensor<T>* dx = g.grad_buffer(x);
        Tensor<T>* dg = g.grad_buffer(gamma);
        Tensor<T>* db = g.grad_buffer(beta);
        const Tensor<T>& xh = *normalized;
        for (std::size_t p = 0; p < hw; ++p) {
            T mean_dxh = 0, mean_dxh_xh = 0;
            for (std::size_t ch = 0; ch < c; ++ch) {
                const std::size_t idx = ch * hw + p;
                if (dg) (*dg)[ch] += dy[idx] * xh[idx];
                if (db) (*db)[ch] += dy[idx];
                const T dxh = dy[idx] * ga[ch];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[idx];
            }
            if (!dx) continue;
            mean_dxh /= T(c);
            mean_dxh_xh /= T(c);
            for (std::size_t ch = 0; ch < c; ++ch) {
                const std::size_t idx = ch * hw + p;
                const T dxh = dy[idx] * ga[ch];
                (*dx)[idx] += (*inv_std)[p] * (dxh - mean_dxh - xh[idx] * mean_dxh_xh);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Window multi-head self-attention (non-shifted windows).
//
// qkv_w: (3C, C) rows [0,C) -> query, [C,2C) -> key, [2C,3C) -> value
// qkv_b: (3C), proj_w: (C, C), proj_b: (C)
// rel_bias: (heads, (2*window-1)^2), indexed by the (dy, dx) offset between
// query and key token inside the window.
// ---------------------------------------------------------------------------

struct WindowGeometry {
    std::size_t window = 0;
    std::size_t heads = 0;

    std::size_t tokens() const { return window * window; }
    std::size_t bias_span() const { return 2 * window - 1; }
    std::size_t relative_index(std::size_t t, std::size_t u) const {
        const std::size_t ty = t / window, tx = t % window, uy = u / window, ux = u % window;
        return (ty + window - 1 - uy) * bias_span() + (tx + window - 1 - ux);
    }
};

// Cached per-window activations; `probs` holds the softmax weights
// [window][head][query][key].
template <typename T>
struct AttentionTrace {
    std::size_t windows_y = 0, windows_x = 0;
    std::vector<T> tokens, q, k, v, probs, context;
};

namespace detail {

inline void check_wmsa_shapes(const Shape& x, const WindowGeometry& geo, const Shape& qkv_w, const Shape& qkv_b,
                              const Shape& proj_w, const Shape& proj_b, const Shape& rel_bias) {
    require_rank3(x, "w_msa");
    const std::size_t c = x[0];
    if (geo.window == 0 || x[1] % geo.window != 0 || x[2] % geo.window != 0) {
        throw ShapeError("w_msa: spatial size " + shape_str(x) + " not divisible by window " +
                         std::to_string(geo.window));
    }
    if (geo.heads == 0 || c % geo.heads != 0) {
        throw ShapeError("w_msa: " + std::to_string(c) + " channels not divisible by " + std::to_string(geo.heads) +
                         " heads");
    }
    if (qkv_w != Shape{3 * c, c} || qkv_b != Shape{3 * c} || proj_w != Shape{c, c} || proj_b != Shape{c} ||
        rel_bias != Shape{geo.heads, geo.bias_span() * geo.bias_span()}) {
        throw ShapeError("w_msa: parameter shapes inconsistent with " + std::to_string(c) + " channels");
    }
}

}  // namespace detail

template <typename T>
Tensor<T> w_msa(const Tensor<T>& x, const WindowGeometry& geo, const Tensor<T>& qkv_w, const Tensor<T>& qkv_b,
                const Tensor<T>& proj_w, const Tensor<T>& proj_b, const Tensor<T>& rel_bias,
                AttentionTrace<T>* trace = nullptr) {
    detail::check_wmsa_shapes(x.shape(), geo, qkv_w.shape(), qkv_b.shape(), proj_w.shape(), proj_b.shape(),
                              rel_bias.shape());
    const std::size_t c = x.channels(), h = x.height(), w = x.width();
    const std::size_t ws = geo.window, n = geo.tokens(), heads = geo.heads, d = c / heads;
    const std::size_t nwy = h / ws, nwx = w / ws, nwin = nwy * nwx;
    const T scale = T(1) / std::sqrt(T(d));

    AttentionTrace<T> local;
    AttentionTrace<T>& tr = trace ? *trace : local;
    tr.windows_y = nwy;
    tr.windows_x = nwx;
    tr.tokens.assign(nwin * n * c, T(0));
    tr.q.assign(nwin * n * c, T(0));
    tr.k.assign(nwin * n * c, T(0));
    tr.v.assign(nwin * n * c, T(0));
    tr.probs.assign(nwin * heads * n * n, T(0));
    tr.context.assign(nwin * n * c, T(0));

    Tensor<T> out(x.shape());
    std::vector<T> logits(n);
    for (std::size_t wy = 0; wy < nwy; ++wy) {
        for (std::size_t wx = 0; wx < nwx; ++wx) {
            const std::size_t win = wy * nwx + wx;
            T* xt = tr.tokens.data() + win * n * c;
            T* q = tr.q.data() + win * n * c;
            T* k = tr.k.data() + win * n * c;
            T* v = tr.v.data() + win * n * c;
            T* ctx = tr.context.data() + win * n * c;
            for (std::size_t t = 0; t < n; ++t) {
                const std::size_t py = wy * ws + t / ws, px = wx * ws + t % ws;
                for (std::size_t ch = 0; ch < c; ++ch) xt[t * c + ch] = x.at(ch, py, px);
            }
            for (std::size_t t = 0; t < n; ++t) {
                for (std::size_t r = 0; r < c; ++r) {
                    T sq = qkv_b[r], sk = qkv_b[c + r], sv = qkv_b[2 * c + r];
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        const T xv = xt[t * c + ch];
                        sq += qkv_w[r * c + ch] * xv;
                        sk += qkv_w[(c + r) * c + ch] * xv;
                        sv += qkv_w[(2 * c + r) * c + ch] * xv;
                    }
                    q[t * c + r] = sq;
                    k[t * c + r] = sk;
                    v[t * c + r] = sv;
                }
            }
            for (std::size_t hd = 0; hd < heads; ++hd) {
                T* a = tr.probs.data() + ((win * heads + hd) * n) * n;
                const T* bias = rel_bias.data() + hd * geo.bias_span() * geo.bias_span();
                for (std::size_t t = 0; t < n; ++t) {
                    T mx = -std::numeric_limits<T>::infinity();
                    for (std::size_t u = 0; u < n; ++u) {
                        T dot = 0;
                        for (std::size_t e = 0; e < d; ++e) dot += q[t * c + hd * d + e] * k[u * c + hd * d + e];
                        logits[u] = dot * scale + bias[geo.relative_index(t, u)];
                        mx = std::max(mx, logits[u]);
                    }
                    T z = 0;
                    for (std::size_t u = 0; u < n; ++u) {
                        logits[u] = std::exp(logits[u] - mx);
                        z += logits[u];
                    }
                    for (std::size_t u = 0; u < n; ++u) a[t * n + u] = logits[u] / z;
                    for (std::size_t e = 0; e < d; ++e) {
                        T s = 0;
                        for (std::size_t u = 0; u < n; ++u) s += a[t * n + u] * v[u * c + hd * d + e];
                        ctx[t * c + hd * d + e] = s;
                    }
                }
            }
            for (std::size_t t = 0; t < n; ++t) {
                const std::size_t py = wy * ws + t / ws, px = wx * ws + t % ws;
                for (std::size_t r = 0; r < c; ++r) {
                    T s = proj_b[r];
                    for (std::size_t ch = 0; ch < c; ++ch) s += proj_w[r * c + ch] * ctx[t * c + ch];
                    out.at(r, py, px) = s;
                }
            }
        }
    }
    return out;
}

template <typename T>
Var<T> w_msa(Var<T> x, const WindowGeometry& geo, Var<T> qkv_w, Var<T> qkv_b, Var<T> proj_w, Var<T> proj_b,
             Var<T> rel_bias) {
    auto tr = std::make_shared<AttentionTrace<T>>();
    Tensor<T> out = w_msa(x.value(), geo, qkv_w.value(), qkv_b.value(), proj_w.value(), proj_b.value(),
                          rel_bias.value(), tr.get());
    return x.graph->record(std::move(out), {x, qkv_w, qkv_b, proj_w, proj_b, rel_bias},
                           [=](Graph<T>& g, const Tensor<T>& dy) {
        const Tensor<T>& wqkv = g.value(qkv_w);
        const Tensor<T>& wproj = g.value(proj_w);
        Tensor<T>* dx = g.grad_buffer(x);
        Tensor<T>* dwqkv = g.grad_buffer(qkv_w);
        Tensor<T>* dbqkv = g.grad_buffer(qkv_b);
        Tensor<T>* dwproj = g.grad_buffer(proj_w);
        Tensor<T>* dbproj = g.grad_buffer(proj_b);
        Tensor<T>* drel = g.grad_buffer(rel_bias);

        const Shape& xs = g.value(x).shape();
        const std::size_t c = xs[0];
        const std::size_t ws = geo.window, n = geo.tokens(), heads = geo.heads, d = c / heads;
        const std::size_t nwx = tr->windows_x, nwin = tr->windows_y * tr->windows_x;
        const std::size_t span2 = geo.bias_span() * geo.bias_span();
        const T scale = T(1) / std::sqrt(T(d));

        std::vector<T> dout(n * c), dctx(n * c), dq(n * c), dk(n * c), dv(n * c), da(n), dlogit(n);
        for (std::size_t win = 0; win < nwin; ++win) {
            const std::size_t wy = win / nwx, wx = win % nwx;
            const T* xt = tr->tokens.data() + win * n * c;
            const T* q = tr->q.data() + win * n * c;
            const T* k = tr->k.data() + win * n * c;
            const T* v = tr->v.data() + win * n * c;
            const T* ctx = tr->context.data() + win * n * c;
            for (std::size_t t = 0; t < n; ++t) {
                const std::size_t py = wy * ws + t / ws, px = wx * ws + t % ws;
                for (std::size_t r = 0; r < c; ++r) dout[t * c + r] = dy.at(r, py, px);
            }
            // Output projection.
            std::fill(dctx.begin(), dctx.end(), T(0));
            for (std::size_t t = 0; t < n; ++t) {
                for (std::size_t r = 0; r < c; ++r) {
                    const T go = dout[t * c + r];
                    if (dbproj) (*dbproj)[r] += go;
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        if (dwproj) (*dwproj)[r * c + ch] += go * ctx[t * c + ch];
                        dctx[t * c + ch] += wproj[r * c + ch] * go;
                    }
                }
            }
            // Attention per head.
            std::fill(dq.begin(), dq.end(), T(0));
            std::fill(dk.begin(), dk.end(), T(0));
            std::fill(dv.begin(), dv.end(), T(0));
            for (std::size_t hd = 0; hd < heads; ++hd) {
                const T* a = tr->probs.data() + ((win * heads + hd) * n) * n;
                for (std::size_t t = 0; t < n; ++t) {
                    T dot_ada = 0;
                    for (std::size_t u = 0; u < n; ++u) {
                        T s = 0;
                        for (std::size_t e = 0; e < d; ++e) {
                            s += dctx[t * c + hd * d + e] * v[u * c + hd * d + e];
                            dv[u * c + hd * d + e] += a[t * n + u] * dctx[t * c + hd * d + e];
                        }
                        da[u] = s;
                        dot_ada += a[t * n + u] * s;
                    }
                    for (std::size_t u = 0; u < n; ++u) {
                        dlogit[u] = a[t * n + u] * (da[u] - dot_ada);
                        if (drel) (*drel)[hd * span2 + geo.relative_index(t, u)] += dlogit[u];
                        const T gs = dlogit[u] * scale;
                        for (std::size_t e = 0; e < d; ++e) {
                            dq[t * c + hd * d + e] += gs * k[u * c + hd * d + e];
                            dk[u * c + hd * d + e] += gs * q[t * c + hd * d + e];
                        }
                    }
                }
            }
            // QKV projection.
            for (std::size_t t = 0; t < n; ++t) {
                const std::size_t py = wy * ws + t / ws, px = wx * ws + t % ws;
                for (std::size_t r = 0; r < c; ++r) {
                    const T gq = dq[t * c + r], gk = dk[t * c + r], gv = dv[t * c + r];
                    if (dbqkv) {
                        (*dbqkv)[r] += gq;
                        (*dbqkv)[c + r] += gk;
                        (*dbqkv)[2 * c + r] += gv;
                    }
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        const T xv = xt[t * c + ch];
                        if (dwqkv) {
                            (*dwqkv)[r * c + ch] += gq * xv;
                            (*dwqkv)[(c + r) * c + ch] += gk * xv;
                            (*dwqkv)[(2 * c + r) * c + ch] += gv * xv;
                        }
                        if (dx) {
                            dx->at(ch, py, px) += wqkv[r * c + ch] * gq + wqkv[(c + r) * c + ch] * gk +
                                                  wqkv[(2 * c + r) * c + ch] * gv;
                        }
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Parameterized layers. Each owns only parameter names; values live in a
// ParameterSet so that whole models serialize as one flat map.
// ---------------------------------------------------------------------------

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    Tensor<T> t(std::move(shape));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.values()) v = static_cast<T>(dist(rng));
    return t;
}

struct Conv2dLayer {
    std::string name;
    std::size_t in = 0, out = 0, kernel = 3;

    std::string weight() const { return name + ".weight"; }
    std::string bias() const { return name + ".bias"; }

    template <typename T>
    void init(ParameterSet<T>& p, Rng& rng, bool zero = false) const {
        Shape ws{out, in, kernel, kernel};
        p.add(weight(), zero ? Tensor<T>(ws) : fan_in_uniform<T>(ws, in * kernel * kernel, rng));
        p.add(bias(), Tensor<T>(Shape{out}));
    }

    template <typename T>
    Var<T> operator()(Graph<T>& g, ParameterSet<T>& p, Var<T> x) const {
        return conv2d(x, g.param(p, weight()), g.param(p, bias()));
    }
};

struct LayerNormLayer {
    std::string name;
    std::size_t channels = 0;

    template <typename T>
    void init(ParameterSet<T>& p) const {
        p.add(name + ".scale", Tensor<T>(Shape{channels}, T(1)));
        p.add(name + ".shift", Tensor<T>(Shape{channels}));
    }

    template <typename T>
    Var<T> operator()(Graph<T>& g, ParameterSet<T>& p, Var<T> x) const {
        return layer_norm(x, g.param(p, name + ".scale"), g.param(p, name + ".shift"));
    }
};

// Position-wise feed-forward: 1x1 conv -> GELU -> 1x1 conv.
struct MlpLayer {
    std::string name;
    std::size_t channels = 0, ratio = 2;

    Conv2dLayer fc1() const { return {name + ".fc1", channels, channels * ratio, 1}; }
    Conv2dLayer fc2() const { return {name + ".fc2", channels * ratio, channels, 1}; }

    template <typename T>
    void init(ParameterSet<T>& p, Rng& rng) const {
        fc1().init(p, rng);
        fc2().init(p, rng);
    }

    template <typename T>
    Var<T> operator()(Graph<T>& g, ParameterSet<T>& p, Var<T> x) const {
        return fc2()(g, p, gelu(fc1()(g, p, x)));
    }
};

struct WindowAttentionLayer {
    std::string name;
    std::size_t channels = 0;
    WindowGeometry geometry;

    template <typename T>
    void init(ParameterSet<T>& p, Rng& rng) const {
        const std::size_t c = channels, span = geometry.bias_span();
        p.add(name + ".qkv.weight", fan_in_uniform<T>(Shape{3 * c, c}, c, rng));
        p.add(name + ".qkv.bias", Tensor<T>(Shape{3 * c}));
        p.add(name + ".proj.weight", fan_in_uniform<T>(Shape{c, c}, c, rng));
        p.add(name + ".proj.bias", Tensor<T>(Shape{c}));
        p.add(name + ".rel_bias", Tensor<T>(Shape{geometry.heads, span * span}));
    }

    template <typename T>
    Var<T> operator()(Graph<T>& g, ParameterSet<T>& p, Var<T> x) const {
        return w_msa(x, geometry, g.param(p, name + ".qkv.weight"), g.param(p, name + ".qkv.bias"),
                     g.param(p, name + ".proj.weight"), g.param(p, name + ".proj.bias"),
                     g.param(p, name + ".rel_bias"));
    }
};

}  // namespace cloudfuse

#endif  // CLOUDFUSE_BLOCKS_HPP
