#pragma once

#include <algorithm>
#include <cmath>

#include "roiformer/tensor.hpp"

namespace roiformer {

// ---------------------------------------------------------------------------
// Elementwise ops. All return new tensors; backwards are the exact adjoints.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "add");
    Tensor<T> out(a.shape);
    for (int64_t i = 0; i < a.numel(); ++i) out.data[i] = a.data[i] + b.data[i];
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "sub");
    Tensor<T> out(a.shape);
    for (int64_t i = 0; i < a.numel(); ++i) out.data[i] = a.data[i] - b.data[i];
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "mul");
    Tensor<T> out(a.shape);
    for (int64_t i = 0; i < a.numel(); ++i) out.data[i] = a.data[i] * b.data[i];
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    Tensor<T> out(a.shape);
    for (int64_t i = 0; i < a.numel(); ++i) out.data[i] = a.data[i] * s;
    return out;
}

template <typename T>
void axpy(Tensor<T>& dst, const Tensor<T>& src, T s = T(1)) {
    check_same_shape(dst, src, "axpy");
    for (int64_t i = 0; i < dst.numel(); ++i) dst.data[i] += s * src.data[i];
}

template <typename T>
T sum(const Tensor<T>& a) {
    T s = 0;
    for (T v : a.data) s += v;
    return s;
}

template <typename T>
T mean(const Tensor<T>& a) {
    return sum(a) / static_cast<T>(a.numel());
}

// ---------------------------------------------------------------------------
// ELU activation (alpha = 1).
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> elu(const Tensor<T>& x) {
    Tensor<T> out(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) {
        const T v = x.data[i];
        out.data[i] = v > T(0) ? v : std::expm1(v);
    }
    return out;
}

// Needs the forward input.
template <typename T>
Tensor<T> elu_backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
    check_same_shape(x, grad_out, "elu_backward");
    Tensor<T> gx(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) {
        const T v = x.data[i];
        gx.data[i] = grad_out.data[i] * (v > T(0) ? T(1) : std::exp(v));
    }
    return gx;
}

template <typename T>
T sigmoid(T x) {
    return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

// ---------------------------------------------------------------------------
// Channel concat / split for [C,H,W] maps.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
        throw ShapeError("concat_channels: spatial dims must match");
    Tensor<T> out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
    std::copy(a.data.begin(), a.data.end(), out.data.begin());
    std::copy(b.data.begin(), b.data.end(), out.data.begin() + a.numel());
    return out;
}

template <typename T>
void split_channels(const Tensor<T>& g, int c_first, Tensor<T>& ga, Tensor<T>& gb) {
    ga = Tensor<T>({c_first, g.dim(1), g.dim(2)});
    gb = Tensor<T>({g.dim(0) - c_first, g.dim(1), g.dim(2)});
    std::copy(g.data.begin(), g.data.begin() + ga.numel(), ga.data.begin());
    std::copy(g.data.begin() + ga.numel(), g.data.end(), gb.data.begin());
}

// ---------------------------------------------------------------------------
// Affine map along the last axis: out = x W + b, weight [Cin,Cout].
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    if (x.rank() < 1 || w.rank() != 2)
        throw ShapeError("linear: need input rank>=1 and rank-2 weight");
    const int cin = x.shape.back();
    const int cout = w.dim(1);
    if (w.dim(0) != cin) throw ShapeError("linear: inner dimension mismatch");
    if (b.numel() != cout) throw ShapeError("linear: bias size mismatch");

    std::vector<int> oshape = x.shape;
    oshape.back() = cout;
    Tensor<T> out(oshape);
    const int64_t rows = x.numel() / cin;
    for (int64_t r = 0; r < rows; ++r) {
        const T* xi = x.ptr() + r * cin;
        T* oi = out.ptr() + r * cout;
        for (int j = 0; j < cout; ++j) oi[j] = b.data[static_cast<size_t>(j)];
        for (int k = 0; k < cin; ++k) {
            const T xv = xi[k];
            const T* wk = w.ptr() + static_cast<size_t>(k) * cout;
            for (int j = 0; j < cout; ++j) oi[j] += xv * wk[j];
        }
    }
    return out;
}

// Accumulates into gw/gb; returns grad wrt x.
template <typename T>
Tensor<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_out,
                          Tensor<T>& gw, Tensor<T>& gb) {
    const int cin = x.shape.back();
    const int cout = w.dim(1);
    if (grad_out.shape.back() != cout || grad_out.numel() / cout != x.numel() / cin)
        throw ShapeError("linear_backward: grad shape mismatch");
    Tensor<T> gx(x.shape);
    const int64_t rows = x.numel() / cin;
    for (int64_t r = 0; r < rows; ++r) {
        const T* xi = x.ptr() + r * cin;
        const T* gi = grad_out.ptr() + r * cout;
        T* gxi = gx.ptr() + r * cin;
        for (int j = 0; j < cout; ++j) gb.data[static_cast<size_t>(j)] += gi[j];
        for (int k = 0; k < cin; ++k) {
            const T* wk = w.ptr() + static_cast<size_t>(k) * cout;
            T* gwk = gw.ptr() + static_cast<size_t>(k) * cout;
            T acc = 0;
            const T xv = xi[k];
            for (int j = 0; j < cout; ++j) {
                acc += gi[j] * wk[j];
                gwk[j] += xv * gi[j];
            }
            gxi[k] = acc;
        }
    }
    return gx;
}

// ---------------------------------------------------------------------------
// Numerically stable softmax along an axis.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    if (axis < 0) axis += x.rank();
    if (axis < 0 || axis >= x.rank()) throw ShapeError("softmax: axis out of range");
    const int n = x.dim(axis);
    int64_t inner = 1, outer = 1;
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);

    Tensor<T> out(x.shape);
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const T* xs = x.ptr() + o * n * inner + in;
            T* os = out.ptr() + o * n * inner + in;
            T mx = xs[0];
            for (int i = 1; i < n; ++i) mx = std::max(mx, xs[i * inner]);
            T z = 0;
            for (int i = 0; i < n; ++i) {
                const T e = std::exp(xs[i * inner] - mx);
                os[i * inner] = e;
                z += e;
            }
            const T inv = T(1) / z;
            for (int i = 0; i < n; ++i) os[i * inner] *= inv;
        }
    }
    return out;
}

// Takes the forward output y = softmax(x).
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& y, const Tensor<T>& grad_out, int axis) {
    check_same_shape(y, grad_out, "softmax_backward");
    if (axis < 0) axis += y.rank();
    const int n = y.dim(axis);
    int64_t inner = 1, outer = 1;
    for (int i = axis + 1; i < y.rank(); ++i) inner *= y.dim(i);
    for (int i = 0; i < axis; ++i) outer *= y.dim(i);

    Tensor<T> gx(y.shape);
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const T* ys = y.ptr() + o * n * inner + in;
            const T* gs = grad_out.ptr() + o * n * inner + in;
            T* gxs = gx.ptr() + o * n * inner + in;
            T dot = 0;
            for (int i = 0; i < n; ++i) dot += ys[i * inner] * gs[i * inner];
            for (int i = 0; i < n; ++i)
                gxs[i * inner] = ys[i * inner] * (gs[i * inner] - dot);
        }
    }
    return gx;
}

// ---------------------------------------------------------------------------
// 3x3 convolution on [C,H,W], zero padding 1, stride 1 or 2.
// Weight layout [Cout,Cin,3,3].
// ---------------------------------------------------------------------------

inline int conv_out_dim(int in, int stride) { return (in - 1) / stride + 1; }

template <typename T>
Tensor<T> conv2d_3x3(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride = 1) {
    if (x.rank() != 3 || w.rank() != 4 || w.dim(2) != 3 || w.dim(3) != 3)
        throw ShapeError("conv2d_3x3: need [C,H,W] input and [Co,Ci,3,3] weight");
    if (w.dim(1) != x.dim(0)) throw ShapeError("conv2d_3x3: channel mismatch");
    if (b.numel() != w.dim(0)) throw ShapeError("conv2d_3x3: bias size mismatch");
    if (stride != 1 && stride != 2) throw ValueError("conv2d_3x3: stride must be 1 or 2");

    const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int co = w.dim(0);
    const int ho = conv_out_dim(h, stride), wo = conv_out_dim(wd, stride);
    Tensor<T> out({co, ho, wo});

    for (int oc = 0; oc < co; ++oc) {
        T* op = out.ptr() + static_cast<size_t>(oc) * ho * wo;
        const T bias = b.data[static_cast<size_t>(oc)];
        for (int64_t i = 0; i < static_cast<int64_t>(ho) * wo; ++i) op[i] = bias;
        for (int ic = 0; ic < ci; ++ic) {
            const T* xp = x.ptr() + static_cast<size_t>(ic) * h * wd;
            const T* wp = w.ptr() + ((static_cast<size_t>(oc) * ci + ic) * 3) * 3;
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    const T wv = wp[ky * 3 + kx];
                    if (wv == T(0)) continue;
                    for (int oy = 0; oy < ho; ++oy) {
                        const int iy = oy * stride + ky - 1;
                        if (iy < 0 || iy >= h) continue;
                        const T* xrow = xp + static_cast<size_t>(iy) * wd;
                        T* orow = op + static_cast<size_t>(oy) * wo;
                        for (int ox = 0; ox < wo; ++ox) {
                            const int ix = ox * stride + kx - 1;
                            if (ix < 0 || ix >= wd) continue;
                            orow[ox] += wv * xrow[ix];
                        }
                    }
                }
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> conv2d_3x3_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_out,
                              int stride, Tensor<T>& gw, Tensor<T>& gb) {
    const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int co = w.dim(0);
    const int ho = conv_out_dim(h, stride), wo = conv_out_dim(wd, stride);
    if (grad_out.rank() != 3 || grad_out.dim(0) != co || grad_out.dim(1) != ho ||
        grad_out.dim(2) != wo)
        throw ShapeError("conv2d_3x3_backward: grad shape mismatch");

    Tensor<T> gx(x.shape);
    for (int oc = 0; oc < co; ++oc) {
        const T* gp = grad_out.ptr() + static_cast<size_t>(oc) * ho * wo;
        T gbacc = 0;
        for (int64_t i = 0; i < static_cast<int64_t>(ho) * wo; ++i) gbacc += gp[i];
        gb.data[static_cast<size_t>(oc)] += gbacc;
        for (int ic = 0; ic < ci; ++ic) {
            const T* xp = x.ptr() + static_cast<size_t>(ic) * h * wd;
            T* gxp = gx.ptr() + static_cast<size_t>(ic) * h * wd;
            const T* wp = w.ptr() + ((static_cast<size_t>(oc) * ci + ic) * 3) * 3;
            T* gwp = gw.ptr() + ((static_cast<size_t>(oc) * ci + ic) * 3) * 3;
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    const T wv = wp[ky * 3 + kx];
                    T gwacc = 0;
                    for (int oy = 0; oy < ho; ++oy) {
                        const int iy = oy * stride + ky - 1;
                        if (iy < 0 || iy >= h) continue;
                        const T* xrow = xp + static_cast<size_t>(iy) * wd;
                        T* gxrow = gxp + static_cast<size_t>(iy) * wd;
                        const T* grow = gp + static_cast<size_t>(oy) * wo;
                        for (int ox = 0; ox < wo; ++ox) {
                            const int ix = ox * stride + kx - 1;
                            if (ix < 0 || ix >= wd) continue;
                            const T g = grow[ox];
                            gwacc += g * xrow[ix];
                            gxrow[ix] += g * wv;
                        }
                    }
                    gwp[ky * 3 + kx] += gwacc;
                }
            }
        }
    }
    return gx;
}

// ---------------------------------------------------------------------------
// Nearest-neighbor 2x upsampling; backward is 2x2 block summation.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> upsample_nearest_x2(const Tensor<T>& x) {
    if (x.rank() != 3) throw ShapeError("upsample_nearest_x2: need [C,H,W]");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor<T> out({c, 2 * h, 2 * w});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < 2 * h; ++y) {
            const T* xrow = x.ptr() + (static_cast<size_t>(ch) * h + y / 2) * w;
            T* orow = out.ptr() + (static_cast<size_t>(ch) * 2 * h + y) * 2 * w;
            for (int xx = 0; xx < 2 * w; ++xx) orow[xx] = xrow[xx / 2];
        }
    return out;
}

template <typename T>
Tensor<T> upsample_nearest_x2_backward(const Tensor<T>& grad_out) {
    if (grad_out.rank() != 3 || grad_out.dim(1) % 2 || grad_out.dim(2) % 2)
        throw ShapeError("upsample_nearest_x2_backward: need even [C,2H,2W]");
    const int c = grad_out.dim(0), h = grad_out.dim(1) / 2, w = grad_out.dim(2) / 2;
    Tensor<T> gx({c, h, w});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < 2 * h; ++y) {
            const T* grow = grad_out.ptr() + (static_cast<size_t>(ch) * 2 * h + y) * 2 * w;
            T* gxrow = gx.ptr() + (static_cast<size_t>(ch) * h + y / 2) * w;
            for (int xx = 0; xx < 2 * w; ++xx) gxrow[xx / 2] += grow[xx];
        }
    return gx;
}

// Repeated x2 upsampling to reach a target size (target = in * 2^k).
template <typename T>
Tensor<T> upsample_to(const Tensor<T>& x, int th, int tw) {
    Tensor<T> cur = x;
    while (cur.dim(1) < th || cur.dim(2) < tw) cur = upsample_nearest_x2(cur);
    if (cur.dim(1) != th || cur.dim(2) != tw)
        throw ShapeError("upsample_to: target is not a power-of-two multiple");
    return cur;
}

template <typename T>
Tensor<T> upsample_to_backward(const Tensor<T>& grad_out, int sh, int sw) {
    Tensor<T> cur = grad_out;
    while (cur.dim(1) > sh || cur.dim(2) > sw) cur = upsample_nearest_x2_backward(cur);
    if (cur.dim(1) != sh || cur.dim(2) != sw)
        throw ShapeError("upsample_to_backward: source is not a power-of-two divisor");
    return cur;
}

// ---------------------------------------------------------------------------
// Token view: [C,H,W] map <-> [H*W,C] row-major matrix of position features.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> to_tokens(const Tensor<T>& map) {
    if (map.rank() != 3) throw ShapeError("to_tokens: need [C,H,W]");
    const int c = map.dim(0), h = map.dim(1), w = map.dim(2);
    Tensor<T> out({h * w, c});
    for (int ch = 0; ch < c; ++ch) {
        const T* mp = map.ptr() + static_cast<size_t>(ch) * h * w;
        for (int i = 0; i < h * w; ++i) out.data[static_cast<size_t>(i) * c + ch] = mp[i];
    }
    return out;
}

template <typename T>
Tensor<T> from_tokens(const Tensor<T>& tokens, int h, int w) {
    if (tokens.rank() != 2 || tokens.dim(0) != h * w)
        throw ShapeError("from_tokens: token count does not match spatial dims");
    const int c = tokens.dim(1);
    Tensor<T> out({c, h, w});
    for (int ch = 0; ch < c; ++ch) {
        T* mp = out.ptr() + static_cast<size_t>(ch) * h * w;
        for (int i = 0; i < h * w; ++i) mp[i] = tokens.data[static_cast<size_t>(i) * c + ch];
    }
    return out;
}

}  // namespace roiformer
