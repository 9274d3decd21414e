#pragma once

#include <array>

#include "roiformer/tensor.hpp"

namespace roiformer {

// Bilinear interpolation on a [C,H,W] feature map at continuous pixel
// coordinates. Pixel centers sit at integer coordinates, origin top-left.
// Taps outside [0,W-1]x[0,H-1] read as zero. The containing cell is
// [floor(x), floor(x)+1), so gradients at integer coordinates come from the
// +x/+y cell.

template <typename T>
struct BilinearTaps {
    int x0, y0;
    T wx, wy;  // fractional offsets inside the cell
};

template <typename T>
inline BilinearTaps<T> bilinear_cell(T x, T y) {
    const T fx = std::floor(x), fy = std::floor(y);
    return {static_cast<int>(fx), static_cast<int>(fy), x - fx, y - fy};
}

template <typename T>
inline T tap(const T* plane, int h, int w, int y, int x) {
    if (x < 0 || x >= w || y < 0 || y >= h) return T(0);
    return plane[static_cast<size_t>(y) * w + x];
}

template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& feature,
                          const std::vector<std::array<T, 2>>& coords) {
    if (feature.rank() != 3 || feature.numel() == 0)
        throw ShapeError("bilinear_sample: need non-empty [C,H,W] feature");
    const int c = feature.dim(0), h = feature.dim(1), w = feature.dim(2);
    const int p = static_cast<int>(coords.size());
    Tensor<T> out({c, std::max(p, 1)});
    if (p == 0) throw ShapeError("bilinear_sample: empty coordinate list");

    for (int i = 0; i < p; ++i) {
        const T x = coords[static_cast<size_t>(i)][0], y = coords[static_cast<size_t>(i)][1];
        if (!std::isfinite(static_cast<double>(x)) || !std::isfinite(static_cast<double>(y)))
            throw ValueError("bilinear_sample: non-finite coordinate");
        const auto cell = bilinear_cell(x, y);
        const T w00 = (T(1) - cell.wx) * (T(1) - cell.wy);
        const T w01 = cell.wx * (T(1) - cell.wy);
        const T w10 = (T(1) - cell.wx) * cell.wy;
        const T w11 = cell.wx * cell.wy;
        for (int ch = 0; ch < c; ++ch) {
            const T* plane = feature.ptr() + static_cast<size_t>(ch) * h * w;
            out(ch, i) = w00 * tap(plane, h, w, cell.y0, cell.x0) +
                         w01 * tap(plane, h, w, cell.y0, cell.x0 + 1) +
                         w10 * tap(plane, h, w, cell.y0 + 1, cell.x0) +
                         w11 * tap(plane, h, w, cell.y0 + 1, cell.x0 + 1);
        }
    }
    return out;
}

template <typename T>
struct BilinearBackwardResult {
    Tensor<T> grad_feature;                    // [C,H,W]
    std::vector<std::array<T, 2>> grad_coords; // per point (d/dx, d/dy)
};

template <typename T>
inline void scatter_tap(T* plane, int h, int w, int y, int x, T v) {
    if (x < 0 || x >= w || y < 0 || y >= h) return;
    plane[static_cast<size_t>(y) * w + x] += v;
}

template <typename T>
BilinearBackwardResult<T> bilinear_sample_backward(const Tensor<T>& feature,
                                                   const std::vector<std::array<T, 2>>& coords,
                                                   const Tensor<T>& grad_out) {
    const int c = feature.dim(0), h = feature.dim(1), w = feature.dim(2);
    const int p = static_cast<int>(coords.size());
    if (grad_out.rank() != 2 || grad_out.dim(0) != c || grad_out.dim(1) != p)
        throw ShapeError("bilinear_sample_backward: grad shape mismatch");

    BilinearBackwardResult<T> r{Tensor<T>(feature.shape),
                                std::vector<std::array<T, 2>>(static_cast<size_t>(p), {T(0), T(0)})};
    for (int i = 0; i < p; ++i) {
        const auto cell = bilinear_cell(coords[static_cast<size_t>(i)][0],
                                        coords[static_cast<size_t>(i)][1]);
        const T w00 = (T(1) - cell.wx) * (T(1) - cell.wy);
        const T w01 = cell.wx * (T(1) - cell.wy);
        const T w10 = (T(1) - cell.wx) * cell.wy;
        const T w11 = cell.wx * cell.wy;
        T gx = 0, gy = 0;
        for (int ch = 0; ch < c; ++ch) {
            const T* plane = feature.ptr() + static_cast<size_t>(ch) * h * w;
            T* gplane = r.grad_feature.ptr() + static_cast<size_t>(ch) * h * w;
            const T g = grad_out(ch, i);
            scatter_tap(gplane, h, w, cell.y0, cell.x0, g * w00);
            scatter_tap(gplane, h, w, cell.y0, cell.x0 + 1, g * w01);
            scatter_tap(gplane, h, w, cell.y0 + 1, cell.x0, g * w10);
            scatter_tap(gplane, h, w, cell.y0 + 1, cell.x0 + 1, g * w11);
            const T v00 = tap(plane, h, w, cell.y0, cell.x0);
            const T v01 = tap(plane, h, w, cell.y0, cell.x0 + 1);
            const T v10 = tap(plane, h, w, cell.y0 + 1, cell.x0);
            const T v11 = tap(plane, h, w, cell.y0 + 1, cell.x0 + 1);
            gx += g * ((T(1) - cell.wy) * (v01 - v00) + cell.wy * (v11 - v10));
            gy += g * ((T(1) - cell.wx) * (v10 - v00) + cell.wx * (v11 - v01));
        }
        r.grad_coords[static_cast<size_t>(i)] = {gx, gy};
    }
    return r;
}

}  // namespace roiformer
