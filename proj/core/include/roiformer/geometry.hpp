#pragma once

#include <array>
#include <optional>

#include "roiformer/bilinear.hpp"
#include "roiformer/tensor.hpp"

namespace roiformer {

template <typename T>
struct Vec3 {
    T x = 0, y = 0, z = 0;
    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(T s) const { return {x * s, y * s, z * s}; }
    T dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    T norm() const { return std::sqrt(x * x + y * y + z * z); }
};

template <typename T>
struct Mat3 {
    // row-major
    std::array<T, 9> m{};

    static Mat3 identity() {
        Mat3 r;
        r.m = {1, 0, 0, 0, 1, 0, 0, 0, 1};
        return r;
    }
    static Mat3 skew(const Vec3<T>& v) {
        Mat3 r;
        r.m = {0, -v.z, v.y, v.z, 0, -v.x, -v.y, v.x, 0};
        return r;
    }
    T operator()(int i, int j) const { return m[static_cast<size_t>(i) * 3 + j]; }
    T& operator()(int i, int j) { return m[static_cast<size_t>(i) * 3 + j]; }

    Vec3<T> operator*(const Vec3<T>& v) const {
        return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
                m[6] * v.x + m[7] * v.y + m[8] * v.z};
    }
    Mat3 operator*(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                T s = 0;
                for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
                r(i, j) = s;
            }
        return r;
    }
    Mat3 operator+(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 9; ++i) r.m[static_cast<size_t>(i)] = m[static_cast<size_t>(i)] + o.m[static_cast<size_t>(i)];
        return r;
    }
    Mat3 scaled(T s) const {
        Mat3 r;
        for (int i = 0; i < 9; ++i) r.m[static_cast<size_t>(i)] = m[static_cast<size_t>(i)] * s;
        return r;
    }
    Mat3 transpose() const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
        return r;
    }
    T trace() const { return m[0] + m[4] + m[8]; }
};

// Pinhole intrinsics; the four nonzero entries of K.
template <typename T>
struct CameraModel {
    T fx = 1, fy = 1, cx = 0, cy = 0;
};

// Axis-angle exponential map (Rodrigues), with Taylor guards near theta = 0.
template <typename T>
Mat3<T> rotation_exp(const Vec3<T>& w) {
    const T th2 = w.dot(w);
    const T th = std::sqrt(th2);
    T a, b;  // sin(th)/th, (1-cos(th))/th^2
    if (th < T(1e-6)) {
        a = T(1) - th2 / T(6);
        b = T(0.5) - th2 / T(24);
    } else {
        a = std::sin(th) / th;
        b = (T(1) - std::cos(th)) / th2;
    }
    const Mat3<T> k = Mat3<T>::skew(w);
    return Mat3<T>::identity() + k.scaled(a) + (k * k).scaled(b);
}

// Log map, valid for rotation angle < pi.
template <typename T>
Vec3<T> rotation_log(const Mat3<T>& r) {
    const T c = std::clamp((r.trace() - T(1)) / T(2), T(-1), T(1));
    const T th = std::acos(c);
    Vec3<T> v{r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1)};
    T s;
    if (th < T(1e-6)) {
        s = T(0.5) + th * th / T(12);
    } else {
        s = th / (T(2) * std::sin(th));
    }
    return v * s;
}

// Right Jacobian of the exponential map: d(exp(w) x)/dw = -exp(w)*[x]_x*Jr(w).
template <typename T>
Mat3<T> rotation_right_jacobian(const Vec3<T>& w) {
    const T th2 = w.dot(w);
    const T th = std::sqrt(th2);
    T c1, c2;  // (1-cos)/th^2, (th-sin)/th^3
    if (th < T(1e-4)) {
        c1 = T(0.5) - th2 / T(24);
        c2 = T(1) / T(6) - th2 / T(120);
    } else {
        c1 = (T(1) - std::cos(th)) / th2;
        c2 = (th - std::sin(th)) / (th2 * th);
    }
    const Mat3<T> k = Mat3<T>::skew(w);
    return Mat3<T>::identity() + k.scaled(-c1) + (k * k).scaled(c2);
}

// 6-DOF rigid transform, rotation as an axis-angle 3-vector.
template <typename T>
struct Pose {
    Vec3<T> rotation;
    Vec3<T> translation;

    Mat3<T> rotation_matrix() const { return rotation_exp(rotation); }

    Vec3<T> apply(const Vec3<T>& p) const { return rotation_matrix() * p + translation; }

    Pose inverse() const {
        const Mat3<T> rt = rotation_matrix().transpose();
        return {rotation * T(-1), (rt * translation) * T(-1)};
    }
    Pose compose(const Pose& other) const {
        // this after other: x -> this(other(x))
        const Mat3<T> ra = rotation_matrix();
        return {rotation_log(ra * other.rotation_matrix()), ra * other.translation + translation};
    }
    static Pose from_matrix(const Mat3<T>& r, const Vec3<T>& t) { return {rotation_log(r), t}; }

    std::array<T, 6> as_array() const {
        return {rotation.x, rotation.y, rotation.z, translation.x, translation.y, translation.z};
    }
    static Pose from_array(const std::array<T, 6>& a) {
        return {{a[0], a[1], a[2]}, {a[3], a[4], a[5]}};
    }
};

// Strictly positive per-pixel depth, [1,H,W].
template <typename T>
struct DepthMap {
    Tensor<T> values;

    DepthMap() = default;
    explicit DepthMap(Tensor<T> v) : values(std::move(v)) {
        if (values.rank() != 3 || values.dim(0) != 1)
            throw ShapeError("DepthMap: need [1,H,W]");
    }
    int height() const { return values.dim(1); }
    int width() const { return values.dim(2); }
};

template <typename T>
struct PointCloud {
    std::vector<Vec3<T>> points;
    std::vector<std::array<T, 3>> colors;  // optional, parallel to points
    std::vector<int> class_ids;            // optional, parallel to points
};

constexpr double kProjectZEps = 1e-3;

// Back-projection: pixel (u,v) with depth D -> ((u-cx)/fx*D, (v-cy)/fy*D, D),
// row-major pixel order.
template <typename T>
PointCloud<T> backproject(const DepthMap<T>& depth, const CameraModel<T>& cam) {
    const int h = depth.height(), w = depth.width();
    PointCloud<T> pc;
    pc.points.reserve(static_cast<size_t>(h) * w);
    for (int v = 0; v < h; ++v)
        for (int u = 0; u < w; ++u) {
            const T d = depth.values(0, v, u);
            if (!(d > T(0))) throw ValueError("backproject: nonpositive depth");
            pc.points.push_back({(static_cast<T>(u) - cam.cx) / cam.fx * d,
                                 (static_cast<T>(v) - cam.cy) / cam.fy * d, d});
        }
    return pc;
}

template <typename T>
PointCloud<T> transform_points(const Pose<T>& pose, const PointCloud<T>& pts) {
    PointCloud<T> out = pts;
    const Mat3<T> r = pose.rotation_matrix();
    for (auto& p : out.points) p = r * p + pose.translation;
    return out;
}

template <typename T>
struct Projection {
    std::vector<std::array<T, 2>> xy;
    std::vector<uint8_t> valid;  // 0 where Z <= z_eps
};

template <typename T>
Projection<T> project(const PointCloud<T>& pts, const CameraModel<T>& cam,
                      T z_eps = static_cast<T>(kProjectZEps)) {
    Projection<T> pr;
    pr.xy.reserve(pts.points.size());
    pr.valid.reserve(pts.points.size());
    for (const auto& p : pts.points) {
        if (p.z <= z_eps) {
            pr.xy.push_back({T(0), T(0)});
            pr.valid.push_back(0);
        } else {
            pr.xy.push_back({cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy});
            pr.valid.push_back(1);
        }
    }
    return pr;
}

// ---------------------------------------------------------------------------
// Differentiable inverse warping: reconstruct the target frame by sampling the
// source frame at reprojected coordinates. valid is 1 where the reprojection
// lands with all interpolation taps inside the source frame and Z > z_eps.
// ---------------------------------------------------------------------------

template <typename T>
struct WarpResult {
    Tensor<T> warped;  // [C,H,W]
    Tensor<T> valid;   // [1,H,W], binary
};

template <typename T>
struct WarpCache {
    std::vector<std::array<T, 2>> coords;   // reprojected source coords per pixel
    std::vector<Vec3<T>> rays;              // K^-1 (u,v,1)
    std::vector<Vec3<T>> cam_points;        // X' = R*D*ray + t
    std::vector<uint8_t> in_front;          // Z > z_eps
    Mat3<T> rot;
    Pose<T> pose;
    CameraModel<T> cam;
    int c = 0, h = 0, w = 0;
};

template <typename T>
WarpResult<T> inverse_warp(const Tensor<T>& source, const DepthMap<T>& depth,
                           const Pose<T>& pose, const CameraModel<T>& cam,
                           WarpCache<T>* cache = nullptr,
                           T z_eps = static_cast<T>(kProjectZEps)) {
    if (source.rank() != 3) throw ShapeError("inverse_warp: source must be [C,H,W]");
    const int c = source.dim(0), h = source.dim(1), w = source.dim(2);
    if (depth.height() != h || depth.width() != w)
        throw ShapeError("inverse_warp: depth/source size mismatch");

    const Mat3<T> rot = pose.rotation_matrix();
    std::vector<std::array<T, 2>> coords(static_cast<size_t>(h) * w);
    std::vector<Vec3<T>> rays(coords.size()), cam_points(coords.size());
    std::vector<uint8_t> in_front(coords.size());

    Tensor<T> valid({1, h, w});
    size_t i = 0;
    for (int v = 0; v < h; ++v) {
        for (int u = 0; u < w; ++u, ++i) {
            const Vec3<T> ray{(static_cast<T>(u) - cam.cx) / cam.fx,
                              (static_cast<T>(v) - cam.cy) / cam.fy, T(1)};
            const T d = depth.values(0, v, u);
            const Vec3<T> xp = rot * (ray * d) + pose.translation;
            rays[i] = ray;
            cam_points[i] = xp;
            if (xp.z > z_eps) {
                const T px = cam.fx * xp.x / xp.z + cam.cx;
                const T py = cam.fy * xp.y / xp.z + cam.cy;
                coords[i] = {px, py};
                in_front[i] = 1;
                const bool inside = px >= T(0) && px < static_cast<T>(w - 1) && py >= T(0) &&
                                    py < static_cast<T>(h - 1);
                valid.data[i] = inside ? T(1) : T(0);
            } else {
                coords[i] = {T(0), T(0)};
                in_front[i] = 0;
                valid.data[i] = T(0);
            }
        }
    }

    Tensor<T> sampled = bilinear_sample(source, coords);  // [C, H*W]
    Tensor<T> warped({c, h, w});
    for (int ch = 0; ch < c; ++ch)
        for (int64_t px = 0; px < static_cast<int64_t>(h) * w; ++px) {
            const T val = in_front[static_cast<size_t>(px)] ? sampled(ch, static_cast<int>(px)) : T(0);
            warped.data[static_cast<size_t>(ch) * h * w + px] = val;
        }

    if (cache) {
        cache->coords = std::move(coords);
        cache->rays = std::move(rays);
        cache->cam_points = std::move(cam_points);
        cache->in_front = std::move(in_front);
        cache->rot = rot;
        cache->pose = pose;
        cache->cam = cam;
        cache->c = c;
        cache->h = h;
        cache->w = w;
    }
    return {std::move(warped), std::move(valid)};
}

template <typename T>
struct WarpGrads {
    Tensor<T> grad_depth;        // [1,H,W]
    std::array<T, 6> grad_pose;  // (wx,wy,wz,tx,ty,tz)
    Tensor<T> grad_source;       // [C,H,W], filled only if requested
};

template <typename T>
WarpGrads<T> inverse_warp_backward(const Tensor<T>& source, const DepthMap<T>& depth,
                                   const WarpCache<T>& k, const Tensor<T>& grad_warped,
                                   bool want_grad_source = false) {
    const int c = k.c, h = k.h, w = k.w;
    if (grad_warped.rank() != 3 || grad_warped.dim(0) != c || grad_warped.dim(1) != h ||
        grad_warped.dim(2) != w)
        throw ShapeError("inverse_warp_backward: grad shape mismatch");

    // Gradient through the sampler: masked pixels received 0 and get no grad.
    Tensor<T> gsample({c, h * w});
    for (int ch = 0; ch < c; ++ch)
        for (int64_t px = 0; px < static_cast<int64_t>(h) * w; ++px)
            gsample(ch, static_cast<int>(px)) =
                k.in_front[static_cast<size_t>(px)]
                    ? grad_warped.data[static_cast<size_t>(ch) * h * w + px]
                    : T(0);

    auto bb = bilinear_sample_backward(source, k.coords, gsample);

    WarpGrads<T> out{Tensor<T>({1, h, w}), {T(0), T(0), T(0), T(0), T(0), T(0)}, Tensor<T>()};
    if (want_grad_source) out.grad_source = std::move(bb.grad_feature);

    const Mat3<T> jr = rotation_right_jacobian(k.pose.rotation);
    Vec3<T> g_rot{0, 0, 0}, g_t{0, 0, 0};

    size_t i = 0;
    for (int v = 0; v < h; ++v) {
        for (int u = 0; u < w; ++u, ++i) {
            if (!k.in_front[i]) continue;
            const Vec3<T>& xp = k.cam_points[i];
            const T gx = bb.grad_coords[i][0], gy = bb.grad_coords[i][1];
            // d(px,py)/dX' projection Jacobian rows.
            const T iz = T(1) / xp.z;
            const Vec3<T> gX{k.cam.fx * iz * gx, k.cam.fy * iz * gy,
                             -(k.cam.fx * xp.x * gx + k.cam.fy * xp.y * gy) * iz * iz};
            // X' = R * (d * ray) + t
            const Vec3<T> rray = k.rot * k.rays[i];
            out.grad_depth.data[i] = gX.dot(rray);
            g_t = g_t + gX;
            // d(R p)/dw = -R [p]_x Jr(w), with p = d * ray
            const T d = depth.values(0, v, u);
            const Vec3<T> p = k.rays[i] * d;
            const Vec3<T> rtg = k.rot.transpose() * gX;  // R^T gX
            const Vec3<T> cross_g = p.cross(rtg);        // [p]_x^T R^T g = p x (R^T g)
            g_rot = g_rot + jr.transpose() * cross_g;
        }
    }
    out.grad_pose = {g_rot.x, g_rot.y, g_rot.z, g_t.x, g_t.y, g_t.z};
    return out;
}

}  // namespace roiformer
