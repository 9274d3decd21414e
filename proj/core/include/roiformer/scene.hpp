#pragma once

#include "roiformer/geometry.hpp"
#include "roiformer/semantic_mask.hpp"
#include "roiformer/tensor.hpp"

namespace roiformer {

enum class SceneLayout { Full, Plane };

struct SceneConfig {
    int width = 192;
    int height = 64;
    SceneLayout layout = SceneLayout::Full;
};

// Textured world plane with axis-aligned extent bounds. Textures are smooth
// world-space sine fields; components can fade with world z so that surfaces
// seen at grazing angles stay band-limited in image space (the warp
// consistency tolerance depends on it).
template <typename T>
struct ScenePlane {
    Vec3<T> p0, n;
    Vec3<T> lo{-1e9, -1e9, -1e9}, hi{1e9, 1e9, 1e9};
    int class_id = 0;
    std::array<T, 3> base{T(0.5), T(0.5), T(0.5)};
    struct Wave {
        Vec3<T> dir;
        T wavelength = 10;
        T phase = 0;
        std::array<T, 3> amp{};
        T atten_z = 0;  // 0 = no attenuation, else amp *= exp(-(z/atten_z)^2)
    };
    std::vector<Wave> waves;

    std::array<T, 3> color_at(const Vec3<T>& p) const {
        std::array<T, 3> c = base;
        for (const auto& wv : waves) {
            T a = std::sin(T(2) * static_cast<T>(M_PI) * p.dot(wv.dir) / wv.wavelength + wv.phase);
            if (wv.atten_z > 0) a *= std::exp(-(p.z / wv.atten_z) * (p.z / wv.atten_z));
            for (int ch = 0; ch < 3; ++ch) c[static_cast<size_t>(ch)] += wv.amp[static_cast<size_t>(ch)] * a;
        }
        return c;
    }
};

// Three camera stations (prev, curr, next), world-to-camera rotations.
template <typename T>
struct SceneWorld {
    std::vector<ScenePlane<T>> planes;
    CameraModel<T> cam;
    std::array<Mat3<T>, 3> frame_rot;
    std::array<Vec3<T>, 3> frame_center;
    int width = 0, height = 0;
};

template <typename T>
struct RenderedView {
    Tensor<T> image;        // [3,H,W]
    Tensor<T> depth;        // [1,H,W]
    Tensor<int32_t> seg;    // [1,H,W]
};

// Exact per-pixel ray-plane intersection; nearest positive hit wins.
template <typename T>
RenderedView<T> render_view(const SceneWorld<T>& world, int frame) {
    const int h = world.height, w = world.width;
    RenderedView<T> out{Tensor<T>({3, h, w}), Tensor<T>({1, h, w}), Tensor<int32_t>({1, h, w})};
    const Mat3<T> rt = world.frame_rot[static_cast<size_t>(frame)].transpose();
    const Vec3<T> origin = world.frame_center[static_cast<size_t>(frame)];
    constexpr T t_near = T(0.2);

    for (int v = 0; v < h; ++v) {
        for (int u = 0; u < w; ++u) {
            const Vec3<T> dir_cam{(static_cast<T>(u) - world.cam.cx) / world.cam.fx,
                                  (static_cast<T>(v) - world.cam.cy) / world.cam.fy, T(1)};
            const Vec3<T> dir = rt * dir_cam;
            T best_t = std::numeric_limits<T>::infinity();
            const ScenePlane<T>* best = nullptr;
            Vec3<T> best_hit{};
            for (const auto& pl : world.planes) {
                const T denom = dir.dot(pl.n);
                if (std::abs(denom) < T(1e-9)) continue;
                const T t = (pl.p0 - origin).dot(pl.n) / denom;
                if (t <= t_near || t >= best_t) continue;
                const Vec3<T> hit = origin + dir * t;
                if (hit.x < pl.lo.x || hit.x > pl.hi.x || hit.y < pl.lo.y || hit.y > pl.hi.y ||
                    hit.z < pl.lo.z || hit.z > pl.hi.z)
                    continue;
                best_t = t;
                best = &pl;
                best_hit = hit;
            }
            if (!best) throw ValueError("render_view: ray escaped the scene");
            // dir_cam.z == 1, so the ray parameter equals camera-space depth
            out.depth(0, v, u) = best_t;
            out.seg.data[(static_cast<size_t>(v)) * w + u] = best->class_id;
            const auto col = best->color_at(best_hit);
            for (int c = 0; c < 3; ++c) out.image(c, v, u) = col[static_cast<size_t>(c)];
        }
    }
    return out;
}

// Synthetic training triplet: images rendered at three camera stations plus
// ground truth for the middle frame.
template <typename T>
struct Scene {
    Tensor<T> img_prev, img_curr, img_next;
    DepthMap<T> gt_depth;
    SemanticMap gt_seg;
    Pose<T> pose_to_prev, pose_to_next;  // T_{t->t'}
    CameraModel<T> cam;
};

constexpr int kClassRoad = 0;
constexpr int kClassBuilding = 1;
constexpr int kClassVehicle = 2;

template <typename T>
SceneWorld<T> generate_world(uint64_t seed, const SceneConfig& cfg) {
    std::mt19937_64 rng(seed);
    auto uni = [&](double a, double b) {
        return static_cast<T>(std::uniform_real_distribution<double>(a, b)(rng));
    };

    SceneWorld<T> world;
    world.width = cfg.width;
    world.height = cfg.height;
    world.cam.fx = static_cast<T>(0.42) * static_cast<T>(cfg.width);
    world.cam.fy = world.cam.fx;
    world.cam.cx = static_cast<T>(cfg.width - 1) / 2;
    world.cam.cy = static_cast<T>(cfg.height - 1) / 2;

    auto unit_dir = [&](double zmix) {
        Vec3<T> d{uni(-1, 1), uni(-1, 1) * static_cast<T>(zmix), uni(-1, 1)};
        const T n = d.norm();
        return n > T(1e-6) ? d * (T(1) / n) : Vec3<T>{1, 0, 0};
    };
    auto add_waves = [&](ScenePlane<T>& pl, int count, double lam_lo, double lam_hi,
                         double amp_hi, double atten) {
        for (int i = 0; i < count; ++i) {
            typename ScenePlane<T>::Wave wv;
            wv.dir = unit_dir(0.5);
            wv.wavelength = uni(lam_lo, lam_hi);
            wv.phase = uni(0, 2 * M_PI);
            for (int c = 0; c < 3; ++c) wv.amp[static_cast<size_t>(c)] = uni(0.25 * amp_hi, amp_hi);
            wv.atten_z = static_cast<T>(atten);
            pl.waves.push_back(wv);
        }
    };

    if (cfg.layout == SceneLayout::Plane) {
        ScenePlane<T> wall;
        wall.p0 = {0, 0, uni(5, 8)};
        wall.n = {0, 0, 1};
        wall.class_id = kClassBuilding;
        wall.base = {uni(0.4, 0.6), uni(0.4, 0.6), uni(0.4, 0.6)};
        add_waves(wall, 3, 2.5, 6.0, 0.07, 0);
        world.planes.push_back(wall);
    } else {
        const T cam_h = uni(1.45, 1.7);
        const T z_far = uni(18, 24);

        ScenePlane<T> road;
        road.p0 = {0, cam_h, 0};
        road.n = {0, 1, 0};
        road.lo = {-60, cam_h - T(0.01), T(0.1)};
        road.hi = {60, cam_h + T(0.01), z_far + T(0.5)};
        road.class_id = kClassRoad;
        road.base = {uni(0.4, 0.5), uni(0.38, 0.48), uni(0.34, 0.44)};
        // near-field texture fades with z so grazing rows stay band-limited
        add_waves(road, 3, 5.0, 9.0, 0.08, 7.0);
        {
            typename ScenePlane<T>::Wave wv;  // faint large-scale lateral wave
            wv.dir = {1, 0, 0};
            wv.wavelength = uni(140, 180);
            wv.phase = uni(0, 2 * M_PI);
            for (int c = 0; c < 3; ++c) wv.amp[static_cast<size_t>(c)] = uni(0.04, 0.07);
            road.waves.push_back(wv);
        }
        world.planes.push_back(road);

        ScenePlane<T> back;
        back.p0 = {0, 0, z_far};
        back.n = {0, 0, 1};
        back.class_id = kClassBuilding;
        back.base = {uni(0.5, 0.6), uni(0.45, 0.55), uni(0.4, 0.5)};
        add_waves(back, 3, 7.0, 13.0, 0.075, 0);
        world.planes.push_back(back);

        // slanted side walls meeting the road at y = cam_h
        const T xl = uni(-7, -5.5), sl = uni(0.05, 0.14);
        ScenePlane<T> left;
        left.p0 = {xl, 0, 0};
        left.n = {1, 0, -sl};
        left.lo = {-80, -60, T(0.1)};
        left.hi = {20, cam_h, z_far + T(0.5)};
        left.class_id = kClassBuilding;
        left.base = {uni(0.48, 0.58), uni(0.5, 0.6), uni(0.44, 0.54)};
        add_waves(left, 3, 5.0, 9.0, 0.07, 11.0);
        world.planes.push_back(left);

        const T xr = uni(5.5, 7), sr = uni(0.04, 0.12);
        ScenePlane<T> right;
        right.p0 = {xr, 0, 0};
        right.n = {1, 0, sr};
        right.lo = {-20, -60, T(0.1)};
        right.hi = {80, cam_h, z_far + T(0.5)};
        right.class_id = kClassBuilding;
        right.base = {uni(0.46, 0.56), uni(0.48, 0.58), uni(0.42, 0.52)};
        add_waves(right, 3, 5.0, 9.0, 0.07, 11.0);
        world.planes.push_back(right);

        // two vehicles standing on the road (bottom edges depth-continuous)
        auto add_vehicle = [&](double x0_lo, double x0_hi, double z_lo, double z_hi) {
            ScenePlane<T> veh;
            const T zv = uni(z_lo, z_hi);
            const T x0 = uni(x0_lo, x0_hi);
            veh.p0 = {0, 0, zv};
            veh.n = {0, 0, 1};
            veh.lo = {x0, uni(-0.45, 0.0), zv - T(0.01)};
            veh.hi = {x0 + uni(1.6, 2.6), cam_h, zv + T(0.01)};
            veh.class_id = kClassVehicle;
            veh.base = {uni(0.3, 0.4), uni(0.42, 0.52), uni(0.55, 0.65)};
            add_waves(veh, 2, 2.0, 4.0, 0.07, 0);
            world.planes.push_back(veh);
        };
        add_vehicle(0.6, 1.6, 7.0, 10.5);
        add_vehicle(-4.6, -3.4, 12.5, 16.5);
    }

    // camera track: dominant lateral translation, slight forward drift and yaw
    const T step = uni(0.12, 0.18);
    const T fwd = uni(0.04, 0.09);
    world.frame_center[0] = {-step + uni(-0.01, 0.01), uni(-0.01, 0.01), -fwd};
    world.frame_center[1] = {0, 0, 0};
    world.frame_center[2] = {step + uni(-0.01, 0.01), uni(-0.01, 0.01), fwd};
    for (int f = 0; f < 3; ++f) {
        const Vec3<T> w{uni(-0.002, 0.002), uni(-0.004, 0.004), uni(-0.002, 0.002)};
        world.frame_rot[static_cast<size_t>(f)] = rotation_exp(f == 1 ? Vec3<T>{0, 0, 0} : w);
    }
    return world;
}

template <typename T>
Pose<T> relative_pose(const SceneWorld<T>& world, int from, int to) {
    const Mat3<T>& rf = world.frame_rot[static_cast<size_t>(from)];
    const Mat3<T>& rt = world.frame_rot[static_cast<size_t>(to)];
    const Mat3<T> rel = rt * rf.transpose();
    const Vec3<T> t = rt * (world.frame_center[static_cast<size_t>(from)] -
                            world.frame_center[static_cast<size_t>(to)]);
    return Pose<T>::from_matrix(rel, t);
}

template <typename T>
Scene<T> generate_scene(uint64_t seed, const SceneConfig& cfg) {
    SceneWorld<T> world = generate_world<T>(seed, cfg);
    RenderedView<T> prev = render_view(world, 0);
    RenderedView<T> curr = render_view(world, 1);
    RenderedView<T> next = render_view(world, 2);

    Scene<T> s;
    s.img_prev = std::move(prev.image);
    s.img_curr = std::move(curr.image);
    s.img_next = std::move(next.image);
    s.gt_depth = DepthMap<T>(std::move(curr.depth));
    s.gt_seg.class_ids = std::move(curr.seg);
    s.gt_seg.instance_classes = {kClassVehicle};
    s.gt_seg.reference_classes = {kClassRoad, kClassBuilding};
    s.pose_to_prev = relative_pose(world, 1, 0);
    s.pose_to_next = relative_pose(world, 1, 2);
    s.cam = world.cam;
    return s;
}

}  // namespace roiformer
