#pragma once

#include <algorithm>
#include <set>

#include "roiformer/geometry.hpp"
#include "roiformer/tensor.hpp"

namespace roiformer {

// Per-pixel class ids plus the instance/reference class partition used by the
// re-projection confidence mask.
struct SemanticMap {
    Tensor<int32_t> class_ids;  // [1,H,W]
    std::set<int> instance_classes;
    std::set<int> reference_classes;

    void validate() const {
        for (int cid : instance_classes)
            if (reference_classes.count(cid))
                throw ValueError("SemanticMap: instance and reference classes must be disjoint");
    }
};

struct MaskConfig {
    int k_neighbors = 5;
    double alpha_decay = 1.0;  // 1/length units

    void validate() const {
        if (k_neighbors < 1 || !(alpha_decay > 0))
            throw ValueError("MaskConfig: need k >= 1 and alpha_decay > 0");
    }
};

// Mean Euclidean distance from each instance point to its k nearest reference
// points. Exhaustive and exact; ties break on point index. k is clamped to
// the reference set size.
template <typename T>
std::vector<T> knn_avg_distance(const PointCloud<T>& instance_pts,
                                const PointCloud<T>& reference_pts, int k) {
    if (reference_pts.points.empty())
        throw ValueError("knn_avg_distance: empty reference set");
    const int kk = std::min<int>(k, static_cast<int>(reference_pts.points.size()));
    std::vector<T> out;
    out.reserve(instance_pts.points.size());
    std::vector<std::pair<T, int>> d2(reference_pts.points.size());
    for (const auto& q : instance_pts.points) {
        for (size_t j = 0; j < reference_pts.points.size(); ++j) {
            const Vec3<T> d = reference_pts.points[j] - q;
            d2[j] = {d.dot(d), static_cast<int>(j)};
        }
        std::partial_sort(d2.begin(), d2.begin() + kk, d2.end());
        T acc = 0;
        for (int j = 0; j < kk; ++j) acc += std::sqrt(d2[static_cast<size_t>(j)].first);
        out.push_back(acc / static_cast<T>(kk));
    }
    return out;
}

template <typename T>
struct ConfidenceMaskResult {
    Tensor<T> mask;  // [1,H,W], values in (0,1]
    bool degraded = false;  // no reference pixels were present
};

// Eq.-8-style confidence mask: backproject every pixel, mu = exp(-alpha * d)
// on instance pixels (d = mean distance to the k nearest reference points in
// 3D), mu = 1 elsewhere. The result is a constant weight; no gradient flows
// through it.
template <typename T>
ConfidenceMaskResult<T> confidence_mask(const DepthMap<T>& depth, const SemanticMap& sem,
                                        const CameraModel<T>& cam, const MaskConfig& cfg) {
    sem.validate();
    cfg.validate();
    const int h = depth.height(), w = depth.width();
    if (sem.class_ids.dim(1) != h || sem.class_ids.dim(2) != w)
        throw ShapeError("confidence_mask: semantic map size mismatch");

    ConfidenceMaskResult<T> res{Tensor<T>::full({1, h, w}, T(1)), false};

    PointCloud<T> all = backproject(depth, cam);
    PointCloud<T> inst, ref;
    std::vector<int64_t> inst_pixels;
    for (int64_t i = 0; i < static_cast<int64_t>(h) * w; ++i) {
        const int cid = sem.class_ids.data[static_cast<size_t>(i)];
        if (sem.instance_classes.count(cid)) {
            inst.points.push_back(all.points[static_cast<size_t>(i)]);
            inst_pixels.push_back(i);
        } else if (sem.reference_classes.count(cid)) {
            ref.points.push_back(all.points[static_cast<size_t>(i)]);
        }
    }
    if (inst.points.empty()) return res;
    if (ref.points.empty()) {
        // No reference geometry to measure against: degrade to all-ones.
        res.degraded = true;
        return res;
    }

    const std::vector<T> dist = knn_avg_distance(inst, ref, cfg.k_neighbors);
    for (size_t i = 0; i < inst_pixels.size(); ++i)
        res.mask.data[static_cast<size_t>(inst_pixels[i])] =
            std::exp(-static_cast<T>(cfg.alpha_decay) * dist[i]);
    return res;
}

}  // namespace roiformer
