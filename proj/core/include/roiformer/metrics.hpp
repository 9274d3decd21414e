#pragma once

#include <algorithm>

#include "roiformer/geometry.hpp"

namespace roiformer {

struct EvalResult {
    double abs_rel = 0, sq_rel = 0, rmse = 0, rmse_log = 0;
    double delta1 = 0, delta2 = 0, delta3 = 0;

    bool all_finite() const {
        for (double v : {abs_rel, sq_rel, rmse, rmse_log, delta1, delta2, delta3})
            if (!std::isfinite(v)) return false;
        return true;
    }
};

struct EvalOptions {
    bool median_scale = true;  // ground-truth scale technique
    double clamp_min = 1e-3;
    double clamp_max = 80.0;
};

// Standard monocular depth metrics over valid ground-truth pixels
// (0 < gt <= clamp_max), with optional median-ratio rescaling of the
// prediction and clamping to [clamp_min, clamp_max].
template <typename T>
EvalResult evaluate(const DepthMap<T>& pred, const DepthMap<T>& gt,
                    const EvalOptions& opts = {}) {
    check_same_shape(pred.values, gt.values, "evaluate");
    std::vector<double> gv, pv;
    for (int64_t i = 0; i < gt.values.numel(); ++i) {
        const double g = static_cast<double>(gt.values.data[i]);
        if (g > 0 && g <= opts.clamp_max) {
            gv.push_back(g);
            pv.push_back(static_cast<double>(pred.values.data[i]));
        }
    }
    if (gv.empty()) throw ValueError("evaluate: no valid ground-truth pixels");

    if (opts.median_scale) {
        std::vector<double> ratios(gv.size());
        for (size_t i = 0; i < gv.size(); ++i) ratios[i] = gv[i] / pv[i];
        std::vector<double> sorted = ratios;
        std::sort(sorted.begin(), sorted.end());
        const size_t n = sorted.size();
        const double med = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
        for (auto& p : pv) p *= med;
    }
    for (auto& p : pv) p = std::clamp(p, opts.clamp_min, opts.clamp_max);

    EvalResult r;
    const double n = static_cast<double>(gv.size());
    double se = 0, sle = 0;
    int64_t d1 = 0, d2 = 0, d3 = 0;
    for (size_t i = 0; i < gv.size(); ++i) {
        const double g = gv[i], p = pv[i];
        r.abs_rel += std::abs(g - p) / g;
        r.sq_rel += (g - p) * (g - p) / g;
        se += (g - p) * (g - p);
        const double dl = std::log(g) - std::log(p);
        sle += dl * dl;
        const double ratio = std::max(g / p, p / g);
        if (ratio < 1.25) ++d1;
        if (ratio < 1.25 * 1.25) ++d2;
        if (ratio < 1.25 * 1.25 * 1.25) ++d3;
    }
    r.abs_rel /= n;
    r.sq_rel /= n;
    r.rmse = std::sqrt(se / n);
    r.rmse_log = std::sqrt(sle / n);
    r.delta1 = static_cast<double>(d1) / n;
    r.delta2 = static_cast<double>(d2) / n;
    r.delta3 = static_cast<double>(d3) / n;
    return r;
}

inline std::string eval_csv_header() {
    return "abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3";
}

inline std::string eval_csv_row(const EvalResult& r) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g", r.abs_rel, r.sq_rel,
                  r.rmse, r.rmse_log, r.delta1, r.delta2, r.delta3);
    return buf;
}

}  // namespace roiformer
