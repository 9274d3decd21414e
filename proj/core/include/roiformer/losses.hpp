#pragma once

#include "roiformer/ops.hpp"
#include "roiformer/tensor.hpp"

namespace roiformer {

struct LossWeights {
    double alpha_photo = 0.85;
    double beta_smooth = 1e-3;
    double gamma_seg = 0.5;

    void validate() const {
        if (!(alpha_photo >= 0 && alpha_photo <= 1) || !(beta_smooth >= 0) || !(gamma_seg >= 0))
            throw ValueError("LossWeights: weights must be finite, non-negative, alpha <= 1");
    }
};

// ---------------------------------------------------------------------------
// 3x3 box mean with count normalization: windows are intersected with the
// frame and divided by the actual tap count, so constants are preserved
// exactly at the borders.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> box3_sum(const Tensor<T>& x) {
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor<T> out(x.shape);
    for (int ch = 0; ch < c; ++ch) {
        const T* xp = x.ptr() + static_cast<size_t>(ch) * h * w;
        T* op = out.ptr() + static_cast<size_t>(ch) * h * w;
        for (int y = 0; y < h; ++y) {
            const int y0 = std::max(0, y - 1), y1 = std::min(h - 1, y + 1);
            for (int xx = 0; xx < w; ++xx) {
                const int x0 = std::max(0, xx - 1), x1 = std::min(w - 1, xx + 1);
                T s = 0;
                for (int yy = y0; yy <= y1; ++yy)
                    for (int xv = x0; xv <= x1; ++xv) s += xp[static_cast<size_t>(yy) * w + xv];
                op[static_cast<size_t>(y) * w + xx] = s;
            }
        }
    }
    return out;
}

template <typename T>
inline T box3_count(int y, int x, int h, int w) {
    const int ny = std::min(h - 1, y + 1) - std::max(0, y - 1) + 1;
    const int nx = std::min(w - 1, x + 1) - std::max(0, x - 1) + 1;
    return static_cast<T>(ny * nx);
}

template <typename T>
Tensor<T> box3_mean(const Tensor<T>& x) {
    Tensor<T> out = box3_sum(x);
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                out(ch, y, xx) /= box3_count<T>(y, xx, h, w);
    return out;
}

// Adjoint of box3_mean: scatter g/count over each window. Window membership
// is symmetric, so this is box3_sum applied to the count-normalized grad.
template <typename T>
Tensor<T> box3_mean_adjoint(const Tensor<T>& g) {
    Tensor<T> t(g.shape);
    const int c = g.dim(0), h = g.dim(1), w = g.dim(2);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                t(ch, y, xx) = g(ch, y, xx) / box3_count<T>(y, xx, h, w);
    return box3_sum(t);
}

// ---------------------------------------------------------------------------
// Per-pixel SSIM over a 3x3 mean-filter window, C1 = 0.01^2, C2 = 0.03^2.
// ---------------------------------------------------------------------------

template <typename T>
struct SsimCache {
    Tensor<T> ma, mb, maa, mbb, mab;  // the five box means
    Tensor<T> ssim;
};

inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

template <typename T>
Tensor<T> ssim(const Tensor<T>& a, const Tensor<T>& b, SsimCache<T>* cache = nullptr) {
    check_same_shape(a, b, "ssim");
    if (a.rank() != 3) throw ShapeError("ssim: need [C,H,W]");
    const T c1 = static_cast<T>(kSsimC1), c2 = static_cast<T>(kSsimC2);

    Tensor<T> ma = box3_mean(a), mb = box3_mean(b);
    Tensor<T> maa = box3_mean(mul(a, a)), mbb = box3_mean(mul(b, b)), mab = box3_mean(mul(a, b));

    Tensor<T> out(a.shape);
    for (int64_t i = 0; i < a.numel(); ++i) {
        const T va = maa.data[i] - ma.data[i] * ma.data[i];
        const T vb = mbb.data[i] - mb.data[i] * mb.data[i];
        const T cov = mab.data[i] - ma.data[i] * mb.data[i];
        const T n1 = 2 * ma.data[i] * mb.data[i] + c1;
        const T n2 = 2 * cov + c2;
        const T d1 = ma.data[i] * ma.data[i] + mb.data[i] * mb.data[i] + c1;
        const T d2 = va + vb + c2;
        out.data[i] = (n1 * n2) / (d1 * d2);
    }
    if (cache) {
        cache->ma = std::move(ma);
        cache->mb = std::move(mb);
        cache->maa = std::move(maa);
        cache->mbb = std::move(mbb);
        cache->mab = std::move(mab);
        cache->ssim = out;
    }
    return out;
}

template <typename T>
void ssim_backward(const Tensor<T>& a, const Tensor<T>& b, const SsimCache<T>& k,
                   const Tensor<T>& grad_out, Tensor<T>& ga, Tensor<T>& gb) {
    const T c1 = static_cast<T>(kSsimC1), c2 = static_cast<T>(kSsimC2);
    Tensor<T> g_ma(a.shape), g_mb(a.shape), g_maa(a.shape), g_mbb(a.shape), g_mab(a.shape);
    for (int64_t i = 0; i < a.numel(); ++i) {
        const T ma = k.ma.data[i], mb = k.mb.data[i];
        const T va = k.maa.data[i] - ma * ma;
        const T vb = k.mbb.data[i] - mb * mb;
        const T cov = k.mab.data[i] - ma * mb;
        const T n1 = 2 * ma * mb + c1, n2 = 2 * cov + c2;
        const T d1 = ma * ma + mb * mb + c1, d2 = va + vb + c2;
        const T s = (n1 * n2) / (d1 * d2);
        const T g = grad_out.data[i];
        const T gn1 = g * n2 / (d1 * d2);
        const T gn2 = g * n1 / (d1 * d2);
        const T gd1 = -g * s / d1;
        const T gd2 = -g * s / d2;
        // n1 = 2 ma mb + c1, n2 = 2(mab - ma mb) + c2
        // d1 = ma^2 + mb^2 + c1, d2 = (maa - ma^2) + (mbb - mb^2) + c2
        g_ma.data[i] = gn1 * 2 * mb + gn2 * (-2 * mb) + gd1 * 2 * ma + gd2 * (-2 * ma);
        g_mb.data[i] = gn1 * 2 * ma + gn2 * (-2 * ma) + gd1 * 2 * mb + gd2 * (-2 * mb);
        g_maa.data[i] = gd2;
        g_mbb.data[i] = gd2;
        g_mab.data[i] = gn2 * 2;
    }
    const Tensor<T> ba = box3_mean_adjoint(g_ma);
    const Tensor<T> bb2 = box3_mean_adjoint(g_mb);
    const Tensor<T> baa = box3_mean_adjoint(g_maa);
    const Tensor<T> bbb = box3_mean_adjoint(g_mbb);
    const Tensor<T> bab = box3_mean_adjoint(g_mab);
    for (int64_t i = 0; i < a.numel(); ++i) {
        ga.data[i] += ba.data[i] + 2 * a.data[i] * baa.data[i] + b.data[i] * bab.data[i];
        gb.data[i] += bb2.data[i] + 2 * b.data[i] * bbb.data[i] + a.data[i] * bab.data[i];
    }
}

// ---------------------------------------------------------------------------
// Photometric loss: alpha*(1-SSIM)/2 + (1-alpha)*L1, both reduced over
// channels before the blend. Returns a [1,H,W] per-pixel map.
// ---------------------------------------------------------------------------

template <typename T>
struct PhotometricCache {
    SsimCache<T> ssim;
    Tensor<T> diff;  // target - warped
};

template <typename T>
Tensor<T> photometric_loss(const Tensor<T>& target, const Tensor<T>& warped,
                           const LossWeights& w, PhotometricCache<T>* cache = nullptr) {
    check_same_shape(target, warped, "photometric_loss");
    const int c = target.dim(0), h = target.dim(1), wd = target.dim(2);
    const T alpha = static_cast<T>(w.alpha_photo);

    SsimCache<T> sc;
    Tensor<T> smap = ssim(target, warped, &sc);
    Tensor<T> out({1, h, wd});
    const T invc = T(1) / static_cast<T>(c);
    for (int64_t p = 0; p < static_cast<int64_t>(h) * wd; ++p) {
        T s = 0, l1 = 0;
        for (int ch = 0; ch < c; ++ch) {
            const int64_t i = static_cast<int64_t>(ch) * h * wd + p;
            s += smap.data[i];
            l1 += std::abs(target.data[i] - warped.data[i]);
        }
        s *= invc;
        l1 *= invc;
        out.data[p] = alpha * (T(1) - s) / T(2) + (T(1) - alpha) * l1;
    }
    if (cache) {
        cache->ssim = std::move(sc);
        cache->diff = sub(target, warped);
    }
    return out;
}

// grad_out is [1,H,W]; accumulates into gtarget/gwarped ([C,H,W]).
template <typename T>
void photometric_loss_backward(const Tensor<T>& target, const Tensor<T>& warped,
                               const LossWeights& w, const PhotometricCache<T>& k,
                               const Tensor<T>& grad_out, Tensor<T>& gtarget,
                               Tensor<T>& gwarped) {
    const int c = target.dim(0), h = target.dim(1), wd = target.dim(2);
    const T alpha = static_cast<T>(w.alpha_photo);
    const T invc = T(1) / static_cast<T>(c);

    Tensor<T> g_ssim(target.shape);
    for (int ch = 0; ch < c; ++ch)
        for (int64_t p = 0; p < static_cast<int64_t>(h) * wd; ++p) {
            const int64_t i = static_cast<int64_t>(ch) * h * wd + p;
            const T g = grad_out.data[p];
            g_ssim.data[i] = g * (-alpha / T(2)) * invc;
            const T d = k.diff.data[i];
            const T sg = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
            gtarget.data[i] += g * (T(1) - alpha) * invc * sg;
            gwarped.data[i] -= g * (T(1) - alpha) * invc * sg;
        }
    ssim_backward(target, warped, k.ssim, g_ssim, gtarget, gwarped);
}

// ---------------------------------------------------------------------------
// Per-pixel minimum across reprojection candidates. Gradient goes to the
// argmin only; ties resolve to the first candidate.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> min_reprojection(const std::vector<Tensor<T>>& candidates,
                           std::vector<int>* argmin = nullptr) {
    if (candidates.empty()) throw ShapeError("min_reprojection: empty candidate list");
    for (const auto& c : candidates) check_same_shape(candidates[0], c, "min_reprojection");
    Tensor<T> out = candidates[0];
    std::vector<int> arg(static_cast<size_t>(out.numel()), 0);
    for (size_t ci = 1; ci < candidates.size(); ++ci)
        for (int64_t i = 0; i < out.numel(); ++i)
            if (candidates[ci].data[i] < out.data[i]) {
                out.data[i] = candidates[ci].data[i];
                arg[static_cast<size_t>(i)] = static_cast<int>(ci);
            }
    if (argmin) *argmin = std::move(arg);
    return out;
}

template <typename T>
std::vector<Tensor<T>> min_reprojection_backward(const std::vector<int>& argmin,
                                                 size_t n_candidates,
                                                 const std::vector<int>& shape_like,
                                                 const Tensor<T>& grad_out) {
    (void)shape_like;
    std::vector<Tensor<T>> grads(n_candidates, Tensor<T>(grad_out.shape));
    for (int64_t i = 0; i < grad_out.numel(); ++i)
        grads[static_cast<size_t>(argmin[static_cast<size_t>(i)])].data[i] = grad_out.data[i];
    return grads;
}

// ---------------------------------------------------------------------------
// Edge-aware smoothness: mean |dD| * exp(-|dI|) with forward differences,
// x- and y-terms averaged over their own difference domains. The image
// gradient magnitude is the channel mean of absolute differences.
// mean_normalize divides depth by its mean first (off by default).
// ---------------------------------------------------------------------------

template <typename T>
T smoothness_loss(const Tensor<T>& depth, const Tensor<T>& image, bool mean_normalize = false,
                  Tensor<T>* grad_depth = nullptr) {
    if (depth.rank() != 3 || depth.dim(0) != 1) throw ShapeError("smoothness_loss: depth [1,H,W]");
    if (image.dim(1) != depth.dim(1) || image.dim(2) != depth.dim(2))
        throw ShapeError("smoothness_loss: image/depth size mismatch");
    const int h = depth.dim(1), w = depth.dim(2), c = image.dim(0);

    Tensor<T> d = depth;
    T mu = T(1);
    if (mean_normalize) {
        mu = mean(depth);
        for (auto& v : d.data) v /= mu;
    }

    const T invc = T(1) / static_cast<T>(c);
    const int64_t nx = static_cast<int64_t>(h) * (w - 1);
    const int64_t ny = static_cast<int64_t>(h - 1) * w;

    Tensor<T> gd_n(depth.shape);  // grad wrt normalized depth
    T loss = 0;
    if (nx > 0) {
        T accx = 0;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x + 1 < w; ++x) {
                T gi = 0;
                for (int ch = 0; ch < c; ++ch)
                    gi += std::abs(image(ch, y, x + 1) - image(ch, y, x));
                const T att = std::exp(-gi * invc);
                const T dd = d(0, y, x + 1) - d(0, y, x);
                accx += std::abs(dd) * att;
                if (grad_depth) {
                    const T sg = dd > T(0) ? T(1) : (dd < T(0) ? T(-1) : T(0));
                    const T gterm = sg * att / static_cast<T>(nx);
                    gd_n(0, y, x + 1) += gterm;
                    gd_n(0, y, x) -= gterm;
                }
            }
        loss += accx / static_cast<T>(nx);
    }
    if (ny > 0) {
        T accy = 0;
        for (int y = 0; y + 1 < h; ++y)
            for (int x = 0; x < w; ++x) {
                T gi = 0;
                for (int ch = 0; ch < c; ++ch)
                    gi += std::abs(image(ch, y + 1, x) - image(ch, y, x));
                const T att = std::exp(-gi * invc);
                const T dd = d(0, y + 1, x) - d(0, y, x);
                accy += std::abs(dd) * att;
                if (grad_depth) {
                    const T sg = dd > T(0) ? T(1) : (dd < T(0) ? T(-1) : T(0));
                    const T gterm = sg * att / static_cast<T>(ny);
                    gd_n(0, y + 1, x) += gterm;
                    gd_n(0, y, x) -= gterm;
                }
            }
        loss += accy / static_cast<T>(ny);
    }

    if (grad_depth) {
        if (mean_normalize) {
            // d_n = D / mean(D): dL/dD_j = g_j/mu - sum_i(g_i D_i) / (mu^2 N)
            T dot = 0;
            for (int64_t i = 0; i < depth.numel(); ++i) dot += gd_n.data[i] * depth.data[i];
            const T corr = dot / (mu * mu * static_cast<T>(depth.numel()));
            for (int64_t i = 0; i < depth.numel(); ++i)
                grad_depth->data[i] += gd_n.data[i] / mu - corr;
        } else {
            axpy(*grad_depth, gd_n);
        }
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Mean negative log softmax probability of the true class.
// ---------------------------------------------------------------------------

template <typename T>
T cross_entropy_seg(const Tensor<T>& logits, const Tensor<int32_t>& labels,
                    Tensor<T>* grad_logits = nullptr) {
    if (logits.rank() != 3) throw ShapeError("cross_entropy_seg: logits [K,H,W]");
    if (labels.rank() != 3 || labels.dim(0) != 1 || labels.dim(1) != logits.dim(1) ||
        labels.dim(2) != logits.dim(2))
        throw ShapeError("cross_entropy_seg: labels [1,H,W] mismatch");
    const int kk = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
    const int64_t n = static_cast<int64_t>(h) * w;

    T loss = 0;
    for (int64_t p = 0; p < n; ++p) {
        const int32_t lbl = labels.data[static_cast<size_t>(p)];
        if (lbl < 0 || lbl >= kk) throw ValueError("cross_entropy_seg: label out of range");
        T mx = logits.data[static_cast<size_t>(p)];
        for (int k = 1; k < kk; ++k)
            mx = std::max(mx, logits.data[static_cast<size_t>(k) * n + p]);
        T z = 0;
        for (int k = 0; k < kk; ++k)
            z += std::exp(logits.data[static_cast<size_t>(k) * n + p] - mx);
        const T logz = std::log(z) + mx;
        loss += logz - logits.data[static_cast<size_t>(lbl) * n + p];
        if (grad_logits) {
            for (int k = 0; k < kk; ++k) {
                const T prob = std::exp(logits.data[static_cast<size_t>(k) * n + p] - logz);
                grad_logits->data[static_cast<size_t>(k) * n + p] +=
                    (prob - (k == lbl ? T(1) : T(0))) / static_cast<T>(n);
            }
        }
    }
    return loss / static_cast<T>(n);
}

// ---------------------------------------------------------------------------
// Total loss: mean(mu * L_p) + beta * L_s + gamma * L_sem. The mask is a
// constant weight; no gradient flows into it.
// ---------------------------------------------------------------------------

template <typename T>
T total_loss(const Tensor<T>& photo_map, const Tensor<T>& mask, T smooth, T seg,
             const LossWeights& w) {
    check_same_shape(photo_map, mask, "total_loss");
    T s = 0;
    for (int64_t i = 0; i < photo_map.numel(); ++i) s += photo_map.data[i] * mask.data[i];
    return s / static_cast<T>(photo_map.numel()) + static_cast<T>(w.beta_smooth) * smooth +
           static_cast<T>(w.gamma_seg) * seg;
}

// Returns d(total)/d(photo_map); d/d(smooth) = beta, d/d(seg) = gamma.
template <typename T>
Tensor<T> total_loss_backward_photo(const Tensor<T>& mask, T grad_total = T(1)) {
    Tensor<T> g(mask.shape);
    const T inv = grad_total / static_cast<T>(mask.numel());
    for (int64_t i = 0; i < mask.numel(); ++i) g.data[i] = mask.data[i] * inv;
    return g;
}

}  // namespace roiformer
