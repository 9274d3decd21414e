#pragma once

#include <functional>

#include "roiformer/attention.hpp"
#include "roiformer/gradcheck.hpp"
#include "roiformer/geometry.hpp"
#include "roiformer/losses.hpp"
#include "roiformer/model.hpp"

namespace roiformer {

// The finite-difference certification registry: one entry per differentiable
// op plus the full roiformer_block. All checks run in double precision at
// small shapes. Random draws avoid the known non-smooth loci: bilinear cell
// boundaries (fractional parts kept in [0.1, 0.9]), min-reprojection ties
// (candidate gaps >= 1e-4), L1 sign changes (|diff| >= 1e-4) and tanh
// saturation (raw offsets bounded by |x| <= 2.5).

struct GradCheckCase {
    std::string name;
    std::function<GradReport(uint64_t seed)> run;
};

namespace gradcheck_detail {

inline Tensor<double> rand_tensor(std::vector<int> shape, std::mt19937_64& rng, double lo = -1,
                                  double hi = 1) {
    Tensor<double> t(std::move(shape));
    std::uniform_real_distribution<double> d(lo, hi);
    for (auto& v : t.data) v = d(rng);
    return t;
}

inline double dot_all(const Tensor<double>& a, const Tensor<double>& b) {
    double s = 0;
    for (int64_t i = 0; i < a.numel(); ++i) s += a.data[i] * b.data[i];
    return s;
}

// Fractional parts pushed into [0.1, 0.9] to stay inside one bilinear cell.
inline void nudge_off_grid(double& x) {
    const double f = x - std::floor(x);
    if (f < 0.1) x += 0.1 - f;
    if (f > 0.9) x -= f - 0.9;
}

inline GradReport check_against(const std::string& name, std::function<double()> f,
                                std::vector<std::pair<Tensor<double>*, const Tensor<double>*>>
                                    targets) {
    std::vector<GradReport> parts;
    for (auto& [x, analytic] : targets) {
        Tensor<double> numeric = finite_diff_gradient(f, *x);
        parts.push_back(compare_gradients(name, *analytic, numeric));
    }
    return merge_reports(name, parts);
}

}  // namespace gradcheck_detail

inline std::vector<GradCheckCase> gradcheck_suite() {
    using namespace gradcheck_detail;
    std::vector<GradCheckCase> cases;

    cases.push_back({"linear", [](uint64_t seed) {
        std::mt19937_64 rng(seed);
        Tensor<double> x = rand_tensor({3, 4}, rng), w = rand_tensor({4, 5}, rng);
        Tensor<double> b = rand_tensor({5}, rng), cot = rand_tensor({3, 5}, rng);
        Tensor<double> gw({4, 5}), gb({5});
        Tensor<double> gx = linear_backward(x, w, cot, gw, gb);
        auto f = [&]() { return dot_all(linear(x, w, b), cot); };
        return check_against("linear", f, {{&x, &gx}, {&w, &gw}, {&b, &gb}});
    }});

    cases.push_back({"softmax", [](uint64_t seed) {
        std::mt19937_64 rng(seed);
        Tensor<double> x = rand_tensor({3, 6}, rng, -2, 2), cot = rand_tensor({3, 6}, rng);
        Tensor<double> y = softmax(x, 1);
        Tensor<double> gx = softmax_backward(y, cot, 1);
        auto f = [&]() { return dot_all(softmax(x, 1), cot); };
        return check_against("softmax", f, {{&x, &gx}});
    }});

    for (int stride : {1, 2}) {
        cases.push_back({"conv2d_3x3_s" + std::to_string(stride), [stride](uint64_t seed) {
            std::mt19937_64 rng(seed);
            Tensor<double> x = rand_tensor({2, 5, 6}, rng), w = rand_tensor({3, 2, 3, 3}, rng);
            Tensor<double> b = rand_tensor({3}, rng);
            Tensor<double> out = conv2d_3x3(x, w, b, stride);
            Tensor<double> cot = rand_tensor(out.shape, rng);
            Tensor<double> gw(w.shape), gb(b.shape);
            Tensor<double> gx = conv2d_3x3_backward(x, w, cot, stride, gw, gb);
            auto f = [&]() { return dot_all(conv2d_3x3(x, w, b, stride), cot); };
            return check_against("conv2d_3x3", f, {{&x, &gx}, {&w, &gw}, {&b, &gb}});
        }});
    }

    cases.push_back({"upsample_nearest_x2", [](uint64_t seed) {
        std::mt19937_64 rng(seed);
        Tensor<double> x = rand_tensor({2, 3, 4}, rng), cot = rand_tensor({2, 6, 8}, rng);
        Tensor<double> gx = upsample_nearest_x2_backward(cot);
        auto f = [&]() { return dot_all(upsample_nearest_x2(x), cot); };
        return check_against("upsample_nearest_x2", f, {{&x, &gx}});
    }});

    cases.push_back({"elu", [](uint64_t seed) {
        std::mt19937_64 rng(seed);
        Tensor<double> x = rand_tensor({20}, rng, -2, 2), cot = rand_tensor({20}, rng);
        for (auto& v : x.data)  // keep away from the origin kink
            if (std::abs(v) < 1e-3) v += 0.01;
        Tensor<double> gx = elu_backward(x, cot);
        auto f = [&]() { return dot_all(elu(x), cot); };
        return check_against("elu", f, {{&x, &gx}});
    }});

    cases.push_back({"bilinear_sample", [](uint64_t seed) {
        std::mt19937_64 rng(seed);
        Tensor<double> feat = rand_tensor({2, 5, 6}, rng);
        std::uniform_real_distribution<double> dx(0.3, 4.7), dy(0.3, 3.7);
        std::vector<std::array<double, 2>> coords(6);
        for (auto& c : coords) {
            c = {dx(rng), dy(rng)};
            nudge_off_grid(c[0]);
            nudge_off_grid(c[1]);
        }
        Tensor<double> cot = rand_tensor({2, 6}, rng);
        auto bb = bilinear_sample_backward(feat, coords, cot);
        // coords as a tensor so the generic driver can perturb them
        Tensor<double> ct({static_cast<int>(coords.size()), 2});
        Tensor<double> gct(ct.shape);
        for (size_t i = 0; i < coords.size(); ++i) {
            ct(static_cast<int>(i), 0) = coords[i][0];
            ct(static_cast<int>(i), 1) = coords[i][1];
            gct(static_cast<int>(i), 0) = bb.grad_coords[i][0];
            gct(static_cast<int>(i), 1) = bb.grad_coords[i][1];
        }
        auto f = [&]() {
            std::vector<std::array<double, 2>> cs(coords.size());
            for (size_t i = 0; i < cs.size(); ++i)
                cs[i] = {ct(static_cast<int>(i), 0), ct(static_cast<int>(i), 1)};
            return dot_all(bilinear_sample(feat, cs), cot);
        };
        return check_against("bilinear_sample", f, {{&feat, &bb.grad_feature}, {&ct, &gct}});
    }});

    cases.push_back({"ssim", [](uint64_t seed) {
        std::mt19937_64 rng(seed);
        Tensor<double> a = rand_tensor({2, 5, 5}, rng, 0.05, 0.95);
        Tensor<double> b = rand_tensor({2, 5, 5}, rng, 0.05, 0.95);
        Tensor<double> cot = rand_tensor(a.shape, rng);
        SsimCache<double> cache;
        ssim(a, b, &cache);
        Tensor<double> ga(a.shape), gb(b.shape);
        ssim_backward(a, b, cache, cot, ga, gb);
        auto f = [&]() { return dot_all(ssim(a, b), cot); };
        return check_against("ssim", f, {{&a, &ga}, {&b, &gb}});
    }});

    cases.push_back({"photometric_loss", [](uint64_t seed) {
        std::mt19937_64 rng(seed);
        Tensor<double> t = rand_tensor({3, 5, 5}, rng, 0.05, 0.95);
        Tensor<double> w = rand_tensor({3, 5, 5}, rng, 0.05, 0.95);
        for (int64_t i = 0; i < t.numel(); ++i)  // keep |t-w| away from the L1 kink
            if (std::abs(t.data[i] - w.data[i]) < 1e-3) w.data[i] += 2e-3;
        LossWeights lw;
        Tensor<double> cot = rand_tensor({1, 5, 5}, rng);
        PhotometricCache<double> cache;
        photometric_loss(t, w, lw, &cache);
        Tensor<double> gt(t.shape), gw(w.shape);
        photometric_loss_backward(t, w, lw, cache, cot, gt, gw);
        auto f = [&]() { return dot_all(photometric_loss(t, w, lw), cot); };
        return check_against("photometric_loss", f, {{&t, &gt}, {&w, &gw}});
    }});

    cases.push_back({"min_reprojection", [](uint64_t seed) {
        std::mt19937_64 rng(seed);
        Tensor<double> a = rand_tensor({1, 4, 5}, rng, 0, 1);
        Tensor<double> b = rand_tensor({1, 4, 5}, rng, 0, 1);
        for (int64_t i = 0; i < a.numel(); ++i)  // keep away from ties
            if (std::abs(a.data[i] - b.data[i]) < 1e-3) b.data[i] += 2e-3;
        Tensor<double> cot = rand_tensor(a.shape, rng);
        std::vector<int> argmin;
        min_reprojection<double>({a, b}, &argmin);
        auto grads = min_reprojection_backward<double>(argmin, 2, a.shape, cot);
        auto f = [&]() { return dot_all(min_reprojection<double>({a, b}), cot); };
        return check_against("min_reprojection", f, {{&a, &grads[0]}, {&b, &grads[1]}});
    }});

    cases.push_back({"smoothness_loss", [](uint64_t seed) {
        std::mt19937_64 rng(seed);
        Tensor<double> d = rand_tensor({1, 4, 5}, rng, 1.0, 5.0);
        Tensor<double> img = rand_tensor({2, 4, 5}, rng, 0, 1);
        Tensor<double> gd(d.shape);
        smoothness_loss(d, img, false, &gd);
        auto f = [&]() { return smoothness_loss(d, img, false); };
        return check_against("smoothness_loss", f, {{&d, &gd}});
    }});

    cases.push_back({"smoothness_loss_norm", [](uint64_t seed) {
        std::mt19937_64 rng(seed);
        Tensor<double> d = rand_tensor({1, 4, 5}, rng, 1.0, 5.0);
        Tensor<double> img = rand_tensor({2, 4, 5}, rng, 0, 1);
        Tensor<double> gd(d.shape);
        smoothness_loss(d, img, true, &gd);
        auto f = [&]() { return smoothness_loss(d, img, true); };
        return check_against("smoothness_loss_norm", f, {{&d, &gd}});
    }});

    cases.push_back({"cross_entropy_seg", [](uint64_t seed) {
        std::mt19937_64 rng(seed);
        Tensor<double> logits = rand_tensor({4, 3, 4}, rng, -2, 2);
        Tensor<int32_t> labels({1, 3, 4});
        std::uniform_int_distribution<int> dl(0, 3);
        for (auto& v : labels.data) v = dl(rng);
        Tensor<double> gl(logits.shape);
        cross_entropy_seg(logits, labels, &gl);
        auto f = [&]() { return cross_entropy_seg<double>(logits, labels); };
        return check_against("cross_entropy_seg", f, {{&logits, &gl}});
    }});

    cases.push_back({"total_loss", [](uint64_t seed) {
        std::mt19937_64 rng(seed);
        Tensor<double> lp = rand_tensor({1, 4, 5}, rng, 0, 1);
        Tensor<double> mu = rand_tensor({1, 4, 5}, rng, 0.2, 1.0);
        LossWeights lw;
        Tensor<double> glp = total_loss_backward_photo(mu, 1.0);
        auto f = [&]() { return total_loss(lp, mu, 0.3, 0.7, lw); };
        return check_against("total_loss", f, {{&lp, &glp}});
    }});

    cases.push_back({"depth_head", [](uint64_t seed) {
        std::mt19937_64 rng(seed);
        Tensor<double> logits = rand_tensor({1, 3, 4}, rng, -2, 2);
        Tensor<double> cot = rand_tensor(logits.shape, rng);
        Tensor<double> g = depth_head_backward(logits, 0.1, 80.0, cot);
        auto f = [&]() { return dot_all(depth_head(logits, 0.1, 80.0).values, cot); };
        return check_against("depth_head", f, {{&logits, &g}});
    }});

    cases.push_back({"layer_norm", [](uint64_t seed) {
        std::mt19937_64 rng(seed);
        Tensor<double> x = rand_tensor({5, 6}, rng), gamma = rand_tensor({6}, rng, 0.5, 1.5);
        Tensor<double> beta = rand_tensor({6}, rng), cot = rand_tensor({5, 6}, rng);
        LayerNormCache<double> cache;
        layer_norm_tokens(x, gamma, beta, &cache);
        Tensor<double> gg({6}), gb({6});
        Tensor<double> gx = layer_norm_tokens_backward(cot, gamma, cache, gg, gb);
        auto f = [&]() { return dot_all(layer_norm_tokens(x, gamma, beta), cot); };
        return check_against("layer_norm", f, {{&x, &gx}, {&gamma, &gg}, {&beta, &gb}});
    }});

    cases.push_back({"inverse_warp", [](uint64_t seed) {
        std::mt19937_64 rng(seed);
        CameraModel<double> cam{6.0, 6.0, 3.0, 2.5};
        Tensor<double> src = rand_tensor({2, 6, 7}, rng, 0, 1);
        Tensor<double> pose_t({6});
        Tensor<double> depth_t;
        // retry until all reprojections are interior and off-grid
        for (int attempt = 0;; ++attempt) {
            depth_t = rand_tensor({1, 6, 7}, rng, 3.0, 5.0);
            pose_t = rand_tensor({6}, rng, -0.05, 0.05);
            pose_t.data[3] *= 4;  // a bit more translation
            DepthMap<double> dm(depth_t);
            Pose<double> pose = Pose<double>::from_array(
                {pose_t(0), pose_t(1), pose_t(2), pose_t(3), pose_t(4), pose_t(5)});
            WarpCache<double> wc;
            inverse_warp(src, dm, pose, cam, &wc);
            bool ok = true;
            for (const auto& c : wc.coords) {
                const double fx = c[0] - std::floor(c[0]), fy = c[1] - std::floor(c[1]);
                if (c[0] < 0.2 || c[0] > 5.8 || c[1] < 0.2 || c[1] > 4.8 || fx < 0.05 ||
                    fx > 0.95 || fy < 0.05 || fy > 0.95) {
                    ok = false;
                    break;
                }
            }
            if (ok || attempt > 200) break;
        }
        DepthMap<double> dm(depth_t);
        Tensor<double> cot = rand_tensor({2, 6, 7}, rng);
        auto make_pose = [&]() {
            return Pose<double>::from_array(
                {pose_t(0), pose_t(1), pose_t(2), pose_t(3), pose_t(4), pose_t(5)});
        };
        WarpCache<double> wc;
        inverse_warp(src, dm, make_pose(), cam, &wc);
        WarpGrads<double> wg = inverse_warp_backward(src, dm, wc, cot, true);
        Tensor<double> gpose({6});
        for (int i = 0; i < 6; ++i) gpose(i) = wg.grad_pose[static_cast<size_t>(i)];
        auto f = [&]() {
            DepthMap<double> d2(depth_t);
            return dot_all(inverse_warp(src, d2, make_pose(), cam).warped, cot);
        };
        return check_against(
            "inverse_warp", f,
            {{&depth_t, &wg.grad_depth}, {&pose_t, &gpose}, {&src, &wg.grad_source}});
    }});

    auto attention_inputs = [](std::mt19937_64& rng, int c, int h, int w, int hg, int wg) {
        Tensor<double> q = rand_tensor({c, h, w}, rng, -0.8, 0.8);
        Tensor<double> g = rand_tensor({c, hg, wg}, rng, -0.8, 0.8);
        return std::pair{q, g};
    };

    cases.push_back({"dense_cross_attention", [attention_inputs](uint64_t seed) {
        std::mt19937_64 rng(seed);
        const int c = 8;
        AttentionConfig cfg;
        cfg.heads = 2;
        cfg.points = 3;
        cfg.variant = AttentionVariant::Dense;
        auto lp = make_attention_params<double>(c, cfg.heads, cfg.points, rng);
        auto [q, g] = attention_inputs(rng, c, 3, 4, 4, 5);
        Tensor<double> cot = rand_tensor({c, 3, 4}, rng);
        AttentionCoreCache<double> cache;
        dense_cross_attention(q, g, lp, cfg, &cache);
        Tensor<double> gq(q.shape), gg(g.shape);
        dense_cross_attention_backward(cot, lp, cfg, cache, gq, gg);
        auto f = [&]() { return dot_all(dense_cross_attention(q, g, lp, cfg), cot); };
        std::vector<std::pair<Tensor<double>*, const Tensor<double>*>> targets{{&q, &gq},
                                                                               {&g, &gg}};
        for (auto* p : {&lp.w_query, &lp.b_query, &lp.w_key, &lp.b_key, &lp.w_value, &lp.b_value})
            targets.push_back({&p->value, &p->grad});
        return check_against("dense_cross_attention", f, targets);
    }});

    cases.push_back({"deformable_attention", [attention_inputs](uint64_t seed) {
        std::mt19937_64 rng(seed);
        const int c = 8;
        AttentionConfig cfg;
        cfg.heads = 2;
        cfg.points = 3;
        cfg.variant = AttentionVariant::Deformable;
        auto lp = make_attention_params<double>(c, cfg.heads, cfg.points, rng);
        auto [q, g] = attention_inputs(rng, c, 3, 4, 5, 6);
        Tensor<double> cot = rand_tensor({c, 3, 4}, rng);
        AttentionCoreCache<double> cache;
        Tensor<double> hc;
        deformable_attention(q, g, lp, cfg, &cache, static_cast<const AttentionDebug<double>*>(nullptr), &hc);
        // keep sampled positions away from cell boundaries
        for (const auto& pos : cache.positions) {
            const double fx = pos[0] - std::floor(pos[0]), fy = pos[1] - std::floor(pos[1]);
            if (fx < 0.02 || fx > 0.98 || fy < 0.02 || fy > 0.98)
                for (auto& b : lp.b_offset.value.data) b += 0.013;  // nudge all offsets
        }
        deformable_attention(q, g, lp, cfg, &cache, static_cast<const AttentionDebug<double>*>(nullptr), &hc);
        Tensor<double> gq(q.shape), gg(g.shape);
        deformable_attention_backward(cot, hc, lp, cfg, cache, gq, gg);
        auto f = [&]() { return dot_all(deformable_attention(q, g, lp, cfg), cot); };
        std::vector<std::pair<Tensor<double>*, const Tensor<double>*>> targets{{&q, &gq},
                                                                               {&g, &gg}};
        for (auto* p : {&lp.w_query, &lp.b_query, &lp.w_value, &lp.b_value, &lp.w_offset,
                        &lp.b_offset, &lp.w_weight, &lp.b_weight, &lp.w_out, &lp.b_out})
            targets.push_back({&p->value, &p->grad});
        return check_against("deformable_attention", f, targets);
    }});

    cases.push_back({"roi_attention", [attention_inputs](uint64_t seed) {
        std::mt19937_64 rng(seed);
        const int c = 8;
        AttentionConfig cfg;
        cfg.heads = 2;
        cfg.points = 3;
        auto lp = make_attention_params<double>(c, cfg.heads, cfg.points, rng);
        auto [q, g] = attention_inputs(rng, c, 4, 4, 4, 4);
        Tensor<double> cot = rand_tensor({c, 4, 4}, rng, -0.1, 0.1);
        AttentionLayerCache<double> cache;
        roi_attention(q, g, lp, cfg, &cache);
        Tensor<double> gq(q.shape), gg(g.shape);
        roi_attention_backward(cot, lp, cfg, cache, gq, gg);
        auto f = [&]() { return dot_all(roi_attention(q, g, lp, cfg), cot); };
        std::vector<std::pair<Tensor<double>*, const Tensor<double>*>> targets{{&q, &gq},
                                                                               {&g, &gg}};
        for (auto* p : lp.all()) targets.push_back({&p->value, &p->grad});
        return check_against("roi_attention", f, targets);
    }});

    cases.push_back({"multi_head_merge", [](uint64_t seed) {
        std::mt19937_64 rng(seed);
        std::vector<Tensor<double>> heads{rand_tensor({2, 3, 4}, rng),
                                          rand_tensor({2, 3, 4}, rng)};
        Tensor<double> w = rand_tensor({4, 3}, rng), b = rand_tensor({3}, rng);
        Tensor<double> cot = rand_tensor({3, 3, 4}, rng);
        Tensor<double> gw(w.shape), gb(b.shape);
        auto gheads = multi_head_merge_backward(heads, w, cot, gw, gb);
        auto f = [&]() { return dot_all(multi_head_merge(heads, w, b), cot); };
        return check_against("multi_head_merge", f,
                             {{&heads[0], &gheads[0]}, {&heads[1], &gheads[1]}, {&w, &gw},
                              {&b, &gb}});
    }});

    cases.push_back({"roiformer_block", [](uint64_t seed) {
        std::mt19937_64 rng(seed);
        const int c = 8;
        AttentionConfig cfg;
        cfg.heads = 2;
        cfg.points = 4;
        cfg.layers = 1;
        auto bp = make_roiformer_block_params<double>(c, cfg, rng);
        Tensor<double> d = rand_tensor({c, 8, 8}, rng, -0.8, 0.8);
        Tensor<double> s = rand_tensor({c, 8, 8}, rng, -0.8, 0.8);
        // small cotangents keep the finite-difference roundoff floor of the
        // long forward chain below atol
        Tensor<double> cot_d = rand_tensor({c, 8, 8}, rng, -0.02, 0.02);
        Tensor<double> cot_s = rand_tensor({c, 8, 8}, rng, -0.02, 0.02);
        RoiformerBlockCache<double> cache;
        roiformer_block(d, s, bp, cfg, cache);
        for (auto* p : bp.all()) p->zero_grad();
        Tensor<double> gd(d.shape), gs(s.shape);
        {
            RoiformerBlockCache<double> c2;
            roiformer_block(d, s, bp, cfg, c2);
            auto [a, b] = roiformer_block_backward(cot_d, cot_s, bp, cfg, c2);
            gd = std::move(a);
            gs = std::move(b);
        }
        auto f = [&]() {
            RoiformerBlockCache<double> c2;
            auto [od, os] = roiformer_block(d, s, bp, cfg, c2);
            return dot_all(od, cot_d) + dot_all(os, cot_s);
        };
        std::vector<std::pair<Tensor<double>*, const Tensor<double>*>> targets{{&d, &gd},
                                                                               {&s, &gs}};
        for (auto* p : bp.all()) targets.push_back({&p->value, &p->grad});
        return check_against("roiformer_block", f, targets);
    }});

    return cases;
}

}  // namespace roiformer
