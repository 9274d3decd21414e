#pragma once

#include <map>

#include "roiformer/attention.hpp"
#include "roiformer/geometry.hpp"
#include "roiformer/ops.hpp"

namespace roiformer {

// Channel dims are listed deepest-first {P6,P5,P4,P3,P2}; the toy default is
// a scale-down of the full-size {256,128,64,32,16} configuration.
struct ModelConfig {
    std::array<int, 5> channels{64, 32, 16, 16, 8};
    std::vector<int> fusion_levels{3, 4, 5};
    AttentionConfig attn;
    std::vector<int> points_per_level{8, 16, 32};  // deepest fused level first
    double d_min = 0.1;
    double d_max = 80.0;
    int seg_classes = 3;

    int channel_at(int level) const {
        if (level < 2 || level > 6) throw ValueError("ModelConfig: level must be in [2,6]");
        return channels[static_cast<size_t>(6 - level)];
    }

    // Point count for a fused level: deepest fused level takes the first list
    // entry, shallower levels the following ones (last entry repeats).
    int points_for_level(int level) const {
        std::vector<int> lv = fusion_levels;
        std::sort(lv.begin(), lv.end(), std::greater<int>());
        size_t idx = 0;
        for (size_t i = 0; i < lv.size(); ++i)
            if (lv[i] == level) idx = i;
        if (points_per_level.empty()) return attn.points;
        return points_per_level[std::min(idx, points_per_level.size() - 1)];
    }

    void validate() const {
        attn.validate();
        for (int f : fusion_levels)
            if (f < 2 || f > 6) throw ValueError("ModelConfig: fusion level outside P2..P6");
        if (!(d_min > 0) || !(d_min < d_max)) throw ValueError("ModelConfig: need 0 < d_min < d_max");
        if (seg_classes < 2) throw ValueError("ModelConfig: need >= 2 segmentation classes");
        for (int c : channels)
            if (c % attn.heads != 0 && !fusion_levels.empty())
                throw ValueError("ModelConfig: channel dims must divide by head count");
    }
};

// ---------------------------------------------------------------------------
// Conv3x3 (+ optional ELU) building block with explicit cache.
// ---------------------------------------------------------------------------

template <typename T>
struct ConvLayer {
    Parameter<T> w, b;
    int stride = 1;
    bool act = true;

    static ConvLayer make(int cin, int cout, int stride, bool act, std::mt19937_64& rng) {
        ConvLayer l;
        l.w = Parameter<T>::uniform_init({cout, cin, 3, 3}, cin * 9, rng);
        l.b = Parameter<T>(Tensor<T>({cout}));
        l.stride = stride;
        l.act = act;
        return l;
    }
};

template <typename T>
struct ConvCache {
    Tensor<T> x;    // layer input
    Tensor<T> pre;  // pre-activation (kept only when act)
};

template <typename T>
Tensor<T> conv_forward(ConvLayer<T>& l, const Tensor<T>& x, ConvCache<T>& k) {
    k.x = x;
    Tensor<T> out = conv2d_3x3(x, l.w.value, l.b.value, l.stride);
    if (l.act) {
        k.pre = out;
        return elu(out);
    }
    return out;
}

template <typename T>
Tensor<T> conv_backward(ConvLayer<T>& l, const ConvCache<T>& k, const Tensor<T>& grad_out) {
    Tensor<T> g = l.act ? elu_backward(k.pre, grad_out) : grad_out;
    return conv2d_3x3_backward(k.x, l.w.value, g, l.stride, l.w.grad, l.b.grad);
}

// ---------------------------------------------------------------------------
// Pyramid features P2..P6 at strides 2..32.
// ---------------------------------------------------------------------------

template <typename T>
struct PyramidFeatures {
    std::array<Tensor<T>, 5> maps;  // index 0 = P2 ... 4 = P6
    Tensor<T>& at_level(int level) { return maps[static_cast<size_t>(level - 2)]; }
    const Tensor<T>& at_level(int level) const { return maps[static_cast<size_t>(level - 2)]; }
};

// ---------------------------------------------------------------------------
// Decoder stage: pre-conv, 2x upsample, concat skip, post-conv.
// ---------------------------------------------------------------------------

template <typename T>
struct DecoderStage {
    ConvLayer<T> pre, post;
    bool has_skip = true;
};

template <typename T>
struct DecoderStageCache {
    ConvCache<T> pre, post;
    int skip_channels = 0;
};

template <typename T>
Tensor<T> decoder_stage_forward(DecoderStage<T>& s, const Tensor<T>& x, const Tensor<T>* skip,
                                DecoderStageCache<T>& k) {
    Tensor<T> t = conv_forward(s.pre, x, k.pre);
    t = upsample_nearest_x2(t);
    if (s.has_skip) {
        k.skip_channels = skip->dim(0);
        t = concat_channels(t, *skip);
    }
    return conv_forward(s.post, t, k.post);
}

// Returns grad wrt stage input; grad wrt the skip is accumulated into gskip.
template <typename T>
Tensor<T> decoder_stage_backward(DecoderStage<T>& s, const DecoderStageCache<T>& k,
                                 const Tensor<T>& grad_out, Tensor<T>* gskip) {
    Tensor<T> gcat = conv_backward(s.post, k.post, grad_out);
    Tensor<T> gup;
    if (s.has_skip) {
        Tensor<T> gs;
        split_channels(gcat, gcat.dim(0) - k.skip_channels, gup, gs);
        if (gskip) axpy(*gskip, gs);
    } else {
        gup = std::move(gcat);
    }
    Tensor<T> gpre = upsample_nearest_x2_backward(gup);
    return conv_backward(s.pre, k.pre, gpre);
}

// ---------------------------------------------------------------------------
// Bounded inverse-depth head: sigmoid -> disparity in [1/d_max, 1/d_min],
// depth = 1/disparity. Strictly positive, monotone decreasing in the logit.
// ---------------------------------------------------------------------------

template <typename T>
DepthMap<T> depth_head(const Tensor<T>& logits, T d_min, T d_max) {
    if (logits.rank() != 3 || logits.dim(0) != 1) throw ShapeError("depth_head: logits [1,H,W]");
    Tensor<T> depth(logits.shape);
    const T lo = T(1) / d_max, hi = T(1) / d_min;
    for (int64_t i = 0; i < logits.numel(); ++i) {
        const T disp = lo + sigmoid(logits.data[i]) * (hi - lo);
        depth.data[i] = T(1) / disp;
    }
    return DepthMap<T>(std::move(depth));
}

template <typename T>
Tensor<T> depth_head_backward(const Tensor<T>& logits, T d_min, T d_max,
                              const Tensor<T>& grad_depth) {
    Tensor<T> g(logits.shape);
    const T lo = T(1) / d_max, hi = T(1) / d_min;
    for (int64_t i = 0; i < logits.numel(); ++i) {
        const T s = sigmoid(logits.data[i]);
        const T disp = lo + s * (hi - lo);
        // d(1/disp)/dlogit = -(1/disp^2) * (hi-lo) * s(1-s)
        g.data[i] = grad_depth.data[i] * (-(hi - lo) * s * (T(1) - s) / (disp * disp));
    }
    return g;
}

// ---------------------------------------------------------------------------
// The two-branch model.
// ---------------------------------------------------------------------------

template <typename T>
struct ModelDebug {
    TapCounter* taps = nullptr;
    AttentionTrace* trace = nullptr;
    int trace_level = -1;
    const std::vector<std::pair<int, int>>* trace_queries = nullptr;
};

template <typename T>
struct ModelOutput {
    std::array<Tensor<T>, 4> disp_logits;  // strides 1,2,4,8 (finest first)
    Tensor<T> seg_logits;                  // [K,H,W] full resolution
    PyramidFeatures<T> pyramid;
};

template <typename T>
struct ModelCache {
    std::array<ConvCache<T>, 5> enc;
    ConvCache<T> d_init, s_init;
    std::array<DecoderStageCache<T>, 4> d_stages, s_stages;  // levels 5,4,3,2
    DecoderStageCache<T> d_final, s_final;
    std::map<int, RoiformerBlockCache<T>> fusion;
    std::array<ConvCache<T>, 4> d_heads;
    ConvCache<T> s_head;
    PyramidFeatures<T> pyramid;
};

template <typename T>
class DepthSegModel {
public:
    ModelConfig cfg;

    DepthSegModel(const ModelConfig& config, uint64_t seed) : cfg(config) {
        cfg.validate();
        std::mt19937_64 rng(seed);
        const auto ch = [&](int level) { return cfg.channel_at(level); };
        enc_[0] = ConvLayer<T>::make(3, ch(2), 2, true, rng);
        for (int k = 3; k <= 6; ++k)
            enc_[static_cast<size_t>(k - 2)] = ConvLayer<T>::make(ch(k - 1), ch(k), 2, true, rng);

        d_init_ = ConvLayer<T>::make(ch(6), ch(6), 1, true, rng);
        s_init_ = ConvLayer<T>::make(ch(6), ch(6), 1, true, rng);
        for (int k = 5; k >= 2; --k) {
            DecoderStage<T> d{ConvLayer<T>::make(ch(k + 1), ch(k), 1, true, rng),
                              ConvLayer<T>::make(2 * ch(k), ch(k), 1, true, rng), true};
            DecoderStage<T> s{ConvLayer<T>::make(ch(k + 1), ch(k), 1, true, rng),
                              ConvLayer<T>::make(2 * ch(k), ch(k), 1, true, rng), true};
            d_stages_[static_cast<size_t>(5 - k)] = std::move(d);
            s_stages_[static_cast<size_t>(5 - k)] = std::move(s);
        }
        d_final_ = DecoderStage<T>{ConvLayer<T>::make(ch(2), ch(2), 1, true, rng),
                                   ConvLayer<T>::make(ch(2), ch(2), 1, true, rng), false};
        s_final_ = DecoderStage<T>{ConvLayer<T>::make(ch(2), ch(2), 1, true, rng),
                                   ConvLayer<T>::make(ch(2), ch(2), 1, true, rng), false};

        // disparity heads at strides 8,4,2,1; segmentation head at stride 1
        d_heads_[3] = ConvLayer<T>::make(ch(4), 1, 1, false, rng);
        d_heads_[2] = ConvLayer<T>::make(ch(3), 1, 1, false, rng);
        d_heads_[1] = ConvLayer<T>::make(ch(2), 1, 1, false, rng);
        d_heads_[0] = ConvLayer<T>::make(ch(2), 1, 1, false, rng);
        s_head_ = ConvLayer<T>::make(ch(2), cfg.seg_classes, 1, false, rng);

        for (int lvl : cfg.fusion_levels) {
            AttentionConfig acfg = cfg.attn;
            acfg.points = cfg.points_for_level(lvl);
            fusion_.emplace(lvl, make_roiformer_block_params<T>(ch(lvl), acfg, rng));
            fusion_cfg_.emplace(lvl, acfg);
        }
    }

    PyramidFeatures<T> encoder_forward(const Tensor<T>& image, ModelCache<T>& k) {
        if (image.rank() != 3 || image.dim(0) != 3)
            throw ShapeError("encoder_forward: image must be [3,H,W]");
        if (image.dim(1) % 32 || image.dim(2) % 32)
            throw ShapeError("encoder_forward: H and W must be divisible by 32");
        PyramidFeatures<T> feats;
        Tensor<T> x = image;
        for (int i = 0; i < 5; ++i) {
            x = conv_forward(enc_[static_cast<size_t>(i)], x, k.enc[static_cast<size_t>(i)]);
            feats.maps[static_cast<size_t>(i)] = x;
        }
        return feats;
    }

    ModelOutput<T> forward(const Tensor<T>& image, ModelCache<T>& k,
                           const ModelDebug<T>* dbg = nullptr) {
        ModelOutput<T> out;
        k.pyramid = encoder_forward(image, k);
        out.pyramid = k.pyramid;

        Tensor<T> xd = conv_forward(d_init_, k.pyramid.at_level(6), k.d_init);
        Tensor<T> xs = conv_forward(s_init_, k.pyramid.at_level(6), k.s_init);
        maybe_fuse(6, xd, xs, k, dbg);

        for (int lvl = 5; lvl >= 2; --lvl) {
            const size_t si = static_cast<size_t>(5 - lvl);
            xd = decoder_stage_forward(d_stages_[si], xd, &k.pyramid.at_level(lvl), k.d_stages[si]);
            xs = decoder_stage_forward(s_stages_[si], xs, &k.pyramid.at_level(lvl), k.s_stages[si]);
            maybe_fuse(lvl, xd, xs, k, dbg);
            if (lvl == 4) out.disp_logits[3] = conv_forward(d_heads_[3], xd, k.d_heads[3]);
            if (lvl == 3) out.disp_logits[2] = conv_forward(d_heads_[2], xd, k.d_heads[2]);
            if (lvl == 2) out.disp_logits[1] = conv_forward(d_heads_[1], xd, k.d_heads[1]);
        }
        xd = decoder_stage_forward(d_final_, xd, nullptr, k.d_final);
        xs = decoder_stage_forward(s_final_, xs, nullptr, k.s_final);
        out.disp_logits[0] = conv_forward(d_heads_[0], xd, k.d_heads[0]);
        out.seg_logits = conv_forward(s_head_, xs, k.s_head);
        return out;
    }

    // grad_disp: grads wrt the four disparity logit maps; grad_seg wrt the
    // segmentation logits. Accumulates parameter grads; image grad discarded.
    void backward(const std::array<Tensor<T>, 4>& grad_disp, const Tensor<T>& grad_seg,
                  ModelCache<T>& k) {
        Tensor<T> gxd = conv_backward(d_heads_[0], k.d_heads[0], grad_disp[0]);
        Tensor<T> gxs = conv_backward(s_head_, k.s_head, grad_seg);
        gxd = decoder_stage_backward(d_final_, k.d_final, gxd, nullptr);
        gxs = decoder_stage_backward(s_final_, k.s_final, gxs, nullptr);

        std::array<Tensor<T>, 5> gskip;
        for (int i = 0; i < 5; ++i) gskip[static_cast<size_t>(i)] = Tensor<T>(k.pyramid.maps[static_cast<size_t>(i)].shape);

        for (int lvl = 2; lvl <= 5; ++lvl) {
            const size_t si = static_cast<size_t>(5 - lvl);
            if (lvl == 2) axpy(gxd, conv_backward(d_heads_[1], k.d_heads[1], grad_disp[1]));
            if (lvl == 3) axpy(gxd, conv_backward(d_heads_[2], k.d_heads[2], grad_disp[2]));
            if (lvl == 4) axpy(gxd, conv_backward(d_heads_[3], k.d_heads[3], grad_disp[3]));
            maybe_fuse_backward(lvl, gxd, gxs, k);
            gxd = decoder_stage_backward(d_stages_[si], k.d_stages[si], gxd,
                                         &gskip[static_cast<size_t>(lvl - 2)]);
            gxs = decoder_stage_backward(s_stages_[si], k.s_stages[si], gxs,
                                         &gskip[static_cast<size_t>(lvl - 2)]);
        }
        maybe_fuse_backward(6, gxd, gxs, k);
        Tensor<T> g6 = conv_backward(d_init_, k.d_init, gxd);
        axpy(g6, conv_backward(s_init_, k.s_init, gxs));
        axpy(gskip[4], g6);

        Tensor<T> g = std::move(gskip[4]);
        for (int i = 4; i >= 0; --i) {
            if (i < 4) axpy(g, gskip[static_cast<size_t>(i)]);
            g = conv_backward(enc_[static_cast<size_t>(i)], k.enc[static_cast<size_t>(i)], g);
        }
    }

    std::vector<std::pair<std::string, Parameter<T>*>> named_parameters() {
        std::vector<std::pair<std::string, Parameter<T>*>> out;
        auto addc = [&](const std::string& n, ConvLayer<T>& l) {
            out.emplace_back(n + ".w", &l.w);
            out.emplace_back(n + ".b", &l.b);
        };
        for (int i = 0; i < 5; ++i) addc("enc" + std::to_string(i), enc_[static_cast<size_t>(i)]);
        addc("d_init", d_init_);
        addc("s_init", s_init_);
        for (int lvl = 5; lvl >= 2; --lvl) {
            const size_t si = static_cast<size_t>(5 - lvl);
            addc("d_stage" + std::to_string(lvl) + ".pre", d_stages_[si].pre);
            addc("d_stage" + std::to_string(lvl) + ".post", d_stages_[si].post);
            addc("s_stage" + std::to_string(lvl) + ".pre", s_stages_[si].pre);
            addc("s_stage" + std::to_string(lvl) + ".post", s_stages_[si].post);
        }
        addc("d_final.pre", d_final_.pre);
        addc("d_final.post", d_final_.post);
        addc("s_final.pre", s_final_.pre);
        addc("s_final.post", s_final_.post);
        for (int i = 0; i < 4; ++i) addc("d_head" + std::to_string(i), d_heads_[static_cast<size_t>(i)]);
        addc("s_head", s_head_);
        for (auto& [lvl, bp] : fusion_) {
            const std::string base = "fusion" + std::to_string(lvl);
            out.emplace_back(base + ".guide.w", &bp.guide_w);
            out.emplace_back(base + ".guide.b", &bp.guide_b);
            auto add_layer = [&](const std::string& bn, AttentionLayerParams<T>& alp) {
                const char* names[] = {"w_query", "b_query", "w_key",    "b_key",
                                       "w_value", "b_value", "w_offset", "b_offset",
                                       "w_weight", "b_weight", "w_roi",   "b_roi",
                                       "w_out",   "b_out",   "ln_gamma", "ln_beta"};
                auto ps = alp.all();
                for (size_t i = 0; i < ps.size(); ++i)
                    out.emplace_back(bn + "." + names[i], ps[i]);
            };
            for (size_t n = 0; n < bp.depth_layers.size(); ++n)
                add_layer(base + ".depth" + std::to_string(n), bp.depth_layers[n]);
            for (size_t n = 0; n < bp.seg_layers.size(); ++n)
                add_layer(base + ".seg" + std::to_string(n), bp.seg_layers[n]);
        }
        return out;
    }

    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> out;
        for (auto& [name, p] : named_parameters()) out.push_back(p);
        return out;
    }

    int64_t parameter_count() {
        int64_t n = 0;
        for (auto* p : parameters()) n += p->value.numel();
        return n;
    }

    const std::map<int, AttentionConfig>& fusion_configs() const { return fusion_cfg_; }

private:
    void maybe_fuse(int lvl, Tensor<T>& xd, Tensor<T>& xs, ModelCache<T>& k,
                    const ModelDebug<T>* dbg) {
        auto it = fusion_.find(lvl);
        if (it == fusion_.end()) return;
        AttentionDebug<T> adbg;
        const AttentionDebug<T>* adbg_ptr = nullptr;
        if (dbg && (dbg->taps || (dbg->trace && dbg->trace_level == lvl))) {
            adbg.taps = dbg->taps;
            if (dbg->trace && dbg->trace_level == lvl) {
                adbg.trace = dbg->trace;
                adbg.trace_queries = dbg->trace_queries;
                adbg.trace_level = lvl;
            }
            adbg_ptr = &adbg;
        }
        auto [nd, ns] = roiformer_block(xd, xs, it->second, fusion_cfg_.at(lvl), k.fusion[lvl],
                                        adbg_ptr);
        xd = std::move(nd);
        xs = std::move(ns);
    }

    void maybe_fuse_backward(int lvl, Tensor<T>& gxd, Tensor<T>& gxs, ModelCache<T>& k) {
        auto it = fusion_.find(lvl);
        if (it == fusion_.end()) return;
        auto [gd, gs] =
            roiformer_block_backward(gxd, gxs, it->second, fusion_cfg_.at(lvl), k.fusion.at(lvl));
        gxd = std::move(gd);
        gxs = std::move(gs);
    }

    std::array<ConvLayer<T>, 5> enc_;
    ConvLayer<T> d_init_, s_init_;
    std::array<DecoderStage<T>, 4> d_stages_, s_stages_;
    DecoderStage<T> d_final_, s_final_;
    std::array<ConvLayer<T>, 4> d_heads_;
    ConvLayer<T> s_head_;
    std::map<int, RoiformerBlockParams<T>> fusion_;
    std::map<int, AttentionConfig> fusion_cfg_;
};

}  // namespace roiformer
