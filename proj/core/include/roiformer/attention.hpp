#pragma once

#include <array>
#include <optional>

#include "roiformer/bilinear.hpp"
#include "roiformer/ops.hpp"
#include "roiformer/tensor.hpp"

namespace roiformer {

enum class AttentionVariant { Dense, Deformable, Roi };

inline const char* variant_name(AttentionVariant v) {
    switch (v) {
        case AttentionVariant::Dense: return "dense";
        case AttentionVariant::Deformable: return "deformable";
        default: return "roi";
    }
}

// Per-query attention region as distances from the query point to the box
// edges, in normalized feature-map units (fraction of the map span).
template <typename T>
struct RoiBox {
    T d_l = 0, d_t = 0, d_r = 0, d_b = 0;
    T width() const { return d_l + d_r; }
    T height() const { return d_t + d_b; }
};

struct AttentionConfig {
    int heads = 4;
    int points = 8;
    int layers = 2;
    // Fractional ROI extent bounds, applied per axis (r_min*W, r_min*H).
    double r_min = 0.3;
    double r_max = 0.7;
    AttentionVariant variant = AttentionVariant::Roi;
    bool tie_branch_params = false;

    void validate() const {
        if (heads <= 0 || points <= 0 || layers < 0)
            throw ValueError("AttentionConfig: heads/points must be positive, layers >= 0");
        if (!(r_min > 0) || !(r_min <= r_max) || !(r_max <= 1))
            throw ValueError("AttentionConfig: need 0 < r_min <= r_max <= 1");
    }
};

// One attention layer's learnable state. The value projection is a single
// [C,C] matrix whose column block m is head m's projection; the key
// projection participates only in the dense variant.
template <typename T>
struct AttentionLayerParams {
    Parameter<T> w_query, b_query;    // C -> C
    Parameter<T> w_key, b_key;        // C -> C (dense)
    Parameter<T> w_value, b_value;    // C -> C
    Parameter<T> w_offset, b_offset;  // C -> 2*M*P
    Parameter<T> w_weight, b_weight;  // C -> M*P
    Parameter<T> w_roi, b_roi;        // C -> 4*M
    Parameter<T> w_out, b_out;        // C -> C
    Parameter<T> ln_gamma, ln_beta;   // C

    std::vector<Parameter<T>*> all() {
        return {&w_query, &b_query, &w_key, &b_key, &w_value, &b_value, &w_offset, &b_offset,
                &w_weight, &b_weight, &w_roi, &b_roi, &w_out, &b_out, &ln_gamma, &ln_beta};
    }
};

template <typename T>
AttentionLayerParams<T> make_attention_params(int c, int m, int p, std::mt19937_64& rng) {
    if (c % m != 0) throw ShapeError("attention: channels must divide by head count");
    AttentionLayerParams<T> lp;
    lp.w_query = Parameter<T>::uniform_init({c, c}, c, rng);
    lp.b_query = Parameter<T>(Tensor<T>({c}));
    lp.w_key = Parameter<T>::uniform_init({c, c}, c, rng);
    lp.b_key = Parameter<T>(Tensor<T>({c}));
    lp.w_value = Parameter<T>::uniform_init({c, c}, c, rng);
    lp.b_value = Parameter<T>(Tensor<T>({c}));
    lp.w_offset = Parameter<T>::uniform_init({c, 2 * m * p}, c, rng);
    lp.b_offset = Parameter<T>(Tensor<T>({2 * m * p}));
    lp.w_weight = Parameter<T>::uniform_init({c, m * p}, c, rng);
    lp.b_weight = Parameter<T>(Tensor<T>({m * p}));
    lp.w_roi = Parameter<T>::uniform_init({c, 4 * m}, c, rng);
    lp.b_roi = Parameter<T>(Tensor<T>({4 * m}));
    lp.w_out = Parameter<T>::uniform_init({c, c}, c, rng);
    lp.b_out = Parameter<T>(Tensor<T>({c}));
    lp.ln_gamma = Parameter<T>(Tensor<T>::full({c}, T(1)));
    lp.ln_beta = Parameter<T>(Tensor<T>({c}));
    return lp;
}

// Instrumentation for the complexity-invariance checks: sampling variants
// touch the guidance through counted bilinear taps, the dense variant through
// counted key dot products.
struct TapCounter {
    long long queries = 0;
    long long samples = 0;
    long long bilinear_taps = 0;
    long long key_dots = 0;
};

struct AttentionTraceRow {
    int level = 0;
    int head = 0;
    int query_x = 0, query_y = 0;
    double roi_l = 0, roi_t = 0, roi_r = 0, roi_b = 0;  // box edges, guidance px
    double sample_x = 0, sample_y = 0;
    double weight = 0;
};

using AttentionTrace = std::vector<AttentionTraceRow>;

// Test/inspection hooks. Forced positions/weights are forward-only probes:
// they replace the generated sampling pattern and disable the backward pass.
template <typename T>
struct AttentionDebug {
    const std::vector<std::array<T, 2>>* forced_positions = nullptr;  // [Nq*M*P] guidance px
    const std::vector<T>* forced_weights = nullptr;                   // [Nq*M*P] post-softmax
    bool force_full_roi = false;
    TapCounter* taps = nullptr;
    AttentionTrace* trace = nullptr;
    const std::vector<std::pair<int, int>>* trace_queries = nullptr;  // (x,y) filter, null = all
    int trace_level = 0;
};

// ---------------------------------------------------------------------------
// ROI generation: four raw scalars per head from a linear map of the guidance
// feature at the query, each side mapped into [r_min/2, r_max/2] by a sigmoid
// so box extents satisfy the [r_min, r_max] bounds by construction.
// ---------------------------------------------------------------------------

template <typename T>
inline T roi_side_from_raw(T raw, T r_min, T r_max) {
    return T(0.5) * (r_min + sigmoid(raw) * (r_max - r_min));
}

template <typename T>
RoiBox<T> generate_roi(const Tensor<T>& guidance_feature_at_query, const Tensor<T>& w_roi,
                       const Tensor<T>& b_roi, int head, const AttentionConfig& cfg) {
    if (guidance_feature_at_query.rank() != 1)
        throw ShapeError("generate_roi: feature must be rank-1 [C]");
    Tensor<T> raw = linear(guidance_feature_at_query, w_roi, b_roi);
    const T rminw = static_cast<T>(cfg.r_min), rmaxw = static_cast<T>(cfg.r_max);
    RoiBox<T> box;
    box.d_l = roi_side_from_raw(raw(4 * head + 0), rminw, rmaxw);
    box.d_t = roi_side_from_raw(raw(4 * head + 1), rminw, rmaxw);
    box.d_r = roi_side_from_raw(raw(4 * head + 2), rminw, rmaxw);
    box.d_b = roi_side_from_raw(raw(4 * head + 3), rminw, rmaxw);
    return box;
}

// ---------------------------------------------------------------------------
// Attention core: computes the concatenated per-head aggregates [Nq, C]
// (Fusion<f_i, .> per head, before the output projection).
// ---------------------------------------------------------------------------

template <typename T>
struct AttentionCoreCache {
    AttentionVariant variant = AttentionVariant::Roi;
    int h = 0, w = 0, hg = 0, wg = 0, c = 0, m = 0, p = 0;
    bool forced = false;

    Tensor<T> q_tokens, g_tokens;  // [Nq,C], [Ng,C]
    Tensor<T> q_proj;              // [Nq,C]
    Tensor<T> v_tokens;            // [Ng,C]
    Tensor<T> v_map;               // [C,Hg,Wg]
    Tensor<T> k_tokens;            // dense only
    Tensor<T> offsets_raw;         // [Nq, 2MP]
    Tensor<T> weights;             // [Nq, MP], softmaxed per head
    Tensor<T> roi_raw;             // [Nq, 4M]
    Tensor<T> gq_tokens;           // [Nq, C] guidance feature at query (roi)
    bool gq_is_guidance_tokens = false;
    std::vector<std::array<T, 2>> base;       // [Nq]
    std::vector<std::array<T, 2>> positions;  // [Nq*M*P]
    std::vector<T> sampled;                   // [Nq*M*P*dh]
    std::vector<std::array<T, 4>> sides;      // per (i,m), normalized (l,t,r,b)
};

template <typename T>
inline std::array<T, 2> map_query_to_guidance(int qx, int qy, int w, int h, int wg, int hg) {
    // Align pixel-center grids; identity when shapes match.
    const T sx = static_cast<T>(wg) / static_cast<T>(w);
    const T sy = static_cast<T>(hg) / static_cast<T>(h);
    return {(static_cast<T>(qx) + T(0.5)) * sx - T(0.5),
            (static_cast<T>(qy) + T(0.5)) * sy - T(0.5)};
}

template <typename T>
Tensor<T> attention_core_forward(const Tensor<T>& query_map, const Tensor<T>& guidance,
                                 AttentionLayerParams<T>& lp, const AttentionConfig& cfg,
                                 AttentionCoreCache<T>& k,
                                 const AttentionDebug<T>* dbg = nullptr) {
    if (query_map.rank() != 3 || guidance.rank() != 3)
        throw ShapeError("attention: maps must be [C,H,W]");
    if (query_map.dim(0) != guidance.dim(0))
        throw ShapeError("attention: query/guidance channel mismatch");
    const int c = query_map.dim(0), h = query_map.dim(1), w = query_map.dim(2);
    const int hg = guidance.dim(1), wg = guidance.dim(2);
    const int m = cfg.heads, p = cfg.points;
    if (c % m != 0) throw ShapeError("attention: channels must divide by head count");
    const int dh = c / m;
    const int nq = h * w, ng = hg * wg;

    k.variant = cfg.variant;
    k.h = h;
    k.w = w;
    k.hg = hg;
    k.wg = wg;
    k.c = c;
    k.m = m;
    k.p = p;
    k.q_tokens = to_tokens(query_map);
    k.g_tokens = to_tokens(guidance);
    k.q_proj = linear(k.q_tokens, lp.w_query.value, lp.b_query.value);
    k.v_tokens = linear(k.g_tokens, lp.w_value.value, lp.b_value.value);

    if (dbg && dbg->taps) dbg->taps->queries += nq;

    Tensor<T> out({nq, c});

    if (cfg.variant == AttentionVariant::Dense) {
        k.k_tokens = linear(k.g_tokens, lp.w_key.value, lp.b_key.value);
        const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
        std::vector<T> scores(static_cast<size_t>(ng));
        for (int i = 0; i < nq; ++i) {
            const T* qi = k.q_proj.ptr() + static_cast<size_t>(i) * c;
            T* oi = out.ptr() + static_cast<size_t>(i) * c;
            for (int mm = 0; mm < m; ++mm) {
                const T* qh = qi + mm * dh;
                T mx = -std::numeric_limits<T>::infinity();
                for (int j = 0; j < ng; ++j) {
                    const T* kj = k.k_tokens.ptr() + static_cast<size_t>(j) * c + mm * dh;
                    T s = 0;
                    for (int d = 0; d < dh; ++d) s += qh[d] * kj[d];
                    s *= inv_sqrt;
                    scores[static_cast<size_t>(j)] = s;
                    mx = std::max(mx, s);
                }
                if (dbg && dbg->taps) dbg->taps->key_dots += ng;
                T z = 0;
                for (int j = 0; j < ng; ++j) {
                    scores[static_cast<size_t>(j)] = std::exp(scores[static_cast<size_t>(j)] - mx);
                    z += scores[static_cast<size_t>(j)];
                }
                const T invz = T(1) / z;
                for (int d = 0; d < dh; ++d) {
                    T acc = 0;
                    for (int j = 0; j < ng; ++j)
                        acc += scores[static_cast<size_t>(j)] *
                               k.v_tokens.ptr()[static_cast<size_t>(j) * c + mm * dh + d];
                    oi[mm * dh + d] = acc * invz;
                }
            }
        }
        return out;
    }

    // Sampling variants share the machinery below.
    k.v_map = from_tokens(k.v_tokens, hg, wg);
    k.offsets_raw = linear(k.q_proj, lp.w_offset.value, lp.b_offset.value);
    Tensor<T> wraw = linear(k.q_proj, lp.w_weight.value, lp.b_weight.value);
    // per-head softmax over the P points
    Tensor<T> w3 = Tensor<T>::from({nq * m, p}, std::move(wraw.data));
    k.weights = softmax(w3, 1);
    k.weights.shape = {nq, m * p};

    k.base.resize(static_cast<size_t>(nq));
    for (int i = 0; i < nq; ++i)
        k.base[static_cast<size_t>(i)] = map_query_to_guidance<T>(i % w, i / w, w, h, wg, hg);

    const bool is_roi = cfg.variant == AttentionVariant::Roi;
    if (is_roi) {
        // ROI side distances from the guidance feature at the query position.
        if (h == hg && w == wg) {
            k.gq_tokens = k.g_tokens;
            k.gq_is_guidance_tokens = true;
        } else {
            Tensor<T> sampled_g = bilinear_sample(guidance, k.base);  // [C, Nq]
            k.gq_tokens = Tensor<T>({nq, c});
            for (int ch = 0; ch < c; ++ch)
                for (int i = 0; i < nq; ++i) k.gq_tokens(i, ch) = sampled_g(ch, i);
            k.gq_is_guidance_tokens = false;
        }
        k.roi_raw = linear(k.gq_tokens, lp.w_roi.value, lp.b_roi.value);
        k.sides.resize(static_cast<size_t>(nq) * m);
    }

    k.positions.resize(static_cast<size_t>(nq) * m * p);
    k.sampled.assign(static_cast<size_t>(nq) * m * p * dh, T(0));

    const T rmin = static_cast<T>(cfg.r_min), rmax = static_cast<T>(cfg.r_max);
    const T span_x = static_cast<T>(wg - 1), span_y = static_cast<T>(hg - 1);

    if (dbg && (dbg->forced_positions || dbg->forced_weights)) k.forced = true;
    if (dbg && dbg->forced_weights) {
        if (dbg->forced_weights->size() != static_cast<size_t>(nq) * m * p)
            throw ShapeError("attention: forced weight count mismatch");
        for (size_t i = 0; i < dbg->forced_weights->size(); ++i)
            k.weights.data[i] = (*dbg->forced_weights)[i];
    }

    for (int i = 0; i < nq; ++i) {
        const std::array<T, 2>& bc = k.base[static_cast<size_t>(i)];
        T* oi = out.ptr() + static_cast<size_t>(i) * c;
        for (int mm = 0; mm < m; ++mm) {
            T cxp = bc[0], cyp = bc[1];  // sampling center, guidance px
            T hx = 0, hy = 0;            // half extents, guidance px
            if (is_roi) {
                std::array<T, 4> side;
                if (dbg && dbg->force_full_roi) {
                    side[0] = span_x > 0 ? bc[0] / span_x : T(0);
                    side[1] = span_y > 0 ? bc[1] / span_y : T(0);
                    side[2] = span_x > 0 ? (span_x - bc[0]) / span_x : T(0);
                    side[3] = span_y > 0 ? (span_y - bc[1]) / span_y : T(0);
                } else {
                    const T* rr = k.roi_raw.ptr() + static_cast<size_t>(i) * 4 * m + 4 * mm;
                    for (int s = 0; s < 4; ++s) side[static_cast<size_t>(s)] = roi_side_from_raw(rr[s], rmin, rmax);
                }
                k.sides[static_cast<size_t>(i) * m + mm] = side;
                cxp = bc[0] + (side[2] - side[0]) / T(2) * span_x;
                cyp = bc[1] + (side[3] - side[1]) / T(2) * span_y;
                hx = (side[0] + side[2]) / T(2) * span_x;
                hy = (side[1] + side[3]) / T(2) * span_y;
            }
            for (int pp = 0; pp < p; ++pp) {
                const size_t sidx = (static_cast<size_t>(i) * m + mm) * p + pp;
                T px, py;
                if (dbg && dbg->forced_positions) {
                    px = (*dbg->forced_positions)[sidx][0];
                    py = (*dbg->forced_positions)[sidx][1];
                } else {
                    const T ox = k.offsets_raw(i, (mm * p + pp) * 2 + 0);
                    const T oy = k.offsets_raw(i, (mm * p + pp) * 2 + 1);
                    if (is_roi) {
                        px = cxp + std::tanh(ox) * hx;
                        py = cyp + std::tanh(oy) * hy;
                    } else {
                        px = bc[0] + ox;
                        py = bc[1] + oy;
                    }
                }
                k.positions[sidx] = {px, py};
                // 4-tap bilinear read of head mm's value block
                const auto cell = bilinear_cell(px, py);
                const T w00 = (T(1) - cell.wx) * (T(1) - cell.wy);
                const T w01 = cell.wx * (T(1) - cell.wy);
                const T w10 = (T(1) - cell.wx) * cell.wy;
                const T w11 = cell.wx * cell.wy;
                const T wt = k.weights(i, mm * p + pp);
                for (int d = 0; d < dh; ++d) {
                    const T* plane = k.v_map.ptr() + static_cast<size_t>(mm * dh + d) * hg * wg;
                    const T val = w00 * tap(plane, hg, wg, cell.y0, cell.x0) +
                                  w01 * tap(plane, hg, wg, cell.y0, cell.x0 + 1) +
                                  w10 * tap(plane, hg, wg, cell.y0 + 1, cell.x0) +
                                  w11 * tap(plane, hg, wg, cell.y0 + 1, cell.x0 + 1);
                    k.sampled[sidx * dh + static_cast<size_t>(d)] = val;
                    oi[mm * dh + d] += wt * val;
                }
                if (dbg && dbg->taps) {
                    dbg->taps->samples += 1;
                    dbg->taps->bilinear_taps += 4;
                }
            }
        }
    }

    if (dbg && dbg->trace) {
        for (int i = 0; i < nq; ++i) {
            const int qx = i % w, qy = i / w;
            if (dbg->trace_queries) {
                bool hit = false;
                for (const auto& tq : *dbg->trace_queries)
                    if (tq.first == qx && tq.second == qy) { hit = true; break; }
                if (!hit) continue;
            }
            const std::array<T, 2>& bc = k.base[static_cast<size_t>(i)];
            for (int mm = 0; mm < m; ++mm) {
                double bl = 0, bt = 0, br = span_x, bb = span_y;
                if (is_roi) {
                    const auto& s = k.sides[static_cast<size_t>(i) * m + mm];
                    bl = static_cast<double>(bc[0] - s[0] * span_x);
                    bt = static_cast<double>(bc[1] - s[1] * span_y);
                    br = static_cast<double>(bc[0] + s[2] * span_x);
                    bb = static_cast<double>(bc[1] + s[3] * span_y);
                }
                for (int pp = 0; pp < p; ++pp) {
                    const size_t sidx = (static_cast<size_t>(i) * m + mm) * p + pp;
                    AttentionTraceRow row;
                    row.level = dbg->trace_level;
                    row.head = mm;
                    row.query_x = qx;
                    row.query_y = qy;
                    row.roi_l = bl;
                    row.roi_t = bt;
                    row.roi_r = br;
                    row.roi_b = bb;
                    row.sample_x = static_cast<double>(k.positions[sidx][0]);
                    row.sample_y = static_cast<double>(k.positions[sidx][1]);
                    row.weight = static_cast<double>(k.weights(i, mm * p + pp));
                    dbg->trace->push_back(row);
                }
            }
        }
    }
    return out;
}

// Backward through the core. grad_out is [Nq,C] wrt the head concat; returns
// grads wrt the query map and guidance map; parameter grads accumulate.
template <typename T>
void attention_core_backward(const Tensor<T>& grad_out, AttentionLayerParams<T>& lp,
                             const AttentionConfig& cfg, const AttentionCoreCache<T>& k,
                             Tensor<T>& grad_query_map, Tensor<T>& grad_guidance_map) {
    if (k.forced)
        throw ValueError("attention backward: forward ran with forced probes (forward-only)");
    const int c = k.c, m = k.m, p = k.p, dh = c / m;
    const int nq = k.h * k.w, ng = k.hg * k.wg;

    Tensor<T> g_q_proj({nq, c});
    Tensor<T> g_v_tokens({ng, c});
    Tensor<T> g_g_tokens({ng, c});

    if (k.variant == AttentionVariant::Dense) {
        Tensor<T> g_k_tokens({ng, c});
        const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
        std::vector<T> scores(static_cast<size_t>(ng)), ga(static_cast<size_t>(ng));
        for (int i = 0; i < nq; ++i) {
            const T* qi = k.q_proj.ptr() + static_cast<size_t>(i) * c;
            const T* gi = grad_out.ptr() + static_cast<size_t>(i) * c;
            for (int mm = 0; mm < m; ++mm) {
                const T* qh = qi + mm * dh;
                T mx = -std::numeric_limits<T>::infinity();
                for (int j = 0; j < ng; ++j) {
                    const T* kj = k.k_tokens.ptr() + static_cast<size_t>(j) * c + mm * dh;
                    T s = 0;
                    for (int d = 0; d < dh; ++d) s += qh[d] * kj[d];
                    scores[static_cast<size_t>(j)] = s * inv_sqrt;
                    mx = std::max(mx, scores[static_cast<size_t>(j)]);
                }
                T z = 0;
                for (int j = 0; j < ng; ++j) {
                    scores[static_cast<size_t>(j)] = std::exp(scores[static_cast<size_t>(j)] - mx);
                    z += scores[static_cast<size_t>(j)];
                }
                const T invz = T(1) / z;
                // scores[] now holds attention weights A_j after scaling
                T dot = 0;
                for (int j = 0; j < ng; ++j) {
                    scores[static_cast<size_t>(j)] *= invz;
                    const T aj = scores[static_cast<size_t>(j)];
                    const T* vj = k.v_tokens.ptr() + static_cast<size_t>(j) * c + mm * dh;
                    T gaj = 0;
                    for (int d = 0; d < dh; ++d) {
                        gaj += gi[mm * dh + d] * vj[d];
                        g_v_tokens.ptr()[static_cast<size_t>(j) * c + mm * dh + d] +=
                            aj * gi[mm * dh + d];
                    }
                    ga[static_cast<size_t>(j)] = gaj;
                    dot += aj * gaj;
                }
                for (int j = 0; j < ng; ++j) {
                    const T gs = scores[static_cast<size_t>(j)] * (ga[static_cast<size_t>(j)] - dot) * inv_sqrt;
                    const T* kj = k.k_tokens.ptr() + static_cast<size_t>(j) * c + mm * dh;
                    T* gkj = g_k_tokens.ptr() + static_cast<size_t>(j) * c + mm * dh;
                    T* gqh = g_q_proj.ptr() + static_cast<size_t>(i) * c + mm * dh;
                    for (int d = 0; d < dh; ++d) {
                        gqh[d] += gs * kj[d];
                        gkj[d] += gs * qh[d];
                    }
                }
            }
        }
        axpy(g_g_tokens, linear_backward(k.g_tokens, lp.w_key.value, g_k_tokens,
                                         lp.w_key.grad, lp.b_key.grad));
    } else {
        const bool is_roi = k.variant == AttentionVariant::Roi;
        Tensor<T> g_weights({nq, m * p});
        Tensor<T> g_offsets_raw({nq, 2 * m * p});
        Tensor<T> g_roi_raw = is_roi ? Tensor<T>({nq, 4 * m}) : Tensor<T>();
        Tensor<T> g_v_map({c, k.hg, k.wg});
        const T rmin = static_cast<T>(cfg.r_min), rmax = static_cast<T>(cfg.r_max);
        const T span_x = static_cast<T>(k.wg - 1), span_y = static_cast<T>(k.hg - 1);

        for (int i = 0; i < nq; ++i) {
            const T* gi = grad_out.ptr() + static_cast<size_t>(i) * c;
            for (int mm = 0; mm < m; ++mm) {
                T hx = 0, hy = 0;
                std::array<T, 4> side{};
                if (is_roi) {
                    side = k.sides[static_cast<size_t>(i) * m + mm];
                    hx = (side[0] + side[2]) / T(2) * span_x;
                    hy = (side[1] + side[3]) / T(2) * span_y;
                }
                T g_cx = 0, g_cy = 0, g_hx = 0, g_hy = 0;
                for (int pp = 0; pp < p; ++pp) {
                    const size_t sidx = (static_cast<size_t>(i) * m + mm) * p + pp;
                    const T wt = k.weights(i, mm * p + pp);
                    // grad wrt weight and wrt sampled values
                    T gw = 0;
                    const auto cell = bilinear_cell(k.positions[sidx][0], k.positions[sidx][1]);
                    const T w00 = (T(1) - cell.wx) * (T(1) - cell.wy);
                    const T w01 = cell.wx * (T(1) - cell.wy);
                    const T w10 = (T(1) - cell.wx) * cell.wy;
                    const T w11 = cell.wx * cell.wy;
                    T gpx = 0, gpy = 0;
                    for (int d = 0; d < dh; ++d) {
                        const T go = gi[mm * dh + d];
                        const T sval = k.sampled[sidx * dh + static_cast<size_t>(d)];
                        gw += go * sval;
                        const T gs = go * wt;  // grad wrt sampled value
                        const T* plane =
                            k.v_map.ptr() + static_cast<size_t>(mm * dh + d) * k.hg * k.wg;
                        T* gplane =
                            g_v_map.ptr() + static_cast<size_t>(mm * dh + d) * k.hg * k.wg;
                        scatter_tap(gplane, k.hg, k.wg, cell.y0, cell.x0, gs * w00);
                        scatter_tap(gplane, k.hg, k.wg, cell.y0, cell.x0 + 1, gs * w01);
                        scatter_tap(gplane, k.hg, k.wg, cell.y0 + 1, cell.x0, gs * w10);
                        scatter_tap(gplane, k.hg, k.wg, cell.y0 + 1, cell.x0 + 1, gs * w11);
                        const T v00 = tap(plane, k.hg, k.wg, cell.y0, cell.x0);
                        const T v01 = tap(plane, k.hg, k.wg, cell.y0, cell.x0 + 1);
                        const T v10 = tap(plane, k.hg, k.wg, cell.y0 + 1, cell.x0);
                        const T v11 = tap(plane, k.hg, k.wg, cell.y0 + 1, cell.x0 + 1);
                        gpx += gs * ((T(1) - cell.wy) * (v01 - v00) + cell.wy * (v11 - v10));
                        gpy += gs * ((T(1) - cell.wx) * (v10 - v00) + cell.wx * (v11 - v01));
                    }
                    g_weights(i, mm * p + pp) = gw;
                    const T ox = k.offsets_raw(i, (mm * p + pp) * 2 + 0);
                    const T oy = k.offsets_raw(i, (mm * p + pp) * 2 + 1);
                    if (is_roi) {
                        const T tx = std::tanh(ox), ty = std::tanh(oy);
                        g_offsets_raw(i, (mm * p + pp) * 2 + 0) = gpx * hx * (T(1) - tx * tx);
                        g_offsets_raw(i, (mm * p + pp) * 2 + 1) = gpy * hy * (T(1) - ty * ty);
                        g_cx += gpx;
                        g_cy += gpy;
                        g_hx += gpx * tx;
                        g_hy += gpy * ty;
                    } else {
                        g_offsets_raw(i, (mm * p + pp) * 2 + 0) = gpx;
                        g_offsets_raw(i, (mm * p + pp) * 2 + 1) = gpy;
                    }
                }
                if (is_roi) {
                    // center = base + (d_r - d_l)/2 * span; half = (d_l + d_r)/2 * span
                    T g_side[4];
                    g_side[0] = (-g_cx + g_hx) * span_x / T(2);
                    g_side[2] = (g_cx + g_hx) * span_x / T(2);
                    g_side[1] = (-g_cy + g_hy) * span_y / T(2);
                    g_side[3] = (g_cy + g_hy) * span_y / T(2);
                    const T* rr = k.roi_raw.ptr() + static_cast<size_t>(i) * 4 * m + 4 * mm;
                    T* grr = g_roi_raw.ptr() + static_cast<size_t>(i) * 4 * m + 4 * mm;
                    for (int s = 0; s < 4; ++s) {
                        const T sg = sigmoid(rr[s]);
                        grr[s] = g_side[s] * T(0.5) * (rmax - rmin) * sg * (T(1) - sg);
                    }
                }
            }
        }

        // weights came from a per-head softmax of the weight generator output
        Tensor<T> wsoft = k.weights;
        wsoft.shape = {nq * m, p};
        Tensor<T> gws = g_weights;
        gws.shape = {nq * m, p};
        Tensor<T> g_wraw = softmax_backward(wsoft, gws, 1);
        g_wraw.shape = {nq, m * p};

        axpy(g_q_proj, linear_backward(k.q_proj, lp.w_weight.value, g_wraw, lp.w_weight.grad,
                                       lp.b_weight.grad));
        axpy(g_q_proj, linear_backward(k.q_proj, lp.w_offset.value, g_offsets_raw,
                                       lp.w_offset.grad, lp.b_offset.grad));
        if (is_roi) {
            Tensor<T> g_gq = linear_backward(k.gq_tokens, lp.w_roi.value, g_roi_raw,
                                             lp.w_roi.grad, lp.b_roi.grad);
            if (k.gq_is_guidance_tokens) {
                axpy(g_g_tokens, g_gq);
            } else {
                // guidance feature at query was bilinearly sampled
                Tensor<T> g_sampled({c, nq});
                for (int ch = 0; ch < c; ++ch)
                    for (int i = 0; i < nq; ++i) g_sampled(ch, i) = g_gq(i, ch);
                Tensor<T> gmap = from_tokens(g_g_tokens, k.hg, k.wg);
                auto bb = bilinear_sample_backward(from_tokens(k.g_tokens, k.hg, k.wg), k.base,
                                                   g_sampled);
                axpy(gmap, bb.grad_feature);
                g_g_tokens = to_tokens(gmap);
            }
        }
        axpy(g_v_tokens, to_tokens(g_v_map));
    }

    axpy(g_g_tokens, linear_backward(k.g_tokens, lp.w_value.value, g_v_tokens, lp.w_value.grad,
                                     lp.b_value.grad));
    Tensor<T> g_q_tokens = linear_backward(k.q_tokens, lp.w_query.value, g_q_proj,
                                           lp.w_query.grad, lp.b_query.grad);
    axpy(grad_query_map, from_tokens(g_q_tokens, k.h, k.w));
    axpy(grad_guidance_map, from_tokens(g_g_tokens, k.hg, k.wg));
}

// ---------------------------------------------------------------------------
// Channelwise layer normalization over tokens.
// ---------------------------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
struct LayerNormCache {
    Tensor<T> xhat;        // [N,C]
    std::vector<T> istd;   // [N]
};

template <typename T>
Tensor<T> layer_norm_tokens(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                            LayerNormCache<T>* cache = nullptr) {
    const int n = x.dim(0), c = x.dim(1);
    Tensor<T> out(x.shape);
    Tensor<T> xhat(x.shape);
    std::vector<T> istds(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const T* xi = x.ptr() + static_cast<size_t>(i) * c;
        T mu = 0;
        for (int ch = 0; ch < c; ++ch) mu += xi[ch];
        mu /= static_cast<T>(c);
        T var = 0;
        for (int ch = 0; ch < c; ++ch) var += (xi[ch] - mu) * (xi[ch] - mu);
        var /= static_cast<T>(c);
        const T istd = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
        istds[static_cast<size_t>(i)] = istd;
        for (int ch = 0; ch < c; ++ch) {
            const T xh = (xi[ch] - mu) * istd;
            xhat(i, ch) = xh;
            out(i, ch) = gamma.data[static_cast<size_t>(ch)] * xh + beta.data[static_cast<size_t>(ch)];
        }
    }
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->istd = std::move(istds);
    }
    return out;
}

template <typename T>
Tensor<T> layer_norm_tokens_backward(const Tensor<T>& grad_out, const Tensor<T>& gamma,
                                     const LayerNormCache<T>& k, Tensor<T>& ggamma,
                                     Tensor<T>& gbeta) {
    const int n = grad_out.dim(0), c = grad_out.dim(1);
    Tensor<T> gx(grad_out.shape);
    for (int i = 0; i < n; ++i) {
        const T* gi = grad_out.ptr() + static_cast<size_t>(i) * c;
        const T* xh = k.xhat.ptr() + static_cast<size_t>(i) * c;
        T mean_g = 0, mean_gx = 0;
        for (int ch = 0; ch < c; ++ch) {
            const T gxh = gi[ch] * gamma.data[static_cast<size_t>(ch)];
            ggamma.data[static_cast<size_t>(ch)] += gi[ch] * xh[ch];
            gbeta.data[static_cast<size_t>(ch)] += gi[ch];
            mean_g += gxh;
            mean_gx += gxh * xh[ch];
        }
        mean_g /= static_cast<T>(c);
        mean_gx /= static_cast<T>(c);
        const T istd = k.istd[static_cast<size_t>(i)];
        for (int ch = 0; ch < c; ++ch) {
            const T gxh = gi[ch] * gamma.data[static_cast<size_t>(ch)];
            gx(i, ch) = istd * (gxh - mean_g - xh[ch] * mean_gx);
        }
    }
    return gx;
}

// ---------------------------------------------------------------------------
// The public attention operations.
// ---------------------------------------------------------------------------

// Dense cross-attention: per-head softmax over all guidance positions,
// weighted sums of value vectors, heads concatenated (Eq. 4 with the full
// sample space). No output projection here; see multi_head_merge.
template <typename T>
Tensor<T> dense_cross_attention(const Tensor<T>& query_map, const Tensor<T>& guidance,
                                AttentionLayerParams<T>& lp, const AttentionConfig& cfg,
                                AttentionCoreCache<T>* cache = nullptr,
                                const AttentionDebug<T>* dbg = nullptr) {
    AttentionConfig c2 = cfg;
    c2.variant = AttentionVariant::Dense;
    AttentionCoreCache<T> local;
    AttentionCoreCache<T>& k = cache ? *cache : local;
    Tensor<T> hc = attention_core_forward(query_map, guidance, lp, c2, k, dbg);
    return from_tokens(hc, k.h, k.w);
}

template <typename T>
void dense_cross_attention_backward(const Tensor<T>& grad_out, AttentionLayerParams<T>& lp,
                                    const AttentionConfig& cfg, const AttentionCoreCache<T>& k,
                                    Tensor<T>& gquery, Tensor<T>& gguidance) {
    attention_core_backward(to_tokens(grad_out), lp, cfg, k, gquery, gguidance);
}

// Deformable attention (unconstrained offsets) with head concat + W_O.
template <typename T>
Tensor<T> deformable_attention(const Tensor<T>& query_map, const Tensor<T>& guidance,
                               AttentionLayerParams<T>& lp, const AttentionConfig& cfg,
                               AttentionCoreCache<T>* cache = nullptr,
                               const AttentionDebug<T>* dbg = nullptr,
                               Tensor<T>* head_concat_out = nullptr) {
    AttentionConfig c2 = cfg;
    c2.variant = AttentionVariant::Deformable;
    AttentionCoreCache<T> local;
    AttentionCoreCache<T>& k = cache ? *cache : local;
    Tensor<T> hc = attention_core_forward(query_map, guidance, lp, c2, k, dbg);
    if (head_concat_out) *head_concat_out = hc;
    Tensor<T> merged = linear(hc, lp.w_out.value, lp.b_out.value);
    return from_tokens(merged, k.h, k.w);
}

template <typename T>
void deformable_attention_backward(const Tensor<T>& grad_out, const Tensor<T>& head_concat,
                                   AttentionLayerParams<T>& lp, const AttentionConfig& cfg,
                                   const AttentionCoreCache<T>& k, Tensor<T>& gquery,
                                   Tensor<T>& gguidance) {
    Tensor<T> g_merged = to_tokens(grad_out);
    Tensor<T> g_hc =
        linear_backward(head_concat, lp.w_out.value, g_merged, lp.w_out.grad, lp.b_out.grad);
    attention_core_backward(g_hc, lp, cfg, k, gquery, gguidance);
}

// Full ROI attention layer: ROI-bounded sampling, Eq. 7 merge, residual add
// and layer normalization.
template <typename T>
struct AttentionLayerCache {
    AttentionCoreCache<T> core;
    Tensor<T> head_concat;  // [Nq,C]
    Tensor<T> pre_ln;       // [Nq,C]
    LayerNormCache<T> ln;
};

template <typename T>
Tensor<T> attention_layer_forward(const Tensor<T>& x_map, const Tensor<T>& guidance,
                                  AttentionLayerParams<T>& lp, const AttentionConfig& cfg,
                                  AttentionLayerCache<T>& cache,
                                  const AttentionDebug<T>* dbg = nullptr) {
    cache.head_concat = attention_core_forward(x_map, guidance, lp, cfg, cache.core, dbg);
    Tensor<T> merged = linear(cache.head_concat, lp.w_out.value, lp.b_out.value);
    cache.pre_ln = add(cache.core.q_tokens, merged);
    Tensor<T> y = layer_norm_tokens(cache.pre_ln, lp.ln_gamma.value, lp.ln_beta.value, &cache.ln);
    return from_tokens(y, cache.core.h, cache.core.w);
}

template <typename T>
void attention_layer_backward(const Tensor<T>& grad_out, AttentionLayerParams<T>& lp,
                              const AttentionConfig& cfg, const AttentionLayerCache<T>& cache,
                              Tensor<T>& gx_map, Tensor<T>& gguidance) {
    Tensor<T> gy = to_tokens(grad_out);
    Tensor<T> g_preln = layer_norm_tokens_backward(gy, lp.ln_gamma.value, cache.ln,
                                                   lp.ln_gamma.grad, lp.ln_beta.grad);
    // residual branch
    axpy(gx_map, from_tokens(g_preln, cache.core.h, cache.core.w));
    Tensor<T> g_hc = linear_backward(cache.head_concat, lp.w_out.value, g_preln, lp.w_out.grad,
                                     lp.b_out.grad);
    attention_core_backward(g_hc, lp, cfg, cache.core, gx_map, gguidance);
}

template <typename T>
Tensor<T> roi_attention(const Tensor<T>& query_map, const Tensor<T>& guidance,
                        AttentionLayerParams<T>& lp, const AttentionConfig& cfg,
                        AttentionLayerCache<T>* cache = nullptr,
                        const AttentionDebug<T>* dbg = nullptr) {
    AttentionConfig c2 = cfg;
    c2.variant = AttentionVariant::Roi;
    AttentionLayerCache<T> local;
    AttentionLayerCache<T>& k = cache ? *cache : local;
    return attention_layer_forward(query_map, guidance, lp, c2, k, dbg);
}

template <typename T>
void roi_attention_backward(const Tensor<T>& grad_out, AttentionLayerParams<T>& lp,
                            const AttentionConfig& cfg, const AttentionLayerCache<T>& cache,
                            Tensor<T>& gquery, Tensor<T>& gguidance) {
    AttentionConfig c2 = cfg;
    c2.variant = AttentionVariant::Roi;
    attention_layer_backward(grad_out, lp, c2, cache, gquery, gguidance);
}

// Eq. 7: channel concatenation of head outputs followed by the output
// projection.
template <typename T>
Tensor<T> multi_head_merge(const std::vector<Tensor<T>>& head_outputs, const Tensor<T>& w_out,
                           const Tensor<T>& b_out) {
    if (head_outputs.empty()) throw ShapeError("multi_head_merge: no heads");
    int ctot = 0;
    for (const auto& hmap : head_outputs) {
        if (hmap.rank() != 3 || hmap.dim(1) != head_outputs[0].dim(1) ||
            hmap.dim(2) != head_outputs[0].dim(2))
            throw ShapeError("multi_head_merge: head spatial shapes differ");
        ctot += hmap.dim(0);
    }
    if (w_out.rank() != 2 || w_out.dim(0) != ctot)
        throw ShapeError("multi_head_merge: head count does not match W_O rows");
    Tensor<T> cat = head_outputs[0];
    for (size_t i = 1; i < head_outputs.size(); ++i) cat = concat_channels(cat, head_outputs[i]);
    Tensor<T> merged = linear(to_tokens(cat), w_out, b_out);
    return from_tokens(merged, cat.dim(1), cat.dim(2));
}

template <typename T>
std::vector<Tensor<T>> multi_head_merge_backward(const std::vector<Tensor<T>>& head_outputs,
                                                 const Tensor<T>& w_out, const Tensor<T>& grad_out,
                                                 Tensor<T>& gw_out, Tensor<T>& gb_out) {
    Tensor<T> cat = head_outputs[0];
    for (size_t i = 1; i < head_outputs.size(); ++i) cat = concat_channels(cat, head_outputs[i]);
    Tensor<T> tokens = to_tokens(cat);
    Tensor<T> gtokens = linear_backward(tokens, w_out, to_tokens(grad_out), gw_out, gb_out);
    Tensor<T> gcat = from_tokens(gtokens, cat.dim(1), cat.dim(2));
    std::vector<Tensor<T>> grads;
    int off = 0;
    for (const auto& hmap : head_outputs) {
        Tensor<T> gh({hmap.dim(0), hmap.dim(1), hmap.dim(2)});
        std::copy(gcat.data.begin() + static_cast<int64_t>(off) * hmap.dim(1) * hmap.dim(2),
                  gcat.data.begin() +
                      static_cast<int64_t>(off + hmap.dim(0)) * hmap.dim(1) * hmap.dim(2),
                  gh.data.begin());
        grads.push_back(std::move(gh));
        off += hmap.dim(0);
    }
    return grads;
}

// ---------------------------------------------------------------------------
// ROIFormer block: shared guidance memory (conv over the stacked branch
// features) queried by N stacked attention layers per branch.
// ---------------------------------------------------------------------------

template <typename T>
struct RoiformerBlockParams {
    Parameter<T> guide_w, guide_b;  // conv3x3, 2C -> C
    std::vector<AttentionLayerParams<T>> depth_layers;
    std::vector<AttentionLayerParams<T>> seg_layers;  // empty when parameters are tied

    std::vector<Parameter<T>*> all() {
        std::vector<Parameter<T>*> out{&guide_w, &guide_b};
        for (auto& l : depth_layers)
            for (auto* q : l.all()) out.push_back(q);
        for (auto& l : seg_layers)
            for (auto* q : l.all()) out.push_back(q);
        return out;
    }
};

template <typename T>
RoiformerBlockParams<T> make_roiformer_block_params(int c, const AttentionConfig& cfg,
                                                    std::mt19937_64& rng) {
    RoiformerBlockParams<T> bp;
    bp.guide_w = Parameter<T>::uniform_init({c, 2 * c, 3, 3}, 2 * c * 9, rng);
    bp.guide_b = Parameter<T>(Tensor<T>({c}));
    for (int n = 0; n < cfg.layers; ++n)
        bp.depth_layers.push_back(make_attention_params<T>(c, cfg.heads, cfg.points, rng));
    if (!cfg.tie_branch_params)
        for (int n = 0; n < cfg.layers; ++n)
            bp.seg_layers.push_back(make_attention_params<T>(c, cfg.heads, cfg.points, rng));
    return bp;
}

template <typename T>
struct RoiformerBlockCache {
    Tensor<T> concat_in;
    Tensor<T> guidance;
    std::vector<Tensor<T>> d_inputs, s_inputs;  // layer inputs
    std::vector<AttentionLayerCache<T>> d_caches, s_caches;
};

// N = 0 degenerates to concatenation + convolution: both branches receive the
// shared guidance map itself.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> roiformer_block(const Tensor<T>& depth_feat,
                                                const Tensor<T>& seg_feat,
                                                RoiformerBlockParams<T>& bp,
                                                const AttentionConfig& cfg,
                                                RoiformerBlockCache<T>& k,
                                                const AttentionDebug<T>* dbg = nullptr) {
    check_same_shape(depth_feat, seg_feat, "roiformer_block");
    k.concat_in = concat_channels(depth_feat, seg_feat);
    k.guidance = conv2d_3x3(k.concat_in, bp.guide_w.value, bp.guide_b.value, 1);
    const int n = cfg.layers;
    if (n == 0) return {k.guidance, k.guidance};

    AttentionDebug<T> taps_only;
    if (dbg) {
        taps_only = *dbg;
        taps_only.trace = nullptr;  // trace only on the last depth layer
    }

    k.d_caches.resize(static_cast<size_t>(n));
    k.s_caches.resize(static_cast<size_t>(n));
    k.d_inputs.clear();
    k.s_inputs.clear();

    Tensor<T> xd = depth_feat;
    for (int i = 0; i < n; ++i) {
        k.d_inputs.push_back(xd);
        const AttentionDebug<T>* layer_dbg = nullptr;
        if (dbg) layer_dbg = (i == n - 1) ? dbg : &taps_only;
        xd = attention_layer_forward(xd, k.guidance, bp.depth_layers[static_cast<size_t>(i)], cfg,
                                     k.d_caches[static_cast<size_t>(i)], layer_dbg);
    }
    Tensor<T> xs = seg_feat;
    auto& seg_params = cfg.tie_branch_params ? bp.depth_layers : bp.seg_layers;
    for (int i = 0; i < n; ++i) {
        k.s_inputs.push_back(xs);
        const AttentionDebug<T>* layer_dbg = dbg ? &taps_only : nullptr;
        xs = attention_layer_forward(xs, k.guidance, seg_params[static_cast<size_t>(i)], cfg,
                                     k.s_caches[static_cast<size_t>(i)], layer_dbg);
    }
    return {xd, xs};
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> roiformer_block_backward(const Tensor<T>& grad_depth_out,
                                                         const Tensor<T>& grad_seg_out,
                                                         RoiformerBlockParams<T>& bp,
                                                         const AttentionConfig& cfg,
                                                         const RoiformerBlockCache<T>& k) {
    const int n = cfg.layers;
    Tensor<T> g_guidance(k.guidance.shape);
    Tensor<T> gd(k.d_inputs.empty() ? k.guidance.shape : k.d_inputs[0].shape);
    Tensor<T> gs(gd.shape);

    if (n == 0) {
        axpy(g_guidance, grad_depth_out);
        axpy(g_guidance, grad_seg_out);
    } else {
        Tensor<T> gx = grad_depth_out;
        for (int i = n - 1; i >= 0; --i) {
            Tensor<T> gin(k.d_inputs[static_cast<size_t>(i)].shape);
            attention_layer_backward(gx, bp.depth_layers[static_cast<size_t>(i)], cfg,
                                     k.d_caches[static_cast<size_t>(i)], gin, g_guidance);
            gx = std::move(gin);
        }
        gd = gx;
        auto& seg_params = cfg.tie_branch_params ? bp.depth_layers : bp.seg_layers;
        gx = grad_seg_out;
        for (int i = n - 1; i >= 0; --i) {
            Tensor<T> gin(k.s_inputs[static_cast<size_t>(i)].shape);
            attention_layer_backward(gx, seg_params[static_cast<size_t>(i)], cfg,
                                     k.s_caches[static_cast<size_t>(i)], gin, g_guidance);
            gx = std::move(gin);
        }
        gs = gx;
    }

    Tensor<T> g_concat = conv2d_3x3_backward(k.concat_in, bp.guide_w.value, g_guidance, 1,
                                             bp.guide_w.grad, bp.guide_b.grad);
    Tensor<T> gd_cat, gs_cat;
    split_channels(g_concat, gd.dim(0), gd_cat, gs_cat);
    axpy(gd, gd_cat);
    axpy(gs, gs_cat);
    return {std::move(gd), std::move(gs)};
}

}  // namespace roiformer
