#pragma once

#include <chrono>
#include <functional>
#include <memory>

#include "roiformer/io.hpp"
#include "roiformer/losses.hpp"
#include "roiformer/metrics.hpp"
#include "roiformer/model.hpp"
#include "roiformer/scene.hpp"
#include "roiformer/semantic_mask.hpp"
#include "roiformer/train_config.hpp"

namespace roiformer {

// ---------------------------------------------------------------------------
// Adam with parameter groups (model vs pose learning rates) and the step-wise
// x0.1 decay at 50% and 75% of the schedule.
// ---------------------------------------------------------------------------

template <typename T>
class Adam {
public:
    struct Group {
        std::vector<Parameter<T>*> params;
        double lr = 1e-4;
        bool frozen = false;
    };

    explicit Adam(std::vector<Group> groups, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8)
        : groups_(std::move(groups)), b1_(beta1), b2_(beta2), eps_(eps) {
        for (auto& g : groups_)
            for (auto* p : g.params) {
                m_.emplace_back(p->value.shape);
                v_.emplace_back(p->value.shape);
            }
    }

    void step(double lr_scale) {
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, t_);
        const double bc2 = 1.0 - std::pow(b2_, t_);
        size_t idx = 0;
        for (auto& g : groups_) {
            for (auto* p : g.params) {
                Tensor<T>& m = m_[idx];
                Tensor<T>& v = v_[idx];
                ++idx;
                if (g.frozen) continue;
                const T lr = static_cast<T>(g.lr * lr_scale);
                for (int64_t i = 0; i < p->value.numel(); ++i) {
                    const T gr = p->grad.data[i];
                    m.data[i] = static_cast<T>(b1_) * m.data[i] + (T(1) - static_cast<T>(b1_)) * gr;
                    v.data[i] =
                        static_cast<T>(b2_) * v.data[i] + (T(1) - static_cast<T>(b2_)) * gr * gr;
                    const T mhat = m.data[i] / static_cast<T>(bc1);
                    const T vhat = v.data[i] / static_cast<T>(bc2);
                    p->value.data[i] -= lr * mhat / (std::sqrt(vhat) + static_cast<T>(eps_));
                }
            }
        }
    }

    void zero_grad() {
        for (auto& g : groups_)
            for (auto* p : g.params) p->zero_grad();
    }

    std::vector<Group>& groups() { return groups_; }

private:
    std::vector<Group> groups_;
    std::vector<Tensor<T>> m_, v_;
    double b1_, b2_, eps_;
    int64_t t_ = 0;
};

inline double lr_decay_factor(int step, int total_steps) {
    double f = 1.0;
    if (step >= total_steps / 2) f *= 0.1;
    if (step >= (3 * total_steps) / 4) f *= 0.1;
    return f;
}

// ---------------------------------------------------------------------------
// Training session: one synthetic scene, joint optimization of the model and
// the two frame-pair poses.
// ---------------------------------------------------------------------------

struct StepLog {
    int step = 0;
    double total = 0, photo = 0, smooth = 0, seg = 0;
    double lr = 0;
};

template <typename T>
struct TrainOutcome {
    std::vector<StepLog> log;
    EvalResult initial_eval, final_eval;
    double wall_seconds = 0;
    int64_t param_count = 0;
    long long bilinear_taps_per_query = 0;  // per query, per fused layer pass
    long long key_dots_per_query = 0;
    Tensor<T> final_mask;
    DepthMap<T> final_depth;
};

template <typename T>
class TrainSession {
public:
    TrainSession(const RunConfig& run, uint64_t model_seed_offset = 1)
        : run_(run),
          scene_(generate_scene<T>(run.seed, run.scene())),
          model_(run.model, run.seed + model_seed_offset),
          pose_prev_(Tensor<T>({6})),
          pose_next_(Tensor<T>({6})) {
        run_.validate();
        if (run_.use_gt_pose) {
            set_pose(pose_prev_, scene_.pose_to_prev);
            set_pose(pose_next_, scene_.pose_to_next);
        }
        typename Adam<T>::Group model_group{model_.parameters(), run_.lr, false};
        typename Adam<T>::Group pose_group{{&pose_prev_, &pose_next_}, run_.pose_lr,
                                           run_.freeze_pose};
        opt_ = std::make_unique<Adam<T>>(
            std::vector<typename Adam<T>::Group>{model_group, pose_group});
    }

    const Scene<T>& scene() const { return scene_; }
    DepthSegModel<T>& model() { return model_; }
    Pose<T> pose_to_prev() const { return Pose<T>::from_array(to_array(pose_prev_)); }
    Pose<T> pose_to_next() const { return Pose<T>::from_array(to_array(pose_next_)); }

    // Forward-only depth prediction at full resolution (finest scale).
    DepthMap<T> predict_depth(const ModelDebug<T>* dbg = nullptr) {
        ModelCache<T> cache;
        ModelOutput<T> out = model_.forward(scene_.img_curr, cache, dbg);
        return depth_head(out.disp_logits[0], static_cast<T>(run_.model.d_min),
                          static_cast<T>(run_.model.d_max));
    }

    EvalResult evaluate_current() {
        EvalOptions opts;
        opts.clamp_max = run_.model.d_max;
        return evaluate(predict_depth(), scene_.gt_depth, opts);
    }

    // One optimization step; returns the logged loss terms.
    StepLog train_step(int step_index) {
        opt_->zero_grad();

        ModelCache<T> cache;
        ModelOutput<T> out = model_.forward(scene_.img_curr, cache);
        const T d_min = static_cast<T>(run_.model.d_min), d_max = static_cast<T>(run_.model.d_max);
        const int h = scene_.img_curr.dim(1), w = scene_.img_curr.dim(2);
        const int scales = run_.scales;

        // Confidence mask from the finest-scale depth, treated as a constant.
        DepthMap<T> depth0 = depth_head(out.disp_logits[0], d_min, d_max);
        Tensor<T> mu = Tensor<T>::full({1, h, w}, T(1));
        if (run_.mask_enabled) {
            mu = confidence_mask(depth0, scene_.gt_seg, scene_.cam, run_.mask).mask;
        }

        Tensor<T> g_seg(out.seg_logits.shape);
        const T seg_loss = cross_entropy_seg(out.seg_logits, scene_.gt_seg.class_ids, &g_seg);
        for (auto& v : g_seg.data) v *= static_cast<T>(run_.loss.gamma_seg);

        const Pose<T> pose_p = pose_to_prev();
        const Pose<T> pose_n = pose_to_next();
        const std::array<const Tensor<T>*, 2> sources{&scene_.img_prev, &scene_.img_next};
        const std::array<const Pose<T>*, 2> poses{&pose_p, &pose_n};
        constexpr T kInvalidLoss = T(1e4);

        std::array<Tensor<T>, 4> g_logits;
        for (int s = 0; s < 4; ++s) g_logits[static_cast<size_t>(s)] = Tensor<T>(out.disp_logits[static_cast<size_t>(s)].shape);
        std::array<T, 6> g_pose_prev{}, g_pose_next{};

        double photo_acc = 0, smooth_acc = 0;
        const T inv_scales = T(1) / static_cast<T>(scales);

        for (int s = 0; s < scales; ++s) {
            DepthMap<T> depth_s = depth_head(out.disp_logits[static_cast<size_t>(s)], d_min, d_max);
            Tensor<T> depth_full_t = upsample_to(depth_s.values, h, w);
            DepthMap<T> depth_full(depth_full_t);

            std::vector<Tensor<T>> cands;
            std::array<WarpCache<T>, 2> wcaches;
            std::array<PhotometricCache<T>, 2> pcaches;
            std::array<Tensor<T>, 2> warped_imgs, valids;
            for (int f = 0; f < 2; ++f) {
                WarpResult<T> wr = inverse_warp(*sources[static_cast<size_t>(f)], depth_full,
                                                *poses[static_cast<size_t>(f)], scene_.cam,
                                                &wcaches[static_cast<size_t>(f)]);
                Tensor<T> pe = photometric_loss(scene_.img_curr, wr.warped, run_.loss,
                                                &pcaches[static_cast<size_t>(f)]);
                for (int64_t i = 0; i < pe.numel(); ++i)
                    pe.data[i] += (T(1) - wr.valid.data[i]) * kInvalidLoss;
                warped_imgs[static_cast<size_t>(f)] = std::move(wr.warped);
                valids[static_cast<size_t>(f)] = std::move(wr.valid);
                cands.push_back(std::move(pe));
            }
            std::vector<int> argmin;
            Tensor<T> minmap = min_reprojection(cands, &argmin);

            // weight = mask * (any source valid); pixels invalid everywhere drop out
            Tensor<T> weight = mu;
            for (int64_t i = 0; i < weight.numel(); ++i) {
                const T any = std::max(valids[0].data[i], valids[1].data[i]);
                weight.data[i] *= any;
            }

            Tensor<T> g_depth_full({1, h, w});
            const T smooth_val =
                smoothness_loss(depth_full.values, scene_.img_curr, run_.smooth_mean_normalize,
                                &g_depth_full);
            // smoothness grad enters with beta/scales
            for (auto& v : g_depth_full.data)
                v *= static_cast<T>(run_.loss.beta_smooth) * inv_scales;

            double photo_term = 0;
            for (int64_t i = 0; i < minmap.numel(); ++i)
                photo_term += static_cast<double>(minmap.data[i] * weight.data[i]);
            photo_term /= static_cast<double>(minmap.numel());
            photo_acc += photo_term;
            smooth_acc += static_cast<double>(smooth_val);

            // backward: total contribution of this scale is
            // (mean(weight*minmap) + beta*smooth) / scales
            Tensor<T> g_min = total_loss_backward_photo(weight, inv_scales);
            std::vector<Tensor<T>> g_cands =
                min_reprojection_backward(argmin, 2, minmap.shape, g_min);
            for (int f = 0; f < 2; ++f) {
                Tensor<T> g_warped({3, h, w});
                Tensor<T> g_target({3, h, w});  // target image grad is discarded
                photometric_loss_backward(scene_.img_curr, warped_imgs[static_cast<size_t>(f)],
                                          run_.loss, pcaches[static_cast<size_t>(f)],
                                          g_cands[static_cast<size_t>(f)], g_target, g_warped);
                WarpGrads<T> wg = inverse_warp_backward(*sources[static_cast<size_t>(f)],
                                                        depth_full,
                                                        wcaches[static_cast<size_t>(f)], g_warped);
                axpy(g_depth_full, wg.grad_depth);
                auto& gp = f == 0 ? g_pose_prev : g_pose_next;
                for (int j = 0; j < 6; ++j) gp[static_cast<size_t>(j)] += wg.grad_pose[static_cast<size_t>(j)];
            }

            Tensor<T> g_depth_s = upsample_to_backward(g_depth_full, depth_s.values.dim(1),
                                                       depth_s.values.dim(2));
            axpy(g_logits[static_cast<size_t>(s)],
                 depth_head_backward(out.disp_logits[static_cast<size_t>(s)], d_min, d_max,
                                     g_depth_s));
        }

        for (int j = 0; j < 6; ++j) {
            pose_prev_.grad.data[static_cast<size_t>(j)] += g_pose_prev[static_cast<size_t>(j)];
            pose_next_.grad.data[static_cast<size_t>(j)] += g_pose_next[static_cast<size_t>(j)];
        }
        model_.backward(g_logits, g_seg, cache);

        StepLog log;
        log.step = step_index;
        log.photo = photo_acc / scales;
        log.smooth = smooth_acc / scales;
        log.seg = static_cast<double>(seg_loss);
        log.total = log.photo + run_.loss.beta_smooth * log.smooth + run_.loss.gamma_seg * log.seg;
        log.lr = run_.lr * lr_decay_factor(step_index, run_.steps);
        if (!std::isfinite(log.total))
            throw ValueError("train: non-finite loss at step " + std::to_string(step_index));

        opt_->step(lr_decay_factor(step_index, run_.steps));
        return log;
    }

    TrainOutcome<T> run(const std::function<void(const StepLog&)>& on_step = nullptr) {
        TrainOutcome<T> out;
        out.param_count = model_.parameter_count();
        out.initial_eval = evaluate_current();

        // One instrumented probe forward for the complexity numbers.
        {
            TapCounter taps;
            ModelDebug<T> dbg;
            dbg.taps = &taps;
            ModelCache<T> cache;
            model_.forward(scene_.img_curr, cache, &dbg);
            if (taps.queries > 0) {
                out.bilinear_taps_per_query = taps.bilinear_taps / taps.queries;
                out.key_dots_per_query = taps.key_dots / taps.queries;
            }
        }

        const auto t0 = std::chrono::steady_clock::now();
        for (int s = 0; s < run_.steps; ++s) {
            StepLog log = train_step(s);
            out.log.push_back(log);
            if (on_step) on_step(log);
        }
        out.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        out.final_eval = evaluate_current();
        out.final_depth = predict_depth();
        if (run_.mask_enabled) {
            out.final_mask =
                confidence_mask(out.final_depth, scene_.gt_seg, scene_.cam, run_.mask).mask;
        } else {
            out.final_mask = Tensor<T>::full({1, scene_.img_curr.dim(1), scene_.img_curr.dim(2)},
                                             T(1));
        }
        return out;
    }

    std::vector<std::pair<std::string, Parameter<T>*>> named_parameters() {
        auto out = model_.named_parameters();
        out.emplace_back("pose_to_prev", &pose_prev_);
        out.emplace_back("pose_to_next", &pose_next_);
        return out;
    }

    const RunConfig& config() const { return run_; }

private:
    static void set_pose(Parameter<T>& p, const Pose<T>& pose) {
        const auto a = pose.as_array();
        for (int i = 0; i < 6; ++i) p.value.data[static_cast<size_t>(i)] = a[static_cast<size_t>(i)];
    }
    static std::array<T, 6> to_array(const Parameter<T>& p) {
        std::array<T, 6> a;
        for (int i = 0; i < 6; ++i) a[static_cast<size_t>(i)] = p.value.data[static_cast<size_t>(i)];
        return a;
    }

    RunConfig run_;
    Scene<T> scene_;
    DepthSegModel<T> model_;
    Parameter<T> pose_prev_, pose_next_;
    std::unique_ptr<Adam<T>> opt_;
};

}  // namespace roiformer
