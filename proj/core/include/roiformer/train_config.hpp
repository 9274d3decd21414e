#pragma once

#include <sstream>

#include "roiformer/io.hpp"
#include "roiformer/losses.hpp"
#include "roiformer/model.hpp"
#include "roiformer/scene.hpp"
#include "roiformer/semantic_mask.hpp"

namespace roiformer {

// Full run description: everything a training run depends on, parseable from
// (and serializable to) the plain-text config format.
struct RunConfig {
    uint64_t seed = 0;
    int width = 192;
    int height = 64;
    int steps = 500;
    double lr = 1e-4;
    double pose_lr = 1e-2;
    bool use_gt_pose = false;
    bool freeze_pose = false;
    bool mask_enabled = true;
    int scales = 4;
    bool smooth_mean_normalize = false;
    SceneLayout layout = SceneLayout::Full;
    LossWeights loss;
    ModelConfig model;
    MaskConfig mask;

    SceneConfig scene() const { return {width, height, layout}; }

    void validate() const {
        if (steps <= 0) throw ValueError("RunConfig: steps must be positive");
        if (width % 32 || height % 32)
            throw ValueError("RunConfig: image size must be divisible by 32");
        if (scales < 1 || scales > 4) throw ValueError("RunConfig: scales in [1,4]");
        loss.validate();
        model.validate();
        mask.validate();
    }

    static AttentionVariant parse_variant(const std::string& s) {
        if (s == "dense") return AttentionVariant::Dense;
        if (s == "deformable") return AttentionVariant::Deformable;
        if (s == "roi") return AttentionVariant::Roi;
        throw ValueError("unknown attention variant: " + s);
    }

    static RunConfig from_config(const ConfigFile& cf) {
        RunConfig r;
        r.seed = static_cast<uint64_t>(cf.get_int("run", "seed", 0));
        r.width = cf.get_int("run", "width", 192);
        r.height = cf.get_int("run", "height", 64);
        r.steps = cf.get_int("run", "steps", 500);
        r.lr = cf.get_double("run", "lr", 1e-4);
        r.pose_lr = cf.get_double("run", "pose_lr", 1e-2);
        r.use_gt_pose = cf.get_bool("run", "use_gt_pose", false);
        r.freeze_pose = cf.get_bool("run", "freeze_pose", false);
        r.mask_enabled = cf.get_bool("run", "mask", true);
        r.scales = cf.get_int("run", "scales", 4);
        r.layout = cf.get_string("scene", "layout", "full") == "plane" ? SceneLayout::Plane
                                                                       : SceneLayout::Full;
        r.loss.alpha_photo = cf.get_double("loss", "alpha", 0.85);
        r.loss.beta_smooth = cf.get_double("loss", "beta", 1e-3);
        r.loss.gamma_seg = cf.get_double("loss", "gamma", 0.5);
        r.smooth_mean_normalize = cf.get_bool("loss", "smooth_mean_normalize", false);

        const auto ch = cf.get_int_list("model", "channels", {64, 32, 16, 16, 8});
        if (ch.size() != 5) throw ValueError("config: model.channels needs 5 entries (P6..P2)");
        for (int i = 0; i < 5; ++i) r.model.channels[static_cast<size_t>(i)] = ch[static_cast<size_t>(i)];
        r.model.fusion_levels = cf.get_int_list("model", "fusion_levels", {3, 4, 5});
        r.model.d_min = cf.get_double("model", "d_min", 0.1);
        r.model.d_max = cf.get_double("model", "d_max", 80.0);
        r.model.seg_classes = cf.get_int("model", "seg_classes", 3);
        r.model.points_per_level = cf.get_int_list("attention", "points", {8, 16, 32});

        r.model.attn.heads = cf.get_int("attention", "heads", 4);
        r.model.attn.layers = cf.get_int("attention", "layers", 2);
        r.model.attn.r_min = cf.get_double("attention", "r_min", 0.3);
        r.model.attn.r_max = cf.get_double("attention", "r_max", 0.7);
        r.model.attn.variant = parse_variant(cf.get_string("attention", "variant", "roi"));
        r.model.attn.tie_branch_params = cf.get_bool("attention", "tie_branch_params", false);

        r.mask.k_neighbors = cf.get_int("mask", "k", 5);
        r.mask.alpha_decay = cf.get_double("mask", "alpha_decay", 1.0);
        return r;
    }

    ConfigFile to_config() const {
        ConfigFile cf;
        auto num = [](double v) {
            std::ostringstream ss;
            ss.precision(17);
            ss << v;
            return ss.str();
        };
        cf.set("run", "seed", std::to_string(seed));
        cf.set("run", "width", std::to_string(width));
        cf.set("run", "height", std::to_string(height));
        cf.set("run", "steps", std::to_string(steps));
        cf.set("run", "lr", num(lr));
        cf.set("run", "pose_lr", num(pose_lr));
        cf.set("run", "use_gt_pose", use_gt_pose ? "true" : "false");
        cf.set("run", "freeze_pose", freeze_pose ? "true" : "false");
        cf.set("run", "mask", mask_enabled ? "true" : "false");
        cf.set("run", "scales", std::to_string(scales));
        cf.set("scene", "layout", layout == SceneLayout::Plane ? "plane" : "full");
        cf.set("loss", "alpha", num(loss.alpha_photo));
        cf.set("loss", "beta", num(loss.beta_smooth));
        cf.set("loss", "gamma", num(loss.gamma_seg));
        cf.set("loss", "smooth_mean_normalize", smooth_mean_normalize ? "true" : "false");
        {
            std::ostringstream ss;
            for (int i = 0; i < 5; ++i) ss << (i ? "," : "") << model.channels[static_cast<size_t>(i)];
            cf.set("model", "channels", ss.str());
        }
        {
            std::ostringstream ss;
            for (size_t i = 0; i < model.fusion_levels.size(); ++i)
                ss << (i ? "," : "") << model.fusion_levels[i];
            cf.set("model", "fusion_levels", ss.str());
        }
        cf.set("model", "d_min", num(model.d_min));
        cf.set("model", "d_max", num(model.d_max));
        cf.set("model", "seg_classes", std::to_string(model.seg_classes));
        {
            std::ostringstream ss;
            for (size_t i = 0; i < model.points_per_level.size(); ++i)
                ss << (i ? "," : "") << model.points_per_level[i];
            cf.set("attention", "points", ss.str());
        }
        cf.set("attention", "heads", std::to_string(model.attn.heads));
        cf.set("attention", "layers", std::to_string(model.attn.layers));
        cf.set("attention", "r_min", num(model.attn.r_min));
        cf.set("attention", "r_max", num(model.attn.r_max));
        cf.set("attention", "variant", variant_name(model.attn.variant));
        cf.set("attention", "tie_branch_params", model.attn.tie_branch_params ? "true" : "false");
        cf.set("mask", "k", std::to_string(mask.k_neighbors));
        cf.set("mask", "alpha_decay", num(mask.alpha_decay));
        return cf;
    }
};

}  // namespace roiformer
