// Command-line harness: scene generation, desk-scale training, depth metric
// evaluation, attention-variant comparison, gradient certification and
// attention visualization dumps.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "roiformer/gradcheck_suite.hpp"
#include "roiformer/harness.hpp"

namespace fs = std::filesystem;
using namespace roiformer;

namespace {

int cmd_gradcheck(int seeds) {
    int fails = 0;
    print_report_header();
    for (auto& c : gradcheck_suite()) {
        GradReport merged;
        std::vector<GradReport> parts;
        for (int s = 1; s <= seeds; ++s) parts.push_back(c.run(static_cast<uint64_t>(s)));
        merged = merge_reports(c.name, parts);
        print_report(merged);
        if (!merged.pass) ++fails;
    }
    if (fails) std::fprintf(stderr, "gradcheck: %d op(s) FAILED\n", fails);
    return fails ? 1 : 0;
}

RunConfig load_run_config(const std::string& path) {
    if (path.empty()) return RunConfig{};
    return RunConfig::from_config(ConfigFile::parse_file(path));
}

int cmd_gen_scene(uint64_t seed, const std::string& out_dir, int width, int height) {
    fs::create_directories(out_dir);
    SceneConfig cfg{width, height, SceneLayout::Full};
    Scene<float> scene = generate_scene<float>(seed, cfg);
    ppm_write(out_dir + "/img_prev.ppm", scene.img_prev);
    ppm_write(out_dir + "/img_curr.ppm", scene.img_curr);
    ppm_write(out_dir + "/img_next.ppm", scene.img_next);
    rtns_write(out_dir + "/gt_depth.rtns", scene.gt_depth.values);
    pgm_write_normalized(out_dir + "/gt_depth.pgm", scene.gt_depth.values);
    Tensor<float> seg_f({1, height, width});
    for (int64_t i = 0; i < seg_f.numel(); ++i)
        seg_f.data[static_cast<size_t>(i)] =
            static_cast<float>(scene.gt_seg.class_ids.data[static_cast<size_t>(i)]);
    rtns_write(out_dir + "/gt_seg.rtns", seg_f);
    for (auto& v : seg_f.data) v /= 2.0f;
    pgm_write(out_dir + "/gt_seg.pgm", seg_f);

    CameraFixture fixture;
    fixture.cam = {scene.cam.fx, scene.cam.fy, scene.cam.cx, scene.cam.cy};
    auto to_d = [](const Pose<float>& p) {
        Pose<double> q;
        q.rotation = {p.rotation.x, p.rotation.y, p.rotation.z};
        q.translation = {p.translation.x, p.translation.y, p.translation.z};
        return q;
    };
    fixture.poses.push_back(to_d(scene.pose_to_prev));
    fixture.poses.push_back(to_d(scene.pose_to_next));
    camera_fixture_write(out_dir + "/camera.txt", fixture);
    std::cout << "scene written to " << out_dir << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir) {
    fs::create_directories(out_dir);
    RunConfig run = load_run_config(config_path);
    TrainSession<float> session(run);
    std::cout << "training: " << run.steps << " steps, " << run.width << "x" << run.height
              << ", variant " << variant_name(run.model.attn.variant) << "\n";
    TrainOutcome<float> out = session.run([&](const StepLog& l) {
        if (l.step % 50 == 0 || l.step == run.steps - 1)
            std::printf("step %4d  total %.6f  photo %.6f  smooth %.6f  seg %.6f\n", l.step,
                        l.total, l.photo, l.smooth, l.seg);
    });
    write_metrics_csv(out_dir + "/metrics.csv", out.log, out.initial_eval, out.final_eval);
    save_session_checkpoint(out_dir + "/checkpoint.rckp", session);
    {
        std::ofstream cfg(out_dir + "/config.ini");
        cfg << run.to_config().serialize();
    }
    rtns_write_as(out_dir + "/final_depth.rtns", out.final_depth.values);
    pgm_write_normalized(out_dir + "/final_depth.pgm", out.final_depth.values.cast<float>());
    rtns_write_as(out_dir + "/mask.rtns", out.final_mask);
    pgm_write(out_dir + "/mask.pgm", out.final_mask.cast<float>());
    const EvalResult& e = out.final_eval;
    std::printf("initial: %s\n", eval_csv_row(out.initial_eval).c_str());
    std::printf("final:   %s\n", eval_csv_row(e).c_str());
    std::printf("wall: %.1fs  params: %lld  taps/query: %lld\n", out.wall_seconds,
                static_cast<long long>(out.param_count),
                static_cast<long long>(out.bilinear_taps_per_query));
    return 0;
}

int cmd_eval(const std::string& pred_path, const std::string& gt_path, bool no_scale) {
    DepthMap<float> pred(rtns_read(pred_path));
    DepthMap<float> gt(rtns_read(gt_path));
    EvalOptions opts;
    opts.median_scale = !no_scale;
    EvalResult r = evaluate(pred, gt, opts);
    std::cout << eval_csv_header() << "\n" << eval_csv_row(r) << "\n";
    return 0;
}

int cmd_compare_attn(const std::string& config_path, const std::string& out_path, int width2,
                     int height2) {
    RunConfig run = load_run_config(config_path);
    if (width2 <= 0) width2 = run.width * 2;
    if (height2 <= 0) height2 = run.height * 2;
    auto rows = compare_attention<float>(run, width2, height2,
                                         [](const std::string& m) { std::cout << m << "\n"; });
    std::ofstream out(out_path);
    if (!out) throw ValueError("cannot write " + out_path);
    out << compare_csv_header() << "\n";
    std::cout << compare_csv_header() << "\n";
    for (const auto& r : rows) {
        out << compare_csv_row(r) << "\n";
        std::cout << compare_csv_row(r) << "\n";
    }
    std::cout << "table written to " << out_path << "\n";
    return 0;
}

int cmd_dump_attn(const std::string& ckpt, const std::vector<std::string>& queries, int level,
                  const std::string& out_path) {
    auto session = load_session_checkpoint<float>(ckpt);
    std::vector<std::pair<int, int>> pts;
    for (const auto& q : queries) {
        const size_t comma = q.find(',');
        if (comma == std::string::npos)
            throw ValueError("dump-attn: query must be x,y: " + q);
        pts.emplace_back(std::stoi(q.substr(0, comma)), std::stoi(q.substr(comma + 1)));
    }
    AttentionTrace trace = dump_attention(*session, level, pts);
    std::ofstream out(out_path);
    if (!out) throw ValueError("cannot write " + out_path);
    out << attention_trace_csv_header() << "\n";
    for (const auto& row : trace) out << attention_trace_csv_row(row) << "\n";
    std::cout << trace.size() << " rows written to " << out_path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ROI-guided deformable attention depth estimation harness"};
    app.require_subcommand(1);

    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient certification");
    int gc_seeds = 3;
    gc->add_option("--seeds", gc_seeds, "random seeds per op");

    auto* gs = app.add_subcommand("gen-scene", "generate a synthetic scene");
    uint64_t gs_seed = 0;
    std::string gs_out = "scene_out";
    int gs_w = 192, gs_h = 64;
    gs->add_option("--seed", gs_seed, "scene seed");
    gs->add_option("--out", gs_out, "output directory")->required();
    gs->add_option("--width", gs_w, "image width");
    gs->add_option("--height", gs_h, "image height");

    auto* tr = app.add_subcommand("train", "train on a synthetic scene");
    std::string tr_config, tr_out = "train_out";
    tr->add_option("--config", tr_config, "config file (key=value sections)");
    tr->add_option("--out-dir", tr_out, "output directory")->required();

    auto* ev = app.add_subcommand("eval", "depth metrics between two RTNS depth maps");
    std::string ev_pred, ev_gt;
    bool ev_noscale = false;
    ev->add_option("--pred", ev_pred, "predicted depth (RTNS)")->required();
    ev->add_option("--gt", ev_gt, "ground-truth depth (RTNS)")->required();
    ev->add_flag("--no-median-scale", ev_noscale, "skip median-ratio rescaling");

    auto* ca = app.add_subcommand("compare-attn", "train dense/deformable/roi at two sizes");
    std::string ca_config, ca_out = "compare_attn.csv";
    int ca_w2 = 0, ca_h2 = 0;
    ca->add_option("--config", ca_config, "base config file");
    ca->add_option("--out", ca_out, "output CSV path");
    ca->add_option("--width2", ca_w2, "second resolution width (default 2x)");
    ca->add_option("--height2", ca_h2, "second resolution height (default 2x)");

    auto* da = app.add_subcommand("dump-attn", "dump ROI boxes/samples/weights at queries");
    std::string da_ckpt, da_out = "attention.csv";
    std::vector<std::string> da_queries;
    int da_level = 3;
    da->add_option("--ckpt", da_ckpt, "checkpoint file")->required();
    da->add_option("--query", da_queries, "query position x,y in image pixels")->required();
    da->add_option("--level", da_level, "fused pyramid level");
    da->add_option("--out", da_out, "output CSV path");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gc->parsed()) return cmd_gradcheck(gc_seeds);
        if (gs->parsed()) return cmd_gen_scene(gs_seed, gs_out, gs_w, gs_h);
        if (tr->parsed()) return cmd_train(tr_config, tr_out);
        if (ev->parsed()) return cmd_eval(ev_pred, ev_gt, ev_noscale);
        if (ca->parsed()) return cmd_compare_attn(ca_config, ca_out, ca_w2, ca_h2);
        if (da->parsed()) return cmd_dump_attn(da_ckpt, da_queries, da_level, da_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
