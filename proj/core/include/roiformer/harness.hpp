#pragma once

#include <fstream>

#include "roiformer/train.hpp"

namespace roiformer {

// ---------------------------------------------------------------------------
// Checkpointing a training session (model + pose parameters + config).
// ---------------------------------------------------------------------------

template <typename T>
void save_session_checkpoint(const std::string& path, TrainSession<T>& session) {
    CheckpointData data;
    data.config_text = session.config().to_config().serialize();
    for (auto& [name, p] : session.named_parameters())
        data.tensors.emplace_back(name, p->value.template cast<float>());
    checkpoint_save(path, data);
}

template <typename T>
std::unique_ptr<TrainSession<T>> load_session_checkpoint(const std::string& path) {
    CheckpointData data = checkpoint_load(path);
    RunConfig run = RunConfig::from_config(ConfigFile::parse_string(data.config_text));
    auto session = std::make_unique<TrainSession<T>>(run);
    auto named = session->named_parameters();
    std::map<std::string, Parameter<T>*> by_name;
    for (auto& [name, p] : named) by_name[name] = p;
    for (auto& [name, t] : data.tensors) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw ValueError("checkpoint: unknown parameter " + name);
        if (it->second->value.shape != t.shape)
            throw ShapeError("checkpoint: shape mismatch for " + name);
        it->second->value = t.template cast<T>();
    }
    return session;
}

// ---------------------------------------------------------------------------
// Attention-variant comparison (three variants x two resolutions).
// ---------------------------------------------------------------------------

struct CompareRow {
    std::string variant;
    int width = 0, height = 0;
    EvalResult metrics;
    long long bilinear_taps_per_query = 0;
    long long key_dots_per_query = 0;
    double wall_seconds = 0;
    int64_t param_count = 0;
};

inline std::string compare_csv_header() {
    return "variant,width,height," + eval_csv_header() +
           ",bilinear_taps_per_query,key_dots_per_query,wall_seconds,param_count";
}

inline std::string compare_csv_row(const CompareRow& r) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), "%s,%d,%d,%s,%lld,%lld,%.3f,%lld", r.variant.c_str(), r.width,
                  r.height, eval_csv_row(r.metrics).c_str(), r.bilinear_taps_per_query,
                  r.key_dots_per_query, r.wall_seconds,
                  static_cast<long long>(r.param_count));
    return buf;
}

// Trains each attention variant under an otherwise identical config at two
// resolutions and tabulates final metrics, tap counts and wall time.
template <typename T>
std::vector<CompareRow> compare_attention(const RunConfig& base, int width2, int height2,
                                          const std::function<void(const std::string&)>& note =
                                              nullptr) {
    std::vector<CompareRow> rows;
    const std::array<AttentionVariant, 3> variants{
        AttentionVariant::Dense, AttentionVariant::Deformable, AttentionVariant::Roi};
    const std::array<std::pair<int, int>, 2> sizes{
        std::pair{base.width, base.height}, std::pair{width2, height2}};
    for (const auto& [w, h] : sizes) {
        for (AttentionVariant v : variants) {
            RunConfig run = base;
            run.width = w;
            run.height = h;
            run.model.attn.variant = v;
            if (note)
                note(std::string("compare-attn: ") + variant_name(v) + " " + std::to_string(w) +
                     "x" + std::to_string(h));
            TrainSession<T> session(run);
            TrainOutcome<T> out = session.run();
            CompareRow row;
            row.variant = variant_name(v);
            row.width = w;
            row.height = h;
            row.metrics = out.final_eval;
            row.bilinear_taps_per_query = out.bilinear_taps_per_query;
            row.key_dots_per_query = out.key_dots_per_query;
            row.wall_seconds = out.wall_seconds;
            row.param_count = out.param_count;
            rows.push_back(row);
        }
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Attention visualization dump.
// ---------------------------------------------------------------------------

inline std::string attention_trace_csv_header() {
    return "level,head,query_x,query_y,roi_l,roi_t,roi_r,roi_b,sample_x,sample_y,weight";
}

inline std::string attention_trace_csv_row(const AttentionTraceRow& r) {
    char buf[320];
    std::snprintf(buf, sizeof(buf), "%d,%d,%d,%d,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g", r.level,
                  r.head, r.query_x, r.query_y, r.roi_l, r.roi_t, r.roi_r, r.roi_b, r.sample_x,
                  r.sample_y, r.weight);
    return buf;
}

// Runs a forward pass on the session's scene recording ROI boxes, sampling
// positions and weights at the requested queries. Queries are given in
// full-resolution pixels and mapped down to the fused level's grid.
template <typename T>
AttentionTrace dump_attention(TrainSession<T>& session, int level,
                              const std::vector<std::pair<int, int>>& queries_full_res) {
    const auto& fusion_levels = session.config().model.fusion_levels;
    if (std::find(fusion_levels.begin(), fusion_levels.end(), level) == fusion_levels.end())
        throw ValueError("dump_attention: level " + std::to_string(level) +
                         " has no fusion block");
    const int stride = 1 << level;
    const int lw = session.config().width / stride, lh = session.config().height / stride;
    std::vector<std::pair<int, int>> level_queries;
    for (auto [x, y] : queries_full_res) {
        const int qx = x / stride, qy = y / stride;
        if (qx < 0 || qx >= lw || qy < 0 || qy >= lh)
            throw ValueError("dump_attention: query position outside the image");
        level_queries.emplace_back(qx, qy);
    }
    AttentionTrace trace;
    ModelDebug<T> dbg;
    dbg.trace = &trace;
    dbg.trace_level = level;
    dbg.trace_queries = &level_queries;
    session.predict_depth(&dbg);
    return trace;
}

// ---------------------------------------------------------------------------
// Metrics log writing.
// ---------------------------------------------------------------------------

inline void write_metrics_csv(const std::string& path, const std::vector<StepLog>& log,
                              const EvalResult& initial_eval, const EvalResult& final_eval) {
    std::ofstream out(path);
    if (!out) throw ValueError("cannot write " + path);
    out << "step,total,photo,smooth,seg,lr\n";
    char buf[256];
    for (const auto& l : log) {
        std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g,%.10g,%.10g,%.6g", l.step, l.total,
                      l.photo, l.smooth, l.seg, l.lr);
        out << buf << "\n";
    }
    out << "# initial," << eval_csv_header() << "\n";
    out << "# initial," << eval_csv_row(initial_eval) << "\n";
    out << "# final," << eval_csv_row(final_eval) << "\n";
}

}  // namespace roiformer
