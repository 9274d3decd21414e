// Microbenchmarks for the attention variants and the hot numeric kernels.
// The sampling variants' per-query cost is constant in the guidance size;
// dense cross-attention scales with it.

#include <benchmark/benchmark.h>

#include "roiformer/attention.hpp"
#include "roiformer/geometry.hpp"
#include "roiformer/ops.hpp"

using namespace roiformer;

namespace {

Tensor<float> rand_map(std::vector<int> shape, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> d(-1, 1);
    Tensor<float> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<float>(d(rng));
    return t;
}

void bm_attention(benchmark::State& state, AttentionVariant variant) {
    const int side = static_cast<int>(state.range(0));
    const int c = 16;
    AttentionConfig cfg;
    cfg.heads = 4;
    cfg.points = 8;
    cfg.variant = variant;
    std::mt19937_64 rng(7);
    auto lp = make_attention_params<float>(c, cfg.heads, cfg.points, rng);
    Tensor<float> q = rand_map({c, 8, 8}, 1);
    Tensor<float> g = rand_map({c, side, side}, 2);
    for (auto _ : state) {
        AttentionLayerCache<float> cache;
        Tensor<float> out = attention_layer_forward(q, g, lp, cfg, cache);
        benchmark::DoNotOptimize(out.data.data());
    }
    state.SetLabel("guidance " + std::to_string(side) + "x" + std::to_string(side));
}

void BM_DenseAttention(benchmark::State& state) {
    bm_attention(state, AttentionVariant::Dense);
}
void BM_DeformableAttention(benchmark::State& state) {
    bm_attention(state, AttentionVariant::Deformable);
}
void BM_RoiAttention(benchmark::State& state) {
    bm_attention(state, AttentionVariant::Roi);
}

void BM_Conv3x3(benchmark::State& state) {
    const int side = static_cast<int>(state.range(0));
    std::mt19937_64 rng(3);
    auto layer_w = Parameter<float>::uniform_init({16, 16, 3, 3}, 16 * 9, rng);
    auto layer_b = Parameter<float>(Tensor<float>({16}));
    Tensor<float> x = rand_map({16, side, side}, 4);
    for (auto _ : state) {
        Tensor<float> out = conv2d_3x3(x, layer_w.value, layer_b.value, 1);
        benchmark::DoNotOptimize(out.data.data());
    }
}

void BM_InverseWarp(benchmark::State& state) {
    const int side = static_cast<int>(state.range(0));
    Tensor<float> src = rand_map({3, side, side}, 5);
    Tensor<float> d = Tensor<float>::full({1, side, side}, 5.0f);
    DepthMap<float> depth(d);
    CameraModel<float> cam{static_cast<float>(side), static_cast<float>(side),
                           (side - 1) / 2.0f, (side - 1) / 2.0f};
    Pose<float> pose{{0, 0.002f, 0}, {0.1f, 0, 0.02f}};
    for (auto _ : state) {
        WarpResult<float> wr = inverse_warp(src, depth, pose, cam);
        benchmark::DoNotOptimize(wr.warped.data.data());
    }
}

}  // namespace

BENCHMARK(BM_DenseAttention)->Arg(8)->Arg(16)->Arg(32)->Arg(64);
BENCHMARK(BM_DeformableAttention)->Arg(8)->Arg(16)->Arg(32)->Arg(64);
BENCHMARK(BM_RoiAttention)->Arg(8)->Arg(16)->Arg(32)->Arg(64);
BENCHMARK(BM_Conv3x3)->Arg(32)->Arg(96);
BENCHMARK(BM_InverseWarp)->Arg(64)->Arg(192);

BENCHMARK_MAIN();
