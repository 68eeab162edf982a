#include "worldkit/gradcheck.hpp"
#include "worldkit/recon_loss.hpp"
#include "worldkit/splat_render.hpp"
#include "worldkit/synth.hpp"

#include <benchmark/benchmark.h>

using namespace worldkit;

namespace {

GradCheckScene scene(int gaussians, int size) { return make_gradcheck_scene(1, gaussians, size, size); }

} // namespace

static void BM_RenderViews(benchmark::State &state) {
    const GradCheckScene s = scene(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)));
    for (auto _ : state) benchmark::DoNotOptimize(render_views(s.set, s.camera));
    state.SetItemsProcessed(state.iterations() * state.range(1) * state.range(1));
}
BENCHMARK(BM_RenderViews)->Args({32, 32})->Args({256, 64})->Args({1024, 128})->Unit(benchmark::kMicrosecond);

static void BM_RenderWithGradients(benchmark::State &state) {
    const GradCheckScene s = scene(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)));
    for (auto _ : state) benchmark::DoNotOptimize(render_with_gradients(s.set, s.camera, s.targets));
    state.SetItemsProcessed(state.iterations() * state.range(1) * state.range(1));
}
BENCHMARK(BM_RenderWithGradients)->Args({32, 32})->Args({256, 64})->Args({1024, 128})->Unit(benchmark::kMicrosecond);

// Full oracle set of a generated scene seen from the front rig camera.
static void BM_RenderSceneGaussians(benchmark::State &state) {
    const SceneSpec s = generate_scene(3);
    OracleGaussianOptions o;
    o.camera_clearance = 3.0;
    const GaussianSet set = scene_gaussians(s, 0, o);
    const Camera cam = s.camera_in_ego(0, 0, 0);
    for (auto _ : state) benchmark::DoNotOptimize(render_views(set, cam));
    state.counters["gaussians"] = static_cast<double>(set.size());
}
BENCHMARK(BM_RenderSceneGaussians)->Unit(benchmark::kMillisecond);

static void BM_OracleRayCast(benchmark::State &state) {
    const SceneSpec s = generate_scene(3);
    for (auto _ : state) benchmark::DoNotOptimize(oracle_render(s, 0, 0));
}
BENCHMARK(BM_OracleRayCast)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
