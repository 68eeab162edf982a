#include "worldkit/bev_raster.hpp"
#include "worldkit/flow_world.hpp"
#include "worldkit/occupancy.hpp"
#include "worldkit/plan_world.hpp"
#include "worldkit/synth.hpp"

#include <benchmark/benchmark.h>

using namespace worldkit;

namespace {

const SceneSpec &scene() {
    static const SceneSpec s = generate_scene(5);
    return s;
}

const GaussianSet &gaussians() {
    static const GaussianSet g = scene_gaussians(scene(), 0);
    return g;
}

} // namespace

static void BM_RasterizeBev(benchmark::State &state) {
    BevSpec spec;
    spec.nx = spec.ny = static_cast<int>(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(rasterize_bev(gaussians(), spec));
    state.counters["gaussians"] = static_cast<double>(gaussians().size());
}
BENCHMARK(BM_RasterizeBev)->Arg(32)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

static void BM_BevMeanGradient(benchmark::State &state) {
    const BevSpec spec;
    const BevGrid pred = rasterize_bev(gaussians(), spec);
    const BevGrid target = rasterize_bev(scene_gaussians(scene(), 1), spec);
    const std::vector<double> g = bev_l2_gradient(pred, target);
    for (auto _ : state) benchmark::DoNotOptimize(rasterize_bev_mean_gradient(gaussians(), spec, g));
}
BENCHMARK(BM_BevMeanGradient)->Unit(benchmark::kMillisecond);

static void BM_SplatToOccupancy(benchmark::State &state) {
    const OccSpec spec;
    for (auto _ : state) benchmark::DoNotOptimize(splat_to_occupancy(gaussians(), spec));
}
BENCHMARK(BM_SplatToOccupancy)->Unit(benchmark::kMillisecond);

static void BM_ForecastStep(benchmark::State &state) {
    const Pose step = scene().next_from_current(0);
    for (auto _ : state) benchmark::DoNotOptimize(forecast_step(gaussians(), step));
}
BENCHMARK(BM_ForecastStep)->Unit(benchmark::kMillisecond);

static void BM_FlowStage2Gradients(benchmark::State &state) {
    OracleGaussianOptions o;
    o.camera_clearance = 3.0;
    const GaussianSet set = scene_gaussians(scene(), 0, o);
    std::vector<FlowView> views;
    for (int c = 0; c < static_cast<int>(scene().camera_rig.size()); ++c) {
        views.push_back({scene().camera_in_ego(1, c, 1), oracle_render(scene(), 1, c)});
    }
    const BevGrid target = rasterize_bev(scene_gaussians(scene(), 1));
    const FlowHead head = FlowHead::random(default_feature_dim(scene().class_count), 32, 1);
    for (auto _ : state) {
        benchmark::DoNotOptimize(flow_stage2_gradients(set, head, scene().next_from_current(0), views, target));
    }
}
BENCHMARK(BM_FlowStage2Gradients)->Unit(benchmark::kMillisecond);

static void BM_PlanGradients(benchmark::State &state) {
    const BevSpec spec;
    const PlanSample sample{rasterize_bev(gaussians(), spec), rasterize_bev(scene_gaussians(scene(), 1), spec),
                            ego_waypoints(scene(), 0, 6)};
    const PlannerModel model = PlannerModel::random({}, sample.bev.channels(), 1);
    for (auto _ : state) benchmark::DoNotOptimize(plan_gradients(model, sample));
    state.counters["parameters"] = static_cast<double>(model.parameter_count());
}
BENCHMARK(BM_PlanGradients)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
