#include <benchmark/benchmark.h>

#include "cpl/adam.hpp"
#include "cpl/curriculum.hpp"
#include "cpl/detector.hpp"
#include "cpl/loss.hpp"
#include "cpl/metrics.hpp"
#include "cpl/rng.hpp"
#include "cpl/scene.hpp"

using namespace cpl;

namespace {

SceneConfig bench_config() {
    SceneConfig c;
    c.bird_count_min = 1;
    c.bird_count_max = 3;
    return c;
}

Scene bench_scene() { return generate_scene(bench_config(), 42); }

} // namespace

static void BM_SceneGenerate(benchmark::State& state) {
    SceneConfig c = bench_config();
    uint64_t seed = 0;
    for (auto _ : state) {
        Scene s = generate_scene(c, seed++);
        benchmark::DoNotOptimize(s.image.data());
    }
}
BENCHMARK(BM_SceneGenerate);

static void BM_Conv2dForward(benchmark::State& state) {
    Rng rng(1);
    Tensor in = Tensor::zeros({8, 32, 32});
    Tensor k = Tensor::zeros({16, 8, 3, 3});
    Tensor b = Tensor::zeros({16});
    for (int64_t i = 0; i < in.numel(); ++i) in.data()[i] = rng.uniform_f(-1, 1);
    for (int64_t i = 0; i < k.numel(); ++i) k.data()[i] = rng.uniform_f(-1, 1);
    for (auto _ : state) {
        Tensor out = conv2d(in, k, b, 1);
        benchmark::DoNotOptimize(out.data());
    }
}
BENCHMARK(BM_Conv2dForward);

static void BM_DetectorForward(benchmark::State& state) {
    DetectorWeights w = DetectorWeights::init(1, 7);
    Tensor input = scene_input(bench_scene(), 1);
    for (auto _ : state) {
        ModelOutput out = detector_forward(w, input);
        benchmark::DoNotOptimize(out.conf_map.data());
    }
}
BENCHMARK(BM_DetectorForward);

static void BM_ForwardLoss(benchmark::State& state) {
    DetectorWeights w = DetectorWeights::init(1, 7);
    Scene s = bench_scene();
    Tensor input = scene_input(s, 1);
    for (auto _ : state) {
        ModelOutput out = detector_forward(w, input);
        AnchorAssignment asg = assign_anchors(s.gt_boxes, out.grid_h, out.grid_w);
        LossBreakdown bd = total_loss(out, asg, s.gt_boxes, 5.0f, 16.0f);
        benchmark::DoNotOptimize(bd.total.item());
    }
}
BENCHMARK(BM_ForwardLoss);

static void BM_TrainStep(benchmark::State& state) {
    DetectorWeights w = DetectorWeights::init(1, 7);
    Scene s = bench_scene();
    Tensor input = scene_input(s, 1);
    for (auto _ : state) {
        Tape tape;
        DetectorWeights c = w.clone();
        ModelOutput out = detector_forward(c, input);
        AnchorAssignment asg = assign_anchors(s.gt_boxes, out.grid_h, out.grid_w);
        LossBreakdown bd = total_loss(out, asg, s.gt_boxes, 5.0f, 16.0f);
        tape.backward(bd.total);
        benchmark::DoNotOptimize(c.conv1_w.impl());
    }
}
BENCHMARK(BM_TrainStep);

static void BM_CiouLoss(benchmark::State& state) {
    Box a{3, 4, 11, 13}, b{5, 6, 12, 15};
    for (auto _ : state) {
        float v = ciou_loss(a, b);
        benchmark::DoNotOptimize(v);
    }
}
BENCHMARK(BM_CiouLoss);

static void BM_MinimizerValue(benchmark::State& state) {
    MinimizerSpec spec{MinKind::ConfidenceBased, 2.0, 3};
    double c = 0.5;
    for (auto _ : state) {
        c = 0.5 + 0.4999 * minimizer_value(spec, 0.3, c);
        benchmark::DoNotOptimize(c);
    }
}
BENCHMARK(BM_MinimizerValue);

static void BM_DecodeNms(benchmark::State& state) {
    DetectorWeights w = DetectorWeights::init(1, 7);
    ModelOutput out = detector_forward(w, scene_input(bench_scene(), 1));
    for (auto _ : state) {
        auto dets = decode(out, 0.3f, 0.45f);
        benchmark::DoNotOptimize(dets.data());
    }
}
BENCHMARK(BM_DecodeNms);

BENCHMARK_MAIN();
