// Microbenchmarks for the pipeline's hot paths: convolution forward, full
// U-Net inference (float and simulated INT8), layout conversion, the
// preprocessing chain and static analysis. Run with --benchmark_filter=...
// to narrow.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "hsicomp/complexity.hpp"
#include "hsicomp/data.hpp"
#include "hsicomp/netgraph.hpp"
#include "hsicomp/preprocess.hpp"
#include "hsicomp/quantization.hpp"
#include "hsicomp/tensor.hpp"

using namespace hsicomp;

namespace {

Tensor random_cube(uint64_t seed, int h, int w, int b,
                   Layout layout = Layout::BIP) {
  Tensor t(h, w, b, layout);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> d(-1.0f, 1.0f);
  for (float& v : t.f32()) v = d(rng);
  return t;
}

// Single 3x3 conv block (plus the mandatory head) so the GEMM path dominates.
NetGraph conv_block(int filters) {
  NetGraph g;
  LayerNode in;
  in.id = "in";
  in.kind = LayerKind::Input;
  in.out_ch = 25;
  g.add(in);
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<float> d(-0.1f, 0.1f);
  LayerNode c;
  c.id = "c1";
  c.kind = LayerKind::Conv2D;
  c.inputs = {"in"};
  c.in_ch = 25;
  c.out_ch = filters;
  c.kh = c.kw = 3;
  c.weight.resize(c.weight_count());
  for (float& v : c.weight) v = d(rng);
  c.bias.assign(static_cast<size_t>(filters), 0.0f);
  g.add(c);
  LayerNode head;
  head.id = "cnv_out";
  head.kind = LayerKind::Conv2D;
  head.inputs = {"c1"};
  head.in_ch = filters;
  head.out_ch = 5;
  head.kh = head.kw = 1;
  head.weight.resize(head.weight_count());
  for (float& v : head.weight) v = d(rng);
  head.bias.assign(5, 0.0f);
  g.add(head);
  LayerNode sm;
  sm.id = "softmax";
  sm.kind = LayerKind::Softmax;
  sm.inputs = {"cnv_out"};
  sm.in_ch = sm.out_ch = 5;
  g.add(sm);
  return g;
}

void BM_ConvForward(benchmark::State& state) {
  const int filters = static_cast<int>(state.range(0));
  NetGraph g = conv_block(filters);
  Tensor x = random_cube(1, 96, 104, 25);
  const double flops = static_cast<double>(analyze(g, 96, 104).flops);
  for (auto _ : state) {
    Tensor y = forward(g, x);
    benchmark::DoNotOptimize(y.f32().data());
  }
  state.counters["GFLOPS"] = benchmark::Counter(
      flops * static_cast<double>(state.iterations()) / 1e9,
      benchmark::Counter::kIsRate);
}
BENCHMARK(BM_ConvForward)->Arg(16)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_UnetForward(benchmark::State& state) {
  const int depth = static_cast<int>(state.range(0));
  const int filters = static_cast<int>(state.range(1));
  NetGraph g = build_unet(depth, filters, 25, 5);
  Tensor x = random_cube(2, 96, 104, 25);
  const double flops = static_cast<double>(analyze(g, 96, 104).flops);
  for (auto _ : state) {
    Tensor y = forward(g, x);
    benchmark::DoNotOptimize(y.f32().data());
  }
  state.counters["GFLOPS"] = benchmark::Counter(
      flops * static_cast<double>(state.iterations()) / 1e9,
      benchmark::Counter::kIsRate);
}
BENCHMARK(BM_UnetForward)->Args({2, 8})->Args({3, 16})->Unit(benchmark::kMillisecond);

void BM_QuantizedForward(benchmark::State& state) {
  NetGraph g = fold_bn(build_unet(2, 8, 25, 5));
  Tensor x = random_cube(3, 96, 104, 25);
  std::vector<Tensor> calib = {x};
  QuantParamMap params = calibrate(g, calib);
  for (auto _ : state) {
    Tensor y = quantized_forward(g, x, params);
    benchmark::DoNotOptimize(y.f32().data());
  }
}
BENCHMARK(BM_QuantizedForward)->Unit(benchmark::kMillisecond);

void BM_LayoutConvert(benchmark::State& state) {
  Tensor t = random_cube(4, 96, 104, 25, Layout::BSQ);
  for (auto _ : state) {
    Tensor b = convert_layout(t, Layout::BIP);
    benchmark::DoNotOptimize(b.f32().data());
  }
  state.SetBytesProcessed(static_cast<int64_t>(state.iterations()) *
                          static_cast<int64_t>(t.size()) * 4);
}
BENCHMARK(BM_LayoutConvert);

void BM_PreprocessToPn(benchmark::State& state) {
  SceneSpec spec = benchmark_scene_spec(5);
  Dataset ds = generate(spec, 5, 1);
  for (auto _ : state) {
    Tensor pn = preprocess_to_pn(ds.samples[0].raw, ds.calib, spec.preprocess);
    benchmark::DoNotOptimize(pn.f32().data());
  }
}
BENCHMARK(BM_PreprocessToPn)->Unit(benchmark::kMillisecond);

void BM_Analyze(benchmark::State& state) {
  NetGraph g = build_unet(5, 32, 25, 5);
  for (auto _ : state) {
    ComplexityReport rep = analyze(g, 192, 384);
    benchmark::DoNotOptimize(rep.flops);
  }
}
BENCHMARK(BM_Analyze)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
