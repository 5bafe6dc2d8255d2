// OpenMP/GEMM convolution against the serial reference loops.

#include <benchmark/benchmark.h>

#include <random>

#include "dfsar/kernels.hpp"

using namespace dfsar;

namespace {

Tensor gaussian_tensor(const Shape& s, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor t(s);
  for (double& v : t.values()) v = n(rng);
  return t;
}

// Args: channels, spatial size, kernel.
struct Case {
  Tensor x, w, grad;
  kernels::ConvGeometry g;
  explicit Case(const benchmark::State& st) {
    const int c = static_cast<int>(st.range(0)), s = static_cast<int>(st.range(1)), k = static_cast<int>(st.range(2));
    g = {1, k / 2, 1};
    x = gaussian_tensor({2, c, s, s}, 1);
    w = gaussian_tensor({c, c, k, k}, 2);
    grad = gaussian_tensor({2, c, s, s}, 3);
  }
};

void set_flops(benchmark::State& st) {
  const double c = st.range(0), s = st.range(1), k = st.range(2);
  st.counters["flops"] = benchmark::Counter(2.0 * 2 * c * c * k * k * s * s, benchmark::Counter::kIsIterationInvariantRate);
}

void BM_ConvForward(benchmark::State& st) {
  const Case c(st);
  for (auto _ : st) benchmark::DoNotOptimize(kernels::conv2d_forward(c.x, c.w, c.g));
  set_flops(st);
}

void BM_ConvForwardReference(benchmark::State& st) {
  const Case c(st);
  for (auto _ : st) benchmark::DoNotOptimize(kernels::reference::conv2d_forward(c.x, c.w, c.g));
  set_flops(st);
}

void BM_ConvBackwardInput(benchmark::State& st) {
  const Case c(st);
  for (auto _ : st) benchmark::DoNotOptimize(kernels::conv2d_backward_input(c.grad, c.w, c.x.shape(), c.g));
  set_flops(st);
}

void BM_ConvBackwardInputReference(benchmark::State& st) {
  const Case c(st);
  for (auto _ : st)
    benchmark::DoNotOptimize(kernels::reference::conv2d_backward_input(c.grad, c.w, c.x.shape(), c.g));
  set_flops(st);
}

void BM_ConvBackwardWeight(benchmark::State& st) {
  const Case c(st);
  for (auto _ : st) benchmark::DoNotOptimize(kernels::conv2d_backward_weight(c.grad, c.x, c.w.shape(), c.g));
  set_flops(st);
}

void BM_ConvBackwardWeightReference(benchmark::State& st) {
  const Case c(st);
  for (auto _ : st)
    benchmark::DoNotOptimize(kernels::reference::conv2d_backward_weight(c.grad, c.x, c.w.shape(), c.g));
  set_flops(st);
}

void BM_Gemm(benchmark::State& st) {
  const int n = static_cast<int>(st.range(0));
  const Tensor a = gaussian_tensor({n, n}, 4), b = gaussian_tensor({n, n}, 5);
  Tensor c({n, n});
  for (auto _ : st) {
    kernels::gemm(a.data(), n, n, false, b.data(), n, n, false, c.data(), false);
    benchmark::DoNotOptimize(c.data());
  }
  st.counters["flops"] = benchmark::Counter(2.0 * n * n * n, benchmark::Counter::kIsIterationInvariantRate);
}

#define CONV_ARGS ->Args({8, 32, 3})->Args({32, 32, 3})->Args({16, 64, 5})->Unit(benchmark::kMillisecond)

BENCHMARK(BM_ConvForward) CONV_ARGS;
BENCHMARK(BM_ConvForwardReference) CONV_ARGS;
BENCHMARK(BM_ConvBackwardInput) CONV_ARGS;
BENCHMARK(BM_ConvBackwardInputReference) CONV_ARGS;
BENCHMARK(BM_ConvBackwardWeight) CONV_ARGS;
BENCHMARK(BM_ConvBackwardWeightReference) CONV_ARGS;
BENCHMARK(BM_Gemm)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
