// Parallel kernels against their serial reference twins.
#include <benchmark/benchmark.h>

#include <vector>

#include "privisp/isp.hpp"
#include "privisp/kernels.hpp"
#include "privisp/rng.hpp"

using namespace privisp;

namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

// Shape of the middle layer of the toy face extractor at batch 32.
kernels::ConvGeometry bench_geometry() { return kernels::conv_geometry(32, 16, 16, 16, 32, 3, 1, 1); }

template <auto Fn>
void conv_forward(benchmark::State& state) {
  const auto g = bench_geometry();
  const auto x = random_values(static_cast<std::size_t>(g.batch) * g.in_channels * g.in_h * g.in_w, 1);
  const auto w = random_values(static_cast<std::size_t>(g.out_channels) * g.in_channels * g.kernel * g.kernel, 2);
  const auto b = random_values(static_cast<std::size_t>(g.out_channels), 3);
  std::vector<double> y(static_cast<std::size_t>(g.batch) * g.out_channels * g.out_h * g.out_w);
  for (auto _ : state) {
    Fn(g, x.data(), w.data(), b.data(), y.data());
    benchmark::DoNotOptimize(y.data());
  }
}

template <auto Fn>
void conv_backward_input(benchmark::State& state) {
  const auto g = bench_geometry();
  const auto w = random_values(static_cast<std::size_t>(g.out_channels) * g.in_channels * g.kernel * g.kernel, 2);
  const auto dy = random_values(static_cast<std::size_t>(g.batch) * g.out_channels * g.out_h * g.out_w, 4);
  std::vector<double> dx(static_cast<std::size_t>(g.batch) * g.in_channels * g.in_h * g.in_w);
  for (auto _ : state) {
    Fn(g, w.data(), dy.data(), dx.data());
    benchmark::DoNotOptimize(dx.data());
  }
}

template <auto Fn>
void conv_backward_weight(benchmark::State& state) {
  const auto g = bench_geometry();
  const auto x = random_values(static_cast<std::size_t>(g.batch) * g.in_channels * g.in_h * g.in_w, 1);
  const auto dy = random_values(static_cast<std::size_t>(g.batch) * g.out_channels * g.out_h * g.out_w, 4);
  std::vector<double> dw(static_cast<std::size_t>(g.out_channels) * g.in_channels * g.kernel * g.kernel);
  std::vector<double> db(static_cast<std::size_t>(g.out_channels));
  for (auto _ : state) {
    Fn(g, x.data(), dy.data(), dw.data(), db.data());
    benchmark::DoNotOptimize(dw.data());
  }
}

template <auto Fn>
void linear_forward(benchmark::State& state) {
  const int batch = 64, in = 512, out = 128;
  const auto x = random_values(static_cast<std::size_t>(batch) * in, 1);
  const auto w = random_values(static_cast<std::size_t>(out) * in, 2);
  const auto b = random_values(static_cast<std::size_t>(out), 3);
  std::vector<double> y(static_cast<std::size_t>(batch) * out);
  for (auto _ : state) {
    Fn(batch, in, out, x.data(), w.data(), b.data(), y.data());
    benchmark::DoNotOptimize(y.data());
  }
}

template <auto Fn>
void capture(benchmark::State& state) {
  Rng rng(5);
  Tensor img({16, 3, 64, 64});
  for (double& v : img.values()) v = rng.uniform();
  const isp::ImageTensor input(img, isp::ColorDomain::srgb);
  isp::ISPParams params;
  params.ccm = isp::ColorMatrix::diagonal(0.8);
  params.gamma = isp::GammaCurve::sampled([](double t) { return t * t; });
  for (auto _ : state) benchmark::DoNotOptimize(Fn(input, params));
}

}  // namespace

BENCHMARK(conv_forward<kernels::conv2d_forward>)->Name("conv2d_forward/parallel");
BENCHMARK(conv_forward<kernels::reference::conv2d_forward>)->Name("conv2d_forward/reference");
BENCHMARK(conv_backward_input<kernels::conv2d_backward_input>)->Name("conv2d_backward_input/parallel");
BENCHMARK(conv_backward_input<kernels::reference::conv2d_backward_input>)->Name("conv2d_backward_input/reference");
BENCHMARK(conv_backward_weight<kernels::conv2d_backward_weight>)->Name("conv2d_backward_weight/parallel");
BENCHMARK(conv_backward_weight<kernels::reference::conv2d_backward_weight>)->Name("conv2d_backward_weight/reference");
BENCHMARK(linear_forward<kernels::linear_forward>)->Name("linear_forward/parallel");
BENCHMARK(linear_forward<kernels::reference::linear_forward>)->Name("linear_forward/reference");
BENCHMARK(capture<isp::virtual_capture>)->Name("virtual_capture/parallel");
BENCHMARK(capture<isp::reference::virtual_capture>)->Name("virtual_capture/reference");

BENCHMARK_MAIN();
