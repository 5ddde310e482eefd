// Serial vs OpenMP kernels at the shapes the models use, plus the Eigen-backed gemm.
// Run with --benchmark_counters_tabular=true for a compact table.

#include <benchmark/benchmark.h>

#include <cmath>
#include <vector>

#include "ensemble/core/rng.hpp"
#include "ensemble/kernels/kernels.hpp"

namespace k = ensemble::kernels;

namespace {

std::vector<double> random_vector(std::size_t n, std::uint64_t seed) {
  auto rng = ensemble::make_rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = ensemble::normal(rng);
  return v;
}

using Gemm = void (*)(const double*, const double*, double*, std::size_t, std::size_t, std::size_t, bool);

template <Gemm F>
void BM_gemm(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0)), kk = static_cast<std::size_t>(state.range(1)),
             n = static_cast<std::size_t>(state.range(2));
  const auto a = random_vector(m * kk, 1), b = random_vector(kk * n, 2);
  std::vector<double> c(m * n);
  for (auto _ : state) {
    F(a.data(), b.data(), c.data(), m, kk, n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOP/s"] =
      benchmark::Counter(2.0 * static_cast<double>(m * kk * n), benchmark::Counter::kIsIterationInvariantRate,
                         benchmark::Counter::kIs1000);
}

// Flow block (batch 32 x window 16 rows, d_model 128, d_ff 512) and codec conv (im2col) shapes.
void gemm_shapes(benchmark::internal::Benchmark* b) {
  b->Args({512, 128, 512})->Args({512, 512, 128})->Args({2048, 384, 128})->Args({64, 64, 64});
}

BENCHMARK(BM_gemm<k::serial::gemm_nn>)->Name("gemm_nn/serial")->Apply(gemm_shapes);
BENCHMARK(BM_gemm<k::parallel::gemm_nn>)->Name("gemm_nn/parallel")->Apply(gemm_shapes);
BENCHMARK(BM_gemm<k::blocked::gemm_nn>)->Name("gemm_nn/blocked")->Apply(gemm_shapes);
BENCHMARK(BM_gemm<k::serial::gemm_tn>)->Name("gemm_tn/serial")->Apply(gemm_shapes);
BENCHMARK(BM_gemm<k::parallel::gemm_tn>)->Name("gemm_tn/parallel")->Apply(gemm_shapes);
BENCHMARK(BM_gemm<k::blocked::gemm_tn>)->Name("gemm_tn/blocked")->Apply(gemm_shapes);

template <void (*F)(double*, std::size_t, std::size_t)>
void BM_softmax(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0)), cols = static_cast<std::size_t>(state.range(1));
  const auto src = random_vector(rows * cols, 3);
  std::vector<double> x(src.size());
  for (auto _ : state) {
    x = src;
    F(x.data(), rows, cols);
    benchmark::DoNotOptimize(x.data());
  }
}
BENCHMARK(BM_softmax<k::serial::softmax_rows>)->Name("softmax_rows/serial")->Args({2048, 16})->Args({512, 512});
BENCHMARK(BM_softmax<k::parallel::softmax_rows>)->Name("softmax_rows/parallel")->Args({2048, 16})->Args({512, 512});

template <void (*F)(const double*, double*, double*, double*, std::size_t, std::size_t, double)>
void BM_normalize(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0)), cols = static_cast<std::size_t>(state.range(1));
  const auto x = random_vector(rows * cols, 4);
  std::vector<double> y(x.size()), mean(rows), rstd(rows);
  for (auto _ : state) {
    F(x.data(), y.data(), mean.data(), rstd.data(), rows, cols, 1e-5);
    benchmark::DoNotOptimize(y.data());
  }
}
BENCHMARK(BM_normalize<k::serial::normalize_rows>)->Name("normalize_rows/serial")->Args({512, 128})->Args({4096, 128});
BENCHMARK(BM_normalize<k::parallel::normalize_rows>)->Name("normalize_rows/parallel")->Args({512, 128})->Args({4096, 128});

template <void (*F)(const double*, double*, const k::ConvGeometry&)>
void BM_im2col(benchmark::State& state) {
  k::ConvGeometry g{.batch = 8, .seq_in = 256, .channels = 128, .kernel = 3, .stride = 1, .pad = 1};
  const auto x = random_vector(g.batch * g.seq_in * g.channels, 5);
  std::vector<double> cols(g.batch * g.seq_out() * g.col_width());
  for (auto _ : state) {
    F(x.data(), cols.data(), g);
    benchmark::DoNotOptimize(cols.data());
  }
}
BENCHMARK(BM_im2col<k::serial::im2col>)->Name("im2col/serial");
BENCHMARK(BM_im2col<k::parallel::im2col>)->Name("im2col/parallel");

template <void (*F)(const double*, const double*, const double*, std::size_t, std::size_t, double, double*)>
void BM_carriers(benchmark::State& state) {
  const std::size_t n = 8000 * 4, h = 8;
  std::vector<double> theta(n), f0(n, 220.0), phase(h, 0.0), out(n * h);
  for (std::size_t i = 0; i < n; ++i) theta[i] = 2.0 * M_PI * 220.0 * static_cast<double>(i) / 8000.0;
  for (auto _ : state) {
    F(theta.data(), f0.data(), phase.data(), n, h, 4000.0, out.data());
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_carriers<k::serial::harmonic_carriers>)->Name("harmonic_carriers/serial");
BENCHMARK(BM_carriers<k::parallel::harmonic_carriers>)->Name("harmonic_carriers/parallel");

template <void (*F)(const double*, std::size_t, std::size_t, std::size_t, std::size_t, std::size_t, std::size_t, double*)>
void BM_nccf(benchmark::State& state) {
  const std::size_t n = 8000 * 4, hop = 160, win = 320, min_lag = 16, max_lag = 100;
  const std::size_t frames = (n - win - max_lag) / hop;
  const auto x = random_vector(n, 6);
  std::vector<double> out(frames * (max_lag + 1));
  for (auto _ : state) {
    F(x.data(), n, hop, win, min_lag, max_lag, frames, out.data());
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_nccf<k::serial::frame_nccf>)->Name("frame_nccf/serial");
BENCHMARK(BM_nccf<k::parallel::frame_nccf>)->Name("frame_nccf/parallel");

}  // namespace

BENCHMARK_MAIN();
