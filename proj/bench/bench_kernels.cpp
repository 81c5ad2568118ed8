#include <benchmark/benchmark.h>

#include <vector>

#include "mscada/kernels.hpp"
#include "mscada/rng.hpp"

using namespace mscada;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

// Shapes taken from the model: conv GEMM (F × C·9 × H·W) at 32×32.
template <bool Parallel>
void BM_GemmNN(benchmark::State& state) {
  const kernels::GemmDims d{static_cast<std::size_t>(state.range(0)), 1024, static_cast<std::size_t>(state.range(1))};
  const auto a = random_vec(d.m * d.k, 1), b = random_vec(d.k * d.n, 2);
  std::vector<double> c(d.m * d.n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::gemm_nn(d, a, b, c);
    } else {
      kernels::reference::gemm_nn(d, a, b, c);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * d.m * d.n * d.k));
}

template <bool Parallel>
void BM_GemmNT(benchmark::State& state) {
  const kernels::GemmDims d{static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(1)), 1024};
  const auto a = random_vec(d.m * d.k, 1), b = random_vec(d.n * d.k, 2);
  std::vector<double> c(d.m * d.n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::gemm_nt(d, a, b, c);
    } else {
      kernels::reference::gemm_nt(d, a, b, c);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * d.m * d.n * d.k));
}

template <bool Parallel>
void BM_Im2col(benchmark::State& state) {
  const kernels::ConvGeom g{static_cast<std::size_t>(state.range(0)), 32, 32, 3};
  const auto img = random_vec(g.channels * 32 * 32, 3);
  std::vector<double> col(g.channels * 9 * 32 * 32);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::im2col(g, img, col);
    } else {
      kernels::reference::im2col(g, img, col);
    }
    benchmark::DoNotOptimize(col.data());
  }
}

}  // namespace

BENCHMARK(BM_GemmNN<true>)->Name("gemm_nn/parallel")->Args({16, 144})->Args({64, 576});
BENCHMARK(BM_GemmNN<false>)->Name("gemm_nn/reference")->Args({16, 144})->Args({64, 576});
BENCHMARK(BM_GemmNT<true>)->Name("gemm_nt/parallel")->Args({16, 144})->Args({64, 576});
BENCHMARK(BM_GemmNT<false>)->Name("gemm_nt/reference")->Args({16, 144})->Args({64, 576});
BENCHMARK(BM_Im2col<true>)->Name("im2col/parallel")->Arg(16)->Arg(64);
BENCHMARK(BM_Im2col<false>)->Name("im2col/reference")->Arg(16)->Arg(64);

BENCHMARK_MAIN();
