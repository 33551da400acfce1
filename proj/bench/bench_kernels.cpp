// SPDX-License-Identifier: Apache-2.0
// Serial reference kernels against their OpenMP counterparts.
#include <benchmark/benchmark.h>

#include <vector>

#include "qlip/image.hpp"
#include "qlip/kernels.hpp"
#include "qlip/rng.hpp"

namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  qlip::Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

template <auto Kernel>
void BM_matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_values(n * n, 1), b = random_values(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    Kernel(a, b, c, n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long long>(n * n * n));
}

template <auto Score>
void BM_detail_score(benchmark::State& state) {
  const int side = static_cast<int>(state.range(0));
  qlip::Image img(side, side);
  img.data = random_values(img.data.size(), 3);
  for (auto& v : img.data) v = 0.5 + 0.5 * v;
  for (auto _ : state) benchmark::DoNotOptimize(Score(img, qlip::kDetailPixelScale));
  state.SetItemsProcessed(state.iterations() * side * side);
}

void matmul_serial(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t n,
                   std::size_t k, std::size_t m) {
  qlip::kernels::serial::matmul(a, b, c, n, k, m);
}
void matmul_omp(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t n,
                std::size_t k, std::size_t m) {
  qlip::kernels::matmul(a, b, c, n, k, m);
}
double score_serial(const qlip::Image& img, double s) { return qlip::serial::detail_score(img, s); }
double score_omp(const qlip::Image& img, double s) { return qlip::detail_score(img, s); }

}  // namespace

BENCHMARK(BM_matmul<matmul_serial>)->Name("matmul/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_matmul<matmul_omp>)->Name("matmul/omp")->Arg(64)->Arg(256);
BENCHMARK(BM_detail_score<score_serial>)->Name("detail_score/serial")->Arg(224)->Arg(672);
BENCHMARK(BM_detail_score<score_omp>)->Name("detail_score/omp")->Arg(224)->Arg(672);

BENCHMARK_MAIN();
