// SPDX-License-Identifier: Apache-2.0
#include "qlip/kernels.hpp"

#include <algorithm>

namespace qlip::kernels {

namespace {

inline void matmul_row(const double* a, const double* b, double* c, std::size_t k,
                       std::size_t m) {
  std::fill(c, c + m, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const double av = a[p];
    const double* brow = b + p * m;
    for (std::size_t j = 0; j < m; ++j) c[j] += av * brow[j];
  }
}

inline void matmul_bt_row(const double* a, const double* b, double* c, std::size_t k,
                          std::size_t m) {
  for (std::size_t j = 0; j < m; ++j) {
    const double* brow = b + j * k;
    double s = 0.0;
    for (std::size_t p = 0; p < k; ++p) s += a[p] * brow[p];
    c[j] = s;
  }
}

// Row p of c (length m) accumulates sum_i a[i][p] * b[i][:] in increasing i.
inline void matmul_at_row(const double* a, const double* b, double* c, std::size_t n,
                          std::size_t k, std::size_t m, std::size_t p) {
  for (std::size_t i = 0; i < n; ++i) {
    const double av = a[i * k + p];
    if (av == 0.0) continue;
    const double* brow = b + i * m;
    for (std::size_t j = 0; j < m; ++j) c[j] += av * brow[j];
  }
}

}  // namespace

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t n, std::size_t k, std::size_t m) {
  const bool par = n * k * m >= kParallelThreshold;
  const auto rows = static_cast<long long>(n);
#pragma omp parallel for schedule(static) if (par)
  for (long long i = 0; i < rows; ++i) {
    matmul_row(a.data() + i * k, b.data(), c.data() + i * m, k, m);
  }
}

void matmul_bt(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t n, std::size_t k, std::size_t m) {
  const bool par = n * k * m >= kParallelThreshold;
  const auto rows = static_cast<long long>(n);
#pragma omp parallel for schedule(static) if (par)
  for (long long i = 0; i < rows; ++i) {
    matmul_bt_row(a.data() + i * k, b.data(), c.data() + i * m, k, m);
  }
}

void matmul_at_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t n, std::size_t k, std::size_t m) {
  const bool par = n * k * m >= kParallelThreshold;
  const auto outs = static_cast<long long>(k);
#pragma omp parallel for schedule(static) if (par)
  for (long long p = 0; p < outs; ++p) {
    matmul_at_row(a.data(), b.data(), c.data() + p * m, n, k, m, static_cast<std::size_t>(p));
  }
}

namespace serial {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) matmul_row(a.data() + i * k, b.data(), c.data() + i * m, k, m);
}

void matmul_bt(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    matmul_bt_row(a.data() + i * k, b.data(), c.data() + i * m, k, m);
  }
}

void matmul_at_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t p = 0; p < k; ++p) matmul_at_row(a.data(), b.data(), c.data() + p * m, n, k, m, p);
}

}  // namespace serial

}  // namespace qlip::kernels
