// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>

// Dense inner loops used by the graph evaluator. Every kernel exists twice:
// an OpenMP version used by the library and a serial reference kept for
// tests and benchmarks. Each output element is produced by exactly one
// thread with the same summation order as the serial version, so both
// agree bit-for-bit at any thread count.
namespace qlip::kernels {

// c[n x m] = a[n x k] * b[k x m]
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t n, std::size_t k, std::size_t m);
// c[n x m] = a[n x k] * b[m x k]^T
void matmul_bt(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t n, std::size_t k, std::size_t m);
// c[k x m] += a[n x k]^T * b[n x m]
void matmul_at_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t n, std::size_t k, std::size_t m);

namespace serial {
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t n, std::size_t k, std::size_t m);
void matmul_bt(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t n, std::size_t k, std::size_t m);
void matmul_at_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t n, std::size_t k, std::size_t m);
}  // namespace serial

// Below this many multiply-adds the OpenMP versions stay on the calling thread.
inline constexpr std::size_t kParallelThreshold = 1 << 15;

}  // namespace qlip::kernels
