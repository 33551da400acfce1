// SPDX-License-Identifier: Apache-2.0
// Shared helpers for the unit and acceptance tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "qlip/graph.hpp"
#include "qlip/image.hpp"
#include "qlip/rng.hpp"

namespace qlip::test {

inline constexpr double kFdStep = 1e-5;
inline constexpr double kGradTol = 1e-4;
// Denominator floor for the relative error; gradients smaller than this are
// compared in absolute terms.
inline constexpr double kGradFloor = 1e-6;

inline double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kGradFloor});
}

inline Tensor random_tensor(Rng& rng, std::size_t rows, std::size_t cols, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(rows, cols);
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

inline Image random_image(Rng& rng, int h, int w) {
  Image img(h, w);
  for (auto& v : img.data) v = rng.uniform();
  return img;
}

struct FdReport {
  double max_rel = 0.0;
  std::size_t checked = 0;
};

/// Compares backward() against central differences for every element of the
/// named feed tensors (inputs with requires_grad or trainable params). At most
/// `max_elems` elements per tensor are probed, spread evenly.
inline FdReport check_gradients(const Graph& g, TensorMap feed, NodeId loss, const std::vector<std::string>& names,
                                std::size_t max_elems = 64) {
  const auto eval = forward(g, feed);
  const auto grads = backward(g, eval, loss);
  FdReport rep;
  for (const auto& name : names) {
    const Tensor* analytic = nullptr;
    if (auto it = grads.params.find(name); it != grads.params.end()) analytic = &it->second;
    if (auto it = grads.inputs.find(name); it != grads.inputs.end()) analytic = &it->second;
    if (!analytic) throw std::runtime_error("no gradient reported for " + name);
    Tensor& t = feed.at(name);
    const std::size_t n = t.size();
    const std::size_t stride = std::max<std::size_t>(1, n / max_elems);
    for (std::size_t k = 0; k < n; k += stride) {
      const double orig = t[k];
      t[k] = orig + kFdStep;
      const double up = forward(g, feed, Retain::ValuesOnly).value(loss)[0];
      t[k] = orig - kFdStep;
      const double down = forward(g, feed, Retain::ValuesOnly).value(loss)[0];
      t[k] = orig;
      const double numeric = (up - down) / (2 * kFdStep);
      rep.max_rel = std::max(rep.max_rel, rel_error((*analytic)[k], numeric));
      ++rep.checked;
    }
  }
  return rep;
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("qlip_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace qlip::test
