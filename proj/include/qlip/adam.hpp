// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

#include "qlip/graph.hpp"

namespace qlip {

/// lr(t) = base_lr * 0.5 * (1 + cos(pi * t / total_steps)), clamped at t = total_steps.
struct CosineSchedule {
  double base_lr = 7.5e-5;
  std::size_t total_steps = 1;

  double at(std::size_t step) const;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(const std::string& param)
      : std::runtime_error("non-finite gradient for parameter '" + param + "'"), param_(param) {}
  const std::string& param() const { return param_; }

 private:
  std::string param_;
};

/// Adam with a cosine learning-rate schedule.
///
/// Step t (0-based count of completed updates) uses lr = schedule.at(t) and
/// bias corrections 1 - beta^(t+1). Parameters are updated in lexicographic
/// name order. All gradients are validated before anything is written, so a
/// rejected step leaves both parameters and moments untouched.
class AdamState {
 public:
  AdamState() = default;
  AdamState(AdamConfig config, CosineSchedule schedule);

  void step(TensorMap& params, const TensorMap& grads);

  std::size_t step_count() const { return step_; }
  double next_lr() const { return schedule_.at(step_); }
  const AdamConfig& config() const { return config_; }
  const CosineSchedule& schedule() const { return schedule_; }
  const TensorMap& first_moments() const { return m_; }
  const TensorMap& second_moments() const { return v_; }

  // Restores a state captured from a previous run.
  void restore(std::size_t step, TensorMap first, TensorMap second);

 private:
  AdamConfig config_;
  CosineSchedule schedule_;
  std::size_t step_ = 0;
  TensorMap m_;
  TensorMap v_;
};

}  // namespace qlip
