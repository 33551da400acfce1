// SPDX-License-Identifier: Apache-2.0
#include "qlip/adam.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace qlip {

double CosineSchedule::at(std::size_t step) const {
  if (total_steps == 0) return base_lr;
  const double t = static_cast<double>(std::min(step, total_steps));
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t / static_cast<double>(total_steps)));
}

AdamState::AdamState(AdamConfig config, CosineSchedule schedule)
    : config_(config), schedule_(schedule) {}

void AdamState::step(TensorMap& params, const TensorMap& grads) {
  for (const auto& [name, p] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw std::invalid_argument("missing gradient for parameter '" + name + "'");
    if (!it->second.same_shape(p)) {
      throw std::invalid_argument("gradient shape " + shape_string(it->second.shape()) +
                                  " does not match parameter '" + name + "' " +
                                  shape_string(p.shape()));
    }
    if (!it->second.all_finite()) throw NonFiniteGradient(name);
  }

  const double lr = schedule_.at(step_);
  const double t = static_cast<double>(step_ + 1);
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);

  for (auto& [name, p] : params) {
    const Tensor& g = grads.find(name)->second;
    auto [mit, m_new] = m_.try_emplace(name, Tensor(p.shape()));
    auto [vit, v_new] = v_.try_emplace(name, Tensor(p.shape()));
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * g[k];
      v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * g[k] * g[k];
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      p[k] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
  ++step_;
}

void AdamState::restore(std::size_t step, TensorMap first, TensorMap second) {
  step_ = step;
  m_ = std::move(first);
  v_ = std::move(second);
}

}  // namespace qlip
