// SPDX-License-Identifier: Apache-2.0
#include "cycleadapt/adapt/optim.hpp"

#include <cmath>
#include <numbers>

#include "cycleadapt/error.hpp"

namespace cycleadapt::adapt {

double cosine_lr(std::size_t step, std::size_t total_steps, double lr_start, double lr_end) {
  if (total_steps < 1 || step > total_steps)
    throw RangeError("cosine_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
  const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + std::cos(std::numbers::pi * progress));
}

void adam_step(nn::ParamSet& params, const diff::GradientMap& grads, OptState& state, double lr,
               const AdamConfig& config) {
  for (const auto& [name, g] : grads) {
    if (params.at(name).shape != g.shape)
      throw ShapeError("adam_step: gradient for '" + name + "' has shape " + diff::to_string(g.shape) +
                       ", parameter has " + diff::to_string(params.at(name).shape));
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (const auto& [name, g] : grads) {
    diff::Tensor& p = params.at(name);
    auto [m_it, m_new] = state.first.try_emplace(name, diff::Tensor(p.shape, 0.0));
    auto [v_it, v_new] = state.second.try_emplace(name, diff::Tensor(p.shape, 0.0));
    double* m = m_it->second.data.data();
    double* v = v_it->second.data.data();
    for (std::size_t i = 0; i < p.numel(); ++i) {
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g.data[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g.data[i] * g.data[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p.data[i] -= lr * mhat / (std::sqrt(vhat) + config.eps);
    }
  }
}

}  // namespace cycleadapt::adapt
