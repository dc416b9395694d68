// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <map>
#include <string>

#include "cycleadapt/diff/graph.hpp"
#include "cycleadapt/nn/params.hpp"

namespace cycleadapt::adapt {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moments keyed by parameter name, plus the step counter.
struct OptState {
  std::map<std::string, diff::Tensor> first;
  std::map<std::string, diff::Tensor> second;
  std::size_t step = 0;
  friend bool operator==(const OptState&, const OptState&) = default;
};

/// lr_end + (lr_start - lr_end) * (1 + cos(pi * step / total)) / 2
double cosine_lr(std::size_t step, std::size_t total_steps, double lr_start, double lr_end);

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// left alone.
void adam_step(nn::ParamSet& params, const diff::GradientMap& grads, OptState& state, double lr,
               const AdamConfig& config = {});

}  // namespace cycleadapt::adapt
