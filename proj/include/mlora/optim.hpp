// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mlora/autodiff.hpp"

namespace mlora {

// Betas and epsilon follow the common trainer defaults; weight decay defaults
// to zero for the same reason.
struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// First and second moments per parameter, zero until the first step.
template <typename T>
struct OptimState {
  std::vector<Matrix<T>> m;
  std::vector<Matrix<T>> v;
  std::size_t step_count = 0;
};

/// One decoupled-weight-decay Adam update over the trainable entries of
/// `params`. The params list must be the same (in order and shape) for every
/// call that shares `state`.
template <typename T>
void adamw_step(std::span<Param<T>* const> params, OptimState<T>& state, double lr,
                const AdamWConfig& cfg = {});

/// Linear warmup from 0 to base_lr, then linear decay to 0 at total_steps.
struct Schedule {
  double base_lr = 0.0;
  std::size_t total_steps = 0;
  double warmup_ratio = 0.0;

  std::size_t warmup_steps() const;
};

double lr_at(const Schedule& schedule, std::size_t step);

}  // namespace mlora
