// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "mlora/model.hpp"
#include "mlora/optim.hpp"
#include "mlora/tasks.hpp"

namespace mlora {

struct TrainOptions {
  double lr = 5e-5;
  /// Optimizer steps; 0 means epochs × batches-per-epoch.
  std::size_t steps = 0;
  std::size_t epochs = 2;
  std::size_t batch_size = 8;
  double warmup_ratio = 0.05;
  AdamWConfig adamw;
  /// Global gradient-norm clip applied before each update; 0 disables it.
  double max_grad_norm = 1.0;
  /// Drives the batch order of every epoch after the first.
  std::uint64_t seed = 0;
};

struct LossRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

/// Runs the training loop over the model's currently trainable params. Step k
/// (1-based) uses lr_at(schedule, k) and logs the loss measured before its
/// update. Throws NumericError when the loss stops being finite.
template <typename T>
std::vector<LossRecord> train(Model<T>& model, const std::vector<Sample>& samples,
                              const TrainOptions& options,
                              const std::function<void(const LossRecord&)>& on_step = {});

/// Scales all grads so their joint L2 norm is at most max_norm. Returns the
/// norm before clipping.
template <typename T>
double clip_grad_norm(std::span<Param<T>* const> params, double max_norm);

/// Mean of log[first, first+count) losses.
double mean_loss(const std::vector<LossRecord>& log, std::size_t first, std::size_t count);

}  // namespace mlora
