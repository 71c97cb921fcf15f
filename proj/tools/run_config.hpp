// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mlora/model.hpp"
#include "mlora/tasks.hpp"
#include "mlora/trainer.hpp"

namespace mlora::cli {

/// Everything a training run depends on. Keys of the flat config file and
/// long flag names coincide (with '-' for '_').
struct RunConfig {
  ModelConfig model;
  Method method = Method::lora;
  std::size_t r = 8;
  std::size_t n = 3;
  std::optional<double> alpha;  // defaults to r
  std::string targets = "all";
  std::optional<double> lr;  // 5e-6 for ft, 5e-5 for adapters
  /// Multiplies lr. Toy-scale runs use a large factor since the schedule was
  /// tuned for 7B-parameter models.
  double lr_scale = 1.0;
  std::size_t epochs = 2;
  std::size_t steps = 0;  // 0: epochs × batches
  std::size_t batch = 8;
  double warmup_ratio = 0.05;
  double max_grad_norm = 1.0;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  std::array<std::size_t, 4> mix = {2000, 2000, 2000, 2000};

  double alpha_value() const { return alpha ? *alpha : static_cast<double>(r); }
  double base_lr() const;
  double effective_lr() const { return base_lr() * lr_scale; }

  /// Sets one field from text. Throws ArgumentError for an unknown key or a
  /// malformed value.
  void set(const std::string& key, const std::string& value);
  /// Checks ranges and the consistency of the model dimensions.
  void validate() const;

  std::vector<Projection> target_list() const;
  MixtureSpec mixture() const;
  TrainOptions train_options() const;

  /// Canonical key = value listing, one per line.
  std::map<std::string, std::string> to_map() const;
  /// Short stable digest of to_map().
  std::string digest() const;
};

/// Names accepted by RunConfig::set.
const std::vector<std::string>& config_keys();

/// Seeded streams derived from RunConfig::seed.
Rng base_rng(std::uint64_t seed);
Rng adapter_rng(std::uint64_t seed);

struct TrainResult {
  Model<float> model;
  std::vector<LossRecord> log;
  Model<float> base;
};

/// Builds the base model, attaches adapters and trains. Logs progress to
/// standard error every `log_every` steps (0: silent).
TrainResult run_training(const RunConfig& cfg, std::size_t log_every = 0);

}  // namespace mlora::cli
