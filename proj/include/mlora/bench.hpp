// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include <json.hpp>

#include "mlora/model.hpp"

namespace mlora {

/// Adapter branch shape on one site: rank r with n parallel modules (n = 1
/// for LoRA, where r is the full rank R).
struct AdapterShape {
  Method method = Method::lora;
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  std::size_t rank = 0;
  std::size_t n = 1;
};

/// Per-token, per-site costs of the adapter branch. Counters are exact
/// functions of the shape; only wall_tokens_per_second is measured. A fully
/// fine-tuned site has no branch and reports zeros.
struct CostReport {
  AdapterShape shape;
  std::uint64_t matmul_flops_per_token_per_site = 0;
  std::uint64_t adapter_overhead_flops = 0;
  std::uint64_t cached_activation_values_per_token_per_site = 0;
  double wall_tokens_per_second = 0.0;
  std::string config_fingerprint;
};

/// Matmul FLOPs n·(2·d_in·r + 2·r·d_out) and elementwise overhead: none for
/// LoRA, n scalings plus n−1 additions of d_out values for MultiLoRA.
CostReport flop_count(const AdapterShape& shape);

/// Values the branch keeps for backward: x·A for LoRA (R), each x·A_i and
/// each unscaled module output for MultiLoRA (n·(r + d_out)).
std::uint64_t activation_count(const AdapterShape& shape);

/// Counters of flop_count plus activation_count.
CostReport cost_report(const AdapterShape& shape);

struct ThroughputOptions {
  std::size_t steps = 100;
  std::size_t warmup = 10;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
};

/// Timed training steps on generated data, warmup excluded. Throws
/// ArgumentError when steps does not exceed warmup.
double measure_throughput(const ModelConfig& cfg, const AdapterShape& shape,
                          const ThroughputOptions& options);

/// Stable hash-like text identifying the model config and adapter shape.
std::string config_fingerprint(const ModelConfig& cfg, const AdapterShape& shape);

nlohmann::json to_json(const CostReport& r);

}  // namespace mlora
