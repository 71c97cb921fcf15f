// SPDX-License-Identifier: Apache-2.0
#include "mlora/bench.hpp"

#include <chrono>
#include <cstdio>
#include <zlib.h>

#include "mlora/attach.hpp"
#include "mlora/tasks.hpp"
#include "mlora/trainer.hpp"

namespace mlora {

namespace {

using u64 = std::uint64_t;

}  // namespace

CostReport flop_count(const AdapterShape& s) {
  CostReport r;
  r.shape = s;
  if (s.method == Method::ft) return r;
  const u64 n = s.method == Method::lora ? 1 : s.n;
  r.matmul_flops_per_token_per_site = n * (2 * u64{s.d_in} * s.rank + 2 * u64{s.rank} * s.d_out);
  if (s.method == Method::multilora) r.adapter_overhead_flops = (2 * n - 1) * s.d_out;
  return r;
}

std::uint64_t activation_count(const AdapterShape& s) {
  switch (s.method) {
    case Method::ft: return 0;
    case Method::lora: return s.rank;
    case Method::multilora: return u64{s.n} * (s.rank + s.d_out);
  }
  return 0;
}

CostReport cost_report(const AdapterShape& s) {
  CostReport r = flop_count(s);
  r.cached_activation_values_per_token_per_site = activation_count(s);
  return r;
}

std::string config_fingerprint(const ModelConfig& c, const AdapterShape& s) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "d%zu-h%zu-m%zu-L%zu-v%zu-s%zu/%s-r%zu-n%zu", c.d_model,
                c.n_heads, c.d_mid, c.n_layers, c.vocab, c.max_seq,
                std::string(method_name(s.method)).c_str(), s.rank,
                s.method == Method::multilora ? s.n : std::size_t{1});
  const std::string text(buf);
  const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(text.data()),
                         static_cast<uInt>(text.size()));
  std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
  return text + "#" + buf;
}

double measure_throughput(const ModelConfig& cfg, const AdapterShape& shape,
                          const ThroughputOptions& o) {
  if (o.steps <= o.warmup) {
    throw ArgumentError("throughput: steps (" + std::to_string(o.steps) +
                        ") must exceed warmup (" + std::to_string(o.warmup) + ")");
  }
  Rng rng(o.seed);
  Model<float> model(cfg, rng);
  const std::vector<Projection> all(kAllProjections.begin(), kAllProjections.end());
  if (shape.method == Method::lora) attach_lora(model, all, shape.rank, double(shape.rank), rng);
  if (shape.method == Method::multilora) attach_multilora(model, all, shape.n, shape.rank, rng);

  MixtureSpec spec;
  spec.seed = o.seed;
  const std::size_t timed_steps = o.steps - o.warmup;
  // One pass without reshuffling: batch k is the k-th step.
  for (TaskTag t : kAllTasks) spec.count(t) = (timed_steps * o.batch_size + 3) / 4;
  const std::vector<Sample> samples = gen_mixture(spec);

  TrainOptions warm;
  warm.batch_size = o.batch_size;
  warm.steps = o.warmup;
  TrainOptions timed = warm;
  timed.steps = timed_steps;

  if (warm.steps > 0) train(model, samples, warm);
  std::size_t tokens = 0;
  const auto batches = batchify(samples, o.batch_size);
  for (std::size_t k = 0; k < timed_steps; ++k) tokens += batches[k].rows();
  const auto t0 = std::chrono::steady_clock::now();
  train(model, samples, timed);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return static_cast<double>(tokens) / secs;
}

nlohmann::json to_json(const CostReport& r) {
  return {{"method", std::string(method_name(r.shape.method))},
          {"d_in", r.shape.d_in},
          {"d_out", r.shape.d_out},
          {"r", r.shape.rank},
          {"n", r.shape.n},
          {"matmul_flops_per_token_per_site", r.matmul_flops_per_token_per_site},
          {"adapter_overhead_flops", r.adapter_overhead_flops},
          {"cached_activation_values_per_token_per_site",
           r.cached_activation_values_per_token_per_site},
          {"wall_tokens_per_second", r.wall_tokens_per_second},
          {"config_fingerprint", r.config_fingerprint}};
}

}  // namespace mlora
