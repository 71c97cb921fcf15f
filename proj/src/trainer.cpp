// SPDX-License-Identifier: Apache-2.0
#include "mlora/trainer.hpp"

#include <cmath>
#include <numeric>

#include "mlora/rng.hpp"

namespace mlora {

template <typename T>
std::vector<LossRecord> train(Model<T>& model, const std::vector<Sample>& samples,
                              const TrainOptions& options,
                              const std::function<void(const LossRecord&)>& on_step) {
  const std::vector<TokenBatch> batches = batchify(samples, options.batch_size);
  const std::size_t total =
      options.steps > 0 ? options.steps : options.epochs * batches.size();
  if (total == 0) throw ArgumentError("train: zero steps requested");
  const Schedule schedule{options.lr, total, options.warmup_ratio};

  std::vector<Param<T>*> params = model.trainable_parameters();
  if (params.empty()) throw StateError("train: model has no trainable parameters");
  OptimState<T> state;
  Rng rng(options.seed);
  std::vector<std::size_t> order(batches.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<LossRecord> log;
  log.reserve(total);
  for (std::size_t step = 1; step <= total; ++step) {
    const std::size_t pos = (step - 1) % batches.size();
    if (pos == 0 && step > 1) shuffle(order, rng);
    for (Param<T>* p : params) p->zero_grad();
    Graph<T> g;
    const Var loss = model.forward_loss(g, batches[order[pos]]);
    const double value = static_cast<double>(g.value(loss)(0, 0));
    if (!std::isfinite(value)) {
      throw NumericError("train: non-finite loss at step " + std::to_string(step));
    }
    g.backward(loss);
    if (options.max_grad_norm > 0.0) clip_grad_norm<T>(params, options.max_grad_norm);
    const double lr = lr_at(schedule, step);
    adamw_step<T>(params, state, lr, options.adamw);
    log.push_back({step, value, lr});
    if (on_step) on_step(log.back());
  }
  return log;
}

template <typename T>
double clip_grad_norm(std::span<Param<T>* const> params, double max_norm) {
  double sq = 0.0;
  for (const Param<T>* p : params)
    for (T v : p->grad.data()) sq += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const T factor = static_cast<T>(max_norm / (norm + 1e-6));
    for (Param<T>* p : params)
      for (T& v : p->grad.data()) v *= factor;
  }
  return norm;
}

template double clip_grad_norm<float>(std::span<Param<float>* const>, double);
template double clip_grad_norm<double>(std::span<Param<double>* const>, double);

double mean_loss(const std::vector<LossRecord>& log, std::size_t first, std::size_t count) {
  if (count == 0 || first + count > log.size()) throw ArgumentError("mean_loss: bad window");
  double s = 0.0;
  for (std::size_t i = first; i < first + count; ++i) s += log[i].loss;
  return s / static_cast<double>(count);
}

template std::vector<LossRecord> train<float>(Model<float>&, const std::vector<Sample>&,
                                              const TrainOptions&,
                                              const std::function<void(const LossRecord&)>&);
template std::vector<LossRecord> train<double>(Model<double>&, const std::vector<Sample>&,
                                               const TrainOptions&,
                                               const std::function<void(const LossRecord&)>&);

}  // namespace mlora
