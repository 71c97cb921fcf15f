// SPDX-License-Identifier: Apache-2.0
#include "mlora/optim.hpp"

#include <cmath>

namespace mlora {

template <typename T>
void adamw_step(std::span<Param<T>* const> params, OptimState<T>& state, double lr,
                const AdamWConfig& cfg) {
  if (lr < 0.0 || !std::isfinite(lr)) throw ArgumentError("adamw_step: lr must be >= 0");
  if (state.step_count == 0 && state.m.empty()) {
    for (const Param<T>* p : params) {
      state.m.emplace_back(p->value.rows(), p->value.cols());
      state.v.emplace_back(p->value.rows(), p->value.cols());
    }
  }
  if (state.m.size() != params.size()) {
    throw StateError("adamw_step: parameter list changed between steps");
  }
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  const double decay = 1.0 - lr * cfg.weight_decay;

  for (std::size_t k = 0; k < params.size(); ++k) {
    Param<T>& p = *params[k];
    if (!p.trainable) continue;
    require_same_shape(p.value, p.grad, "adamw_step grad");
    require_same_shape(p.value, state.m[k], "adamw_step state");
    auto w = p.value.data();
    const auto g = p.grad.data();
    auto m = state.m[k].data();
    auto v = state.v[k].data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
      w[i] = static_cast<T>(static_cast<double>(w[i]) * decay - lr * update);
    }
  }
}

template void adamw_step<float>(std::span<Param<float>* const>, OptimState<float>&, double,
                                const AdamWConfig&);
template void adamw_step<double>(std::span<Param<double>* const>, OptimState<double>&, double,
                                 const AdamWConfig&);

std::size_t Schedule::warmup_steps() const {
  return static_cast<std::size_t>(std::llround(warmup_ratio * static_cast<double>(total_steps)));
}

double lr_at(const Schedule& s, std::size_t step) {
  if (s.warmup_ratio < 0.0 || s.warmup_ratio > 1.0) {
    throw ArgumentError("lr_at: warmup_ratio must lie in [0, 1]");
  }
  if (step > s.total_steps) {
    throw ArgumentError("lr_at: step " + std::to_string(step) + " beyond total " +
                        std::to_string(s.total_steps));
  }
  const std::size_t warm = s.warmup_steps();
  if (step < warm) {
    return s.base_lr * static_cast<double>(step) / static_cast<double>(warm);
  }
  if (s.total_steps == warm) return s.base_lr;
  return s.base_lr * static_cast<double>(s.total_steps - step) /
         static_cast<double>(s.total_steps - warm);
}

}  // namespace mlora
