// SPDX-License-Identifier: Apache-2.0
#include "mlora/attach.hpp"

#include <string>

namespace mlora {

namespace {

template <typename T>
void require_attachable(const Model<T>& model, const std::vector<Projection>& targets) {
  if (model.adapter_state() == AdapterState::merged) {
    throw StateError("cannot attach adapters to a merged model");
  }
  if (model.adapter_state() == AdapterState::attached) {
    throw StateError("adapters are already attached");
  }
  if (targets.empty()) throw ArgumentError("no target projections given");
}

}  // namespace

template <typename T>
void attach_lora(Model<T>& model, const std::vector<Projection>& targets, std::size_t rank,
                 double alpha, Rng& rng) {
  require_attachable(model, targets);
  const ModelConfig& cfg = model.config();
  for (Projection p : targets) {
    const auto [din, dout] = cfg.projection_shape(p);
    if (rank == 0 || rank > std::min(din, dout)) {
      throw ArgumentError("rank " + std::to_string(rank) + " exceeds min dimension of " +
                          std::string(projection_name(p)));
    }
  }
  for (std::size_t l = 0; l < cfg.n_layers; ++l)
    for (Projection p : targets) {
      const auto [din, dout] = cfg.projection_shape(p);
      model.slot(l, p) = make_lora<T>(din, dout, rank, alpha, rng, site_name(l, p));
    }
  model.set_base_trainable(false);
  model.set_adapter_state(AdapterState::attached);
}

template <typename T>
void attach_multilora(Model<T>& model, const std::vector<Projection>& targets, std::size_t n,
                      std::size_t rank, Rng& rng) {
  require_attachable(model, targets);
  if (n == 0) throw ArgumentError("MultiLoRA needs n >= 1");
  const ModelConfig& cfg = model.config();
  for (Projection p : targets) {
    const auto [din, dout] = cfg.projection_shape(p);
    if (rank == 0 || rank > std::min(din, dout)) {
      throw ArgumentError("rank " + std::to_string(rank) + " exceeds min dimension of " +
                          std::string(projection_name(p)));
    }
  }
  for (std::size_t l = 0; l < cfg.n_layers; ++l)
    for (Projection p : targets) {
      const auto [din, dout] = cfg.projection_shape(p);
      model.slot(l, p) = make_multilora<T>(din, dout, n, rank, rng, site_name(l, p));
    }
  model.set_base_trainable(false);
  model.set_adapter_state(AdapterState::attached);
}

template <typename T>
Matrix<T> site_delta(const Model<T>& model, std::size_t layer, Projection p) {
  const AdapterSlot<T>& s = model.slot(layer, p);
  if (const auto* l = std::get_if<LoraAdapter<T>>(&s)) return materialize_delta(*l);
  if (const auto* m = std::get_if<MultiLoraAdapter<T>>(&s)) return materialize_delta(*m);
  throw ArgumentError("no adapter on " + site_name(layer, p));
}

template <typename T>
void merge(Model<T>& model) {
  if (model.adapter_state() == AdapterState::merged) {
    throw StateError("model is already merged");
  }
  if (model.adapter_state() != AdapterState::attached) {
    throw StateError("model has no adapters to merge");
  }
  const ModelConfig& cfg = model.config();
  for (std::size_t l = 0; l < cfg.n_layers; ++l)
    for (Projection p : kAllProjections) {
      if (std::holds_alternative<std::monostate>(model.slot(l, p))) continue;
      add_inplace(model.weights().layers[l][p].value, site_delta(model, l, p));
      model.slot(l, p) = std::monostate{};
    }
  model.set_adapter_state(AdapterState::merged);
}

template <typename T>
AdapterBudget model_budget(const Model<T>& model) {
  AdapterBudget total;
  const ModelConfig& cfg = model.config();
  for (std::size_t l = 0; l < cfg.n_layers; ++l)
    for (Projection p : kAllProjections) {
      const auto& s = model.slot(l, p);
      const auto [din, dout] = cfg.projection_shape(p);
      if (const auto* lo = std::get_if<LoraAdapter<T>>(&s)) {
        total += lora_budget(din, dout, lo->rank);
      } else if (const auto* m = std::get_if<MultiLoraAdapter<T>>(&s)) {
        total += multilora_budget(din, dout, m->n(), m->rank);
      }
    }
  return total;
}

std::vector<Projection> parse_targets(std::string_view list) {
  if (list == "all") return {kAllProjections.begin(), kAllProjections.end()};
  std::vector<Projection> out;
  while (!list.empty()) {
    const auto comma = list.find(',');
    const auto item = list.substr(0, comma);
    if (!item.empty()) {
      const Projection p = projection_from_name(item);
      if (std::find(out.begin(), out.end(), p) == out.end()) out.push_back(p);
    }
    if (comma == std::string_view::npos) break;
    list.remove_prefix(comma + 1);
  }
  if (out.empty()) throw ArgumentError("empty target list; valid: " + projection_list());
  return out;
}

#define MLORA_INSTANTIATE(T)                                                                  \
  template void attach_lora<T>(Model<T>&, const std::vector<Projection>&, std::size_t, double, \
                               Rng&);                                                         \
  template void attach_multilora<T>(Model<T>&, const std::vector<Projection>&, std::size_t,    \
                                    std::size_t, Rng&);                                        \
  template void merge<T>(Model<T>&);                                                          \
  template Matrix<T> site_delta<T>(const Model<T>&, std::size_t, Projection);                 \
  template AdapterBudget model_budget<T>(const Model<T>&);

MLORA_INSTANTIATE(float)
MLORA_INSTANTIATE(double)
#undef MLORA_INSTANTIATE

}  // namespace mlora
