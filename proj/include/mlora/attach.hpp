// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "mlora/adapters.hpp"
#include "mlora/model.hpp"

namespace mlora {

/// Attaches a LoRA pair to every targeted projection of every layer and
/// freezes all base weights. Throws ArgumentError for an invalid rank and
/// StateError if adapters are already attached or the model was merged.
template <typename T>
void attach_lora(Model<T>& model, const std::vector<Projection>& targets, std::size_t rank,
                 double alpha, Rng& rng);

/// Attaches n parallel LoRA modules with zero scaling vectors to every
/// targeted projection and freezes all base weights.
template <typename T>
void attach_multilora(Model<T>& model, const std::vector<Projection>& targets, std::size_t n,
                      std::size_t rank, Rng& rng);

/// Folds every adapter into its base weight (W ← W + ΔW) and removes the
/// adapter structure. Throws StateError on a merged model or one without
/// adapters.
template <typename T>
void merge(Model<T>& model);

/// ΔW of the adapter on one site.
template <typename T>
Matrix<T> site_delta(const Model<T>& model, std::size_t layer, Projection p);

/// Sum of per-site budgets over every adapted site.
template <typename T>
AdapterBudget model_budget(const Model<T>& model);

/// Parses a comma-separated projection list; "all" selects all seven.
std::vector<Projection> parse_targets(std::string_view list);

}  // namespace mlora
