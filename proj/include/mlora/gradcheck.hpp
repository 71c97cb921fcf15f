// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include "mlora/autodiff.hpp"

namespace mlora {

struct GradCheckOptions {
  double eps = 1e-4;
  /// Tensors with at most this many entries are swept fully; larger ones are
  /// sampled (seeded) at exactly this many coordinates.
  std::size_t coords_per_tensor = 64;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coords_checked = 0;
};

/// Builds a fresh graph per evaluation through `build_loss` and compares the
/// backward-pass gradient of every trainable param against central
/// differences. Relative error per coordinate is
/// |analytic − numeric| / (|analytic| + |numeric| + 1e-12).
///
/// Throws StateError when two evaluations at the same point disagree.
GradCheckReport grad_check(const std::function<Var(Graph<double>&)>& build_loss,
                           std::span<Param<double>* const> params,
                           const GradCheckOptions& options = {});

}  // namespace mlora
