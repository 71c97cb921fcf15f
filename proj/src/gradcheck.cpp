// SPDX-License-Identifier: Apache-2.0
#include "mlora/gradcheck.hpp"

#include <bit>
#include <cmath>
#include <numeric>
#include <vector>

#include "mlora/rng.hpp"

namespace mlora {

namespace {

double evaluate(const std::function<Var(Graph<double>&)>& build_loss) {
  Graph<double> g;
  const Var loss = build_loss(g);
  const auto& v = g.value(loss);
  if (v.rows() != 1 || v.cols() != 1) throw StateError("grad_check: loss must be scalar");
  return v(0, 0);
}

}  // namespace

GradCheckReport grad_check(const std::function<Var(Graph<double>&)>& build_loss,
                           std::span<Param<double>* const> params,
                           const GradCheckOptions& options) {
  if (!(options.eps > 0.0)) throw ArgumentError("grad_check: eps must be positive");

  for (Param<double>* p : params) p->zero_grad();
  {
    Graph<double> g;
    const Var loss = build_loss(g);
    g.backward(loss);
  }
  const double f0 = evaluate(build_loss);
  const double f1 = evaluate(build_loss);
  if (std::bit_cast<std::uint64_t>(f0) != std::bit_cast<std::uint64_t>(f1)) {
    throw StateError("grad_check: loss function is not deterministic");
  }

  GradCheckReport report;
  Rng rng(options.seed);
  for (Param<double>* p : params) {
    if (!p->trainable) continue;
    const std::size_t n = p->value.size();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    if (n > options.coords_per_tensor) {
      shuffle(coords, rng);
      coords.resize(options.coords_per_tensor);
    }
    for (std::size_t idx : coords) {
      double& w = p->value.data()[idx];
      const double saved = w;
      w = saved + options.eps;
      const double plus = evaluate(build_loss);
      w = saved - options.eps;
      const double minus = evaluate(build_loss);
      w = saved;
      const double numeric = (plus - minus) / (2.0 * options.eps);
      const double analytic = p->grad.data()[idx];
      const double rel =
          std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-12);
      ++report.coords_checked;
      if (rel > report.max_rel_error || report.worst_param.empty()) {
        report.max_rel_error = std::max(report.max_rel_error, rel);
        if (rel >= report.max_rel_error) {
          report.worst_param = p->name;
          report.worst_index = idx;
          report.worst_analytic = analytic;
          report.worst_numeric = numeric;
        }
      }
    }
  }
  return report;
}

}  // namespace mlora
