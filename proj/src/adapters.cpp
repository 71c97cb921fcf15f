// SPDX-License-Identifier: Apache-2.0
#include "mlora/adapters.hpp"

#include <string>

namespace mlora {

namespace {

void require_rank(std::size_t d_in, std::size_t d_out, std::size_t rank) {
  if (rank == 0 || rank > std::min(d_in, d_out)) {
    throw ArgumentError("adapter rank " + std::to_string(rank) + " must lie in [1, " +
                        std::to_string(std::min(d_in, d_out)) + "] for a " +
                        shape_str(d_in, d_out) + " weight");
  }
}

template <typename T>
void require_input(const Matrix<T>& x, std::size_t d_in, const char* who) {
  if (x.cols() != d_in) {
    throw ShapeError(std::string(who) + ": input " + shape_str(x) + " but adapter expects " +
                     std::to_string(d_in) + " columns");
  }
}

template <typename U, typename T>
Param<U> convert_param(const Param<T>& p) {
  Param<U> out(p.name, p.value.template cast<U>(), p.trainable);
  return out;
}

}  // namespace

template <typename T>
LoraAdapter<T> make_lora(std::size_t d_in, std::size_t d_out, std::size_t rank, double alpha,
                         Rng& rng, const std::string& prefix) {
  require_rank(d_in, d_out, rank);
  LoraAdapter<T> ad;
  ad.a = Param<T>(prefix + ".lora_a", kaiming_uniform<T>(rng, d_in, rank, d_in));
  ad.b = Param<T>(prefix + ".lora_b", Matrix<T>(rank, d_out));
  ad.rank = rank;
  ad.alpha = alpha;
  return ad;
}

template <typename T>
MultiLoraAdapter<T> make_multilora(std::size_t d_in, std::size_t d_out, std::size_t n,
                                   std::size_t rank, Rng& rng, const std::string& prefix) {
  if (n == 0) throw ArgumentError("MultiLoRA needs at least one parallel module");
  require_rank(d_in, d_out, rank);
  MultiLoraAdapter<T> ad;
  ad.rank = rank;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string base = prefix + ".multilora." + std::to_string(i);
    ad.a.emplace_back(base + ".a", kaiming_uniform<T>(rng, d_in, rank, d_in));
    ad.b.emplace_back(base + ".b", kaiming_uniform<T>(rng, rank, d_out, rank));
    ad.scaling.emplace_back(base + ".scaling", Matrix<T>(1, d_out));
  }
  return ad;
}

template <typename T>
Matrix<T> lora_delta_forward(const Matrix<T>& x, const LoraAdapter<T>& ad) {
  require_input(x, ad.d_in(), "lora_delta_forward");
  return scaled(matmul(matmul(x, ad.a.value), ad.b.value), ad.static_scale());
}

template <typename T>
Matrix<T> multilora_delta_forward(const Matrix<T>& x, const MultiLoraAdapter<T>& ad) {
  require_input(x, ad.d_in(), "multilora_delta_forward");
  Matrix<T> out(x.rows(), ad.d_out());
  for (std::size_t i = 0; i < ad.n(); ++i) {
    const Matrix<T> module = matmul(matmul(x, ad.a[i].value), ad.b[i].value);
    const auto s = ad.scaling[i].value.row(0);
    for (std::size_t r = 0; r < out.rows(); ++r) {
      auto dst = out.row(r);
      const auto src = module.row(r);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += s[c] * src[c];
    }
  }
  return out;
}

template <typename T>
Var lora_delta(Graph<T>& g, Var x, LoraAdapter<T>& ad) {
  require_input(g.value(x), ad.d_in(), "lora_delta");
  const Var h = g.matmul(x, g.param(ad.a));
  const Var o = g.matmul(h, g.param(ad.b));
  return g.scale(o, ad.static_scale());
}

template <typename T>
Var multilora_delta(Graph<T>& g, Var x, MultiLoraAdapter<T>& ad) {
  require_input(g.value(x), ad.d_in(), "multilora_delta");
  Var acc{};
  for (std::size_t i = 0; i < ad.n(); ++i) {
    const Var h = g.matmul(x, g.param(ad.a[i]));
    const Var o = g.matmul(h, g.param(ad.b[i]));
    const Var s = g.mul_row(o, g.param(ad.scaling[i]));
    acc = i == 0 ? s : g.add(acc, s);
  }
  return acc;
}

template <typename T>
Matrix<T> materialize_delta(const LoraAdapter<T>& ad) {
  return scaled(matmul(ad.a.value, ad.b.value), ad.static_scale());
}

template <typename T>
Matrix<T> materialize_module_delta(const MultiLoraAdapter<T>& ad, std::size_t module) {
  if (module >= ad.n()) throw ArgumentError("MultiLoRA module index out of range");
  Matrix<T> m = matmul(ad.a[module].value, ad.b[module].value);
  const auto s = ad.scaling[module].value.row(0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] *= s[c];
  }
  return m;
}

template <typename T>
Matrix<T> materialize_delta(const MultiLoraAdapter<T>& ad) {
  Matrix<T> out(ad.d_in(), ad.d_out());
  for (std::size_t i = 0; i < ad.n(); ++i) add_inplace(out, materialize_module_delta(ad, i));
  return out;
}

template <typename T>
Matrix<T> materialize_delta(const Matrix<T>& base, const Matrix<T>& tuned) {
  return subtract(tuned, base);
}

AdapterBudget lora_budget(std::size_t d_in, std::size_t d_out, std::size_t rank) {
  const std::size_t m = rank * (d_in + d_out);
  return {m, m};
}

AdapterBudget multilora_budget(std::size_t d_in, std::size_t d_out, std::size_t n,
                               std::size_t rank) {
  const std::size_t m = n * rank * (d_in + d_out);
  return {m, m + n * d_out};
}

template <typename U, typename T>
AdapterSlot<U> convert_slot(const AdapterSlot<T>& slot) {
  if (const auto* l = std::get_if<LoraAdapter<T>>(&slot)) {
    LoraAdapter<U> out;
    out.a = convert_param<U>(l->a);
    out.b = convert_param<U>(l->b);
    out.rank = l->rank;
    out.alpha = l->alpha;
    return out;
  }
  if (const auto* m = std::get_if<MultiLoraAdapter<T>>(&slot)) {
    MultiLoraAdapter<U> out;
    out.rank = m->rank;
    for (std::size_t i = 0; i < m->n(); ++i) {
      out.a.push_back(convert_param<U>(m->a[i]));
      out.b.push_back(convert_param<U>(m->b[i]));
      out.scaling.push_back(convert_param<U>(m->scaling[i]));
    }
    return out;
  }
  return std::monostate{};
}

#define MLORA_INSTANTIATE(T)                                                                   \
  template LoraAdapter<T> make_lora<T>(std::size_t, std::size_t, std::size_t, double, Rng&,    \
                                       const std::string&);                                    \
  template MultiLoraAdapter<T> make_multilora<T>(std::size_t, std::size_t, std::size_t,        \
                                                 std::size_t, Rng&, const std::string&);       \
  template Matrix<T> lora_delta_forward(const Matrix<T>&, const LoraAdapter<T>&);              \
  template Matrix<T> multilora_delta_forward(const Matrix<T>&, const MultiLoraAdapter<T>&);    \
  template Var lora_delta(Graph<T>&, Var, LoraAdapter<T>&);                                    \
  template Var multilora_delta(Graph<T>&, Var, MultiLoraAdapter<T>&);                          \
  template Matrix<T> materialize_delta(const LoraAdapter<T>&);                                 \
  template Matrix<T> materialize_delta(const MultiLoraAdapter<T>&);                            \
  template Matrix<T> materialize_module_delta(const MultiLoraAdapter<T>&, std::size_t);        \
  template Matrix<T> materialize_delta(const Matrix<T>&, const Matrix<T>&);

MLORA_INSTANTIATE(float)
MLORA_INSTANTIATE(double)
#undef MLORA_INSTANTIATE

template AdapterSlot<float> convert_slot<float, float>(const AdapterSlot<float>&);
template AdapterSlot<double> convert_slot<double, float>(const AdapterSlot<float>&);
template AdapterSlot<float> convert_slot<float, double>(const AdapterSlot<double>&);
template AdapterSlot<double> convert_slot<double, double>(const AdapterSlot<double>&);

}  // namespace mlora
