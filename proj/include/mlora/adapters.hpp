// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <variant>
#include <vector>

#include "mlora/autodiff.hpp"
#include "mlora/rng.hpp"

namespace mlora {

// Row-vector convention throughout: y = x·W with W of shape d_in×d_out, so a
// LoRA update is Δy = (α/r)·(x·A)·B with A: d_in×r and B: r×d_out.

/// Single low-rank pair with static scale alpha/rank.
template <typename T>
struct LoraAdapter {
  Param<T> a;  // d_in × r
  Param<T> b;  // r × d_out
  std::size_t rank = 0;
  double alpha = 0.0;

  std::size_t d_in() const { return a.value.rows(); }
  std::size_t d_out() const { return b.value.cols(); }
  T static_scale() const { return static_cast<T>(alpha / static_cast<double>(rank)); }
};

/// n parallel rank-r pairs, each followed by a learnable per-output-channel
/// scaling vector. No static alpha: the scalings take that role.
template <typename T>
struct MultiLoraAdapter {
  std::vector<Param<T>> a;        // n × (d_in × r)
  std::vector<Param<T>> b;        // n × (r × d_out)
  std::vector<Param<T>> scaling;  // n × (1 × d_out)
  std::size_t rank = 0;

  std::size_t n() const { return a.size(); }
  std::size_t d_in() const { return a.front().value.rows(); }
  std::size_t d_out() const { return b.front().value.cols(); }
};

/// What sits on one linear projection: nothing (plain or fully fine-tuned
/// weight), a LoRA pair or a MultiLoRA bank.
template <typename T>
using AdapterSlot = std::variant<std::monostate, LoraAdapter<T>, MultiLoraAdapter<T>>;

/// A = Kaiming-Uniform(fan_in = d_in), B = 0.
template <typename T>
LoraAdapter<T> make_lora(std::size_t d_in, std::size_t d_out, std::size_t rank, double alpha,
                         Rng& rng, const std::string& prefix = "lora");

/// Every A_i and B_i Kaiming-Uniform (fan_in = d_in and r respectively),
/// every scaling vector zero.
template <typename T>
MultiLoraAdapter<T> make_multilora(std::size_t d_in, std::size_t d_out, std::size_t n,
                                   std::size_t rank, Rng& rng,
                                   const std::string& prefix = "multilora");

/// Δy = (α/r)·(x·A)·B.
template <typename T>
Matrix<T> lora_delta_forward(const Matrix<T>& x, const LoraAdapter<T>& adapter);

/// Δy = Σ_i scaling_i ⊙ ((x·A_i)·B_i), the scaling broadcast over rows.
template <typename T>
Matrix<T> multilora_delta_forward(const Matrix<T>& x, const MultiLoraAdapter<T>& adapter);

/// Graph-recording versions of the two forwards.
template <typename T>
Var lora_delta(Graph<T>& g, Var x, LoraAdapter<T>& adapter);
template <typename T>
Var multilora_delta(Graph<T>& g, Var x, MultiLoraAdapter<T>& adapter);

/// ΔW = (α/r)·A·B.
template <typename T>
Matrix<T> materialize_delta(const LoraAdapter<T>& adapter);

/// ΔW = Σ_i (A_i·B_i)·diag(scaling_i).
template <typename T>
Matrix<T> materialize_delta(const MultiLoraAdapter<T>& adapter);

/// ΔW_i = (A_i·B_i)·diag(scaling_i) for a single module.
template <typename T>
Matrix<T> materialize_module_delta(const MultiLoraAdapter<T>& adapter, std::size_t module);

/// ΔW = W_tuned − W_base (the fine-tuning path).
template <typename T>
Matrix<T> materialize_delta(const Matrix<T>& base, const Matrix<T>& tuned);

/// Parameter budget of one adapted site. `matmul` excludes scaling vectors,
/// `trainable` counts everything the optimizer updates.
struct AdapterBudget {
  std::size_t matmul = 0;
  std::size_t trainable = 0;

  AdapterBudget& operator+=(const AdapterBudget& o) {
    matmul += o.matmul;
    trainable += o.trainable;
    return *this;
  }
  friend bool operator==(const AdapterBudget&, const AdapterBudget&) = default;
};

AdapterBudget lora_budget(std::size_t d_in, std::size_t d_out, std::size_t rank);
AdapterBudget multilora_budget(std::size_t d_in, std::size_t d_out, std::size_t n,
                               std::size_t rank);

template <typename U, typename T>
AdapterSlot<U> convert_slot(const AdapterSlot<T>& slot);

}  // namespace mlora
