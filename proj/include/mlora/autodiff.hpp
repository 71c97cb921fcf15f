// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mlora/matrix.hpp"

namespace mlora {

/// A named tensor that can receive gradients.
template <typename T>
struct Param {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;
  bool trainable = true;

  Param() = default;
  Param(std::string n, Matrix<T> v, bool train = true)
      : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()),
        trainable(train) {}

  void zero_grad() {
    if (grad.same_shape(value)) {
      grad.fill(T{0});
    } else {
      grad = Matrix<T>(value.rows(), value.cols());
    }
  }
};

/// Handle to a node of a Graph.
struct Var {
  std::size_t id = 0;
};

/// Reverse-mode tape over matrix-valued operations.
///
/// Every op evaluates eagerly and records a closure for the backward pass.
/// Nodes also record which tensors they keep alive for backward; the
/// activation accounting in bench reads that list.
template <typename T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var input(Matrix<T> value);
  /// Leaf bound to `p`. Gradients flow into p.grad only if p.trainable.
  Var param(Param<T>& p);

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var scale(Var a, T s);
  /// a ⊙ row, with the 1×cols `row` broadcast over the rows of a.
  Var mul_row(Var a, Var row);
  Var hadamard(Var a, Var b);
  Var silu(Var a);
  /// Gain-only RMS normalization of every row.
  Var rms_norm(Var x, Var gain, T eps);
  /// Row gather: out row i = table row ids[i].
  Var gather_rows(Var table, std::vector<int> ids);
  /// Multi-head causal self-attention over `blocks` stacked sequences of
  /// length block_len. q, k and v are (blocks·block_len)×d; head h uses
  /// columns [h·d/n_heads, (h+1)·d/n_heads).
  Var causal_attention(Var q, Var k, Var v, std::size_t n_heads, std::size_t block_len);
  /// Weighted mean next-token cross-entropy: Σ w_i·CE_i / Σ w_i.
  Var cross_entropy(Var logits, std::vector<int> targets, std::vector<T> weights);
  Var sum(Var a);
  Var sum_squares(Var a);

  const Matrix<T>& value(Var v) const;
  /// Gradient of the last backward() target with respect to v; empty if
  /// nothing flowed there.
  const Matrix<T>& grad(Var v) const;

  /// Backpropagates from the 1×1 node `loss`, accumulating into the grads of
  /// trainable params. Throws StateError if the graph has no recorded forward
  /// pass, `loss` is not a scalar, or backward already ran.
  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Number of scalar values kept alive for backward by nodes with id >=
  /// first, counting only non-param tensors that were themselves produced at
  /// or after `first`. Each tensor is counted once.
  std::size_t saved_values_since(std::size_t first) const;

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    Param<T>* param = nullptr;
    bool requires_grad = false;
    std::vector<std::size_t> saved;
    std::function<void(Graph&, std::size_t)> backward;
  };

  Var push(Node n);
  void accumulate(std::size_t id, Matrix<T> g);
  bool needs(std::size_t id) const { return nodes_[id].requires_grad; }
  void check(Var v) const;

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

extern template class Graph<float>;
extern template class Graph<double>;

namespace kernels {

/// Causal softmax probabilities for every (block, head, query) row. Layout:
/// probs[((block·n_heads + head)·L + i)·L + j], entries with j > i are 0.
template <typename T>
std::vector<T> causal_attention_probs(const Matrix<T>& q, const Matrix<T>& k,
                                      std::size_t n_heads, std::size_t block_len);

template <typename T>
T silu(T z) {
  return z / (T{1} + std::exp(-z));
}

}  // namespace kernels

}  // namespace mlora
