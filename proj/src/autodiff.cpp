// SPDX-License-Identifier: Apache-2.0
#include "mlora/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

namespace mlora {

template <typename T>
Var Graph<T>::push(Node n) {
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
void Graph<T>::check(Var v) const {
  if (v.id >= nodes_.size()) throw StateError("graph: unknown node " + std::to_string(v.id));
}

template <typename T>
const Matrix<T>& Graph<T>::value(Var v) const {
  check(v);
  const Node& n = nodes_[v.id];
  return n.param ? n.param->value : n.value;
}

template <typename T>
const Matrix<T>& Graph<T>::grad(Var v) const {
  check(v);
  return nodes_[v.id].grad;
}

template <typename T>
void Graph<T>::accumulate(std::size_t id, Matrix<T> g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.empty()) {
    n.grad = std::move(g);
  } else {
    add_inplace(n.grad, g);
  }
}

template <typename T>
Var Graph<T>::input(Matrix<T> value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::param(Param<T>& p) {
  Node n;
  n.param = &p;
  n.requires_grad = p.trainable;
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::matmul(Var a, Var b) {
  check(a);
  check(b);
  Node n;
  n.value = mlora::matmul(value(a), value(b));
  n.requires_grad = needs(a.id) || needs(b.id);
  n.saved = {a.id, b.id};
  n.backward = [a, b](Graph& g, std::size_t self) {
    const Matrix<T>& up = g.nodes_[self].grad;
    if (g.needs(a.id)) g.accumulate(a.id, matmul_nt(up, g.value(b)));
    if (g.needs(b.id)) g.accumulate(b.id, matmul_tn(g.value(a), up));
  };
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::add(Var a, Var b) {
  check(a);
  check(b);
  Node n;
  n.value = mlora::add(value(a), value(b));
  n.requires_grad = needs(a.id) || needs(b.id);
  n.backward = [a, b](Graph& g, std::size_t self) {
    const Matrix<T>& up = g.nodes_[self].grad;
    if (g.needs(a.id)) g.accumulate(a.id, up);
    if (g.needs(b.id)) g.accumulate(b.id, up);
  };
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::scale(Var a, T s) {
  check(a);
  Node n;
  n.value = scaled(value(a), s);
  n.requires_grad = needs(a.id);
  n.backward = [a, s](Graph& g, std::size_t self) {
    g.accumulate(a.id, scaled(g.nodes_[self].grad, s));
  };
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::mul_row(Var a, Var row) {
  check(a);
  check(row);
  const Matrix<T>& av = value(a);
  const Matrix<T>& rv = value(row);
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw ShapeError("mul_row: " + shape_str(av) + " with row " + shape_str(rv));
  }
  Node n;
  n.value = av;
  for (std::size_t i = 0; i < av.rows(); ++i) {
    auto out = n.value.row(i);
    for (std::size_t j = 0; j < av.cols(); ++j) out[j] *= rv(0, j);
  }
  n.requires_grad = needs(a.id) || needs(row.id);
  n.saved = {a.id, row.id};
  n.backward = [a, row](Graph& g, std::size_t self) {
    const Matrix<T>& up = g.nodes_[self].grad;
    const Matrix<T>& av = g.value(a);
    const Matrix<T>& rv = g.value(row);
    if (g.needs(a.id)) {
      Matrix<T> ga = up;
      for (std::size_t i = 0; i < ga.rows(); ++i) {
        auto r = ga.row(i);
        for (std::size_t j = 0; j < ga.cols(); ++j) r[j] *= rv(0, j);
      }
      g.accumulate(a.id, std::move(ga));
    }
    if (g.needs(row.id)) {
      Matrix<T> gr(1, av.cols());
      for (std::size_t i = 0; i < av.rows(); ++i)
        for (std::size_t j = 0; j < av.cols(); ++j) gr(0, j) += up(i, j) * av(i, j);
      g.accumulate(row.id, std::move(gr));
    }
  };
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::hadamard(Var a, Var b) {
  check(a);
  check(b);
  const Matrix<T>& av = value(a);
  const Matrix<T>& bv = value(b);
  require_same_shape(av, bv, "hadamard");
  Node n;
  n.value = av;
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value.data()[i] *= bv.data()[i];
  n.requires_grad = needs(a.id) || needs(b.id);
  n.saved = {a.id, b.id};
  n.backward = [a, b](Graph& g, std::size_t self) {
    const Matrix<T>& up = g.nodes_[self].grad;
    if (g.needs(a.id)) {
      Matrix<T> ga = up;
      for (std::size_t i = 0; i < ga.size(); ++i) ga.data()[i] *= g.value(b).data()[i];
      g.accumulate(a.id, std::move(ga));
    }
    if (g.needs(b.id)) {
      Matrix<T> gb = up;
      for (std::size_t i = 0; i < gb.size(); ++i) gb.data()[i] *= g.value(a).data()[i];
      g.accumulate(b.id, std::move(gb));
    }
  };
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::silu(Var a) {
  check(a);
  Node n;
  n.value = value(a);
  for (auto& z : n.value.data()) z = kernels::silu(z);
  n.requires_grad = needs(a.id);
  n.saved = {a.id};
  n.backward = [a](Graph& g, std::size_t self) {
    Matrix<T> ga = g.nodes_[self].grad;
    const auto x = g.value(a).data();
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const T sig = T{1} / (T{1} + std::exp(-x[i]));
      ga.data()[i] *= sig * (T{1} + x[i] * (T{1} - sig));
    }
    g.accumulate(a.id, std::move(ga));
  };
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::rms_norm(Var x, Var gain, T eps) {
  check(x);
  check(gain);
  const Matrix<T>& xv = value(x);
  const Matrix<T>& gv = value(gain);
  if (gv.rows() != 1 || gv.cols() != xv.cols()) {
    throw ShapeError("rms_norm: input " + shape_str(xv) + " gain " + shape_str(gv));
  }
  const std::size_t cols = xv.cols();
  std::vector<T> inv_rms(xv.rows());
  Node n;
  n.value = Matrix<T>(xv.rows(), cols);
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    T ms{0};
    for (T v : xv.row(i)) ms += v * v;
    ms /= static_cast<T>(cols);
    inv_rms[i] = T{1} / std::sqrt(ms + eps);
    for (std::size_t j = 0; j < cols; ++j) n.value(i, j) = xv(i, j) * inv_rms[i] * gv(0, j);
  }
  n.requires_grad = needs(x.id) || needs(gain.id);
  n.saved = {x.id, gain.id};
  n.backward = [x, gain, inv_rms = std::move(inv_rms)](Graph& g, std::size_t self) {
    const Matrix<T>& up = g.nodes_[self].grad;
    const Matrix<T>& xv = g.value(x);
    const Matrix<T>& gv = g.value(gain);
    const std::size_t cols = xv.cols();
    if (g.needs(x.id)) {
      Matrix<T> gx(xv.rows(), cols);
      for (std::size_t i = 0; i < xv.rows(); ++i) {
        // y_j = x_j·r·g_j, r = (mean x² + eps)^-1/2
        // dx_k = r·g_k·dy_k − x_k·r³/cols·Σ_j dy_j·g_j·x_j
        T dot{0};
        for (std::size_t j = 0; j < cols; ++j) dot += up(i, j) * gv(0, j) * xv(i, j);
        const T r = inv_rms[i];
        const T coeff = r * r * r * dot / static_cast<T>(cols);
        for (std::size_t j = 0; j < cols; ++j)
          gx(i, j) = r * gv(0, j) * up(i, j) - xv(i, j) * coeff;
      }
      g.accumulate(x.id, std::move(gx));
    }
    if (g.needs(gain.id)) {
      Matrix<T> gg(1, cols);
      for (std::size_t i = 0; i < xv.rows(); ++i)
        for (std::size_t j = 0; j < cols; ++j) gg(0, j) += up(i, j) * xv(i, j) * inv_rms[i];
      g.accumulate(gain.id, std::move(gg));
    }
  };
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::gather_rows(Var table, std::vector<int> ids) {
  check(table);
  const Matrix<T>& tv = value(table);
  Node n;
  n.value = Matrix<T>(ids.size(), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows()) {
      throw ArgumentError("gather_rows: index " + std::to_string(ids[i]) + " outside table of " +
                          std::to_string(tv.rows()) + " rows");
    }
    std::copy_n(tv.row(static_cast<std::size_t>(ids[i])).begin(), tv.cols(), n.value.row(i).begin());
  }
  n.requires_grad = needs(table.id);
  n.backward = [table, ids = std::move(ids)](Graph& g, std::size_t self) {
    const Matrix<T>& up = g.nodes_[self].grad;
    const Matrix<T>& tv = g.value(table);
    Matrix<T> gt(tv.rows(), tv.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      auto dst = gt.row(static_cast<std::size_t>(ids[i]));
      const auto src = up.row(i);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
    g.accumulate(table.id, std::move(gt));
  };
  return push(std::move(n));
}

namespace kernels {

template <typename T>
std::vector<T> causal_attention_probs(const Matrix<T>& q, const Matrix<T>& k,
                                      std::size_t n_heads, std::size_t block_len) {
  if (!q.same_shape(k)) throw ShapeError("attention: q " + shape_str(q) + " k " + shape_str(k));
  if (n_heads == 0 || q.cols() % n_heads != 0) {
    throw ShapeError("attention: width " + std::to_string(q.cols()) + " not divisible by " +
                     std::to_string(n_heads) + " heads");
  }
  if (block_len == 0 || q.rows() % block_len != 0) {
    throw ShapeError("attention: " + std::to_string(q.rows()) + " rows not a multiple of " +
                     std::to_string(block_len));
  }
  const std::size_t blocks = q.rows() / block_len;
  const std::size_t dh = q.cols() / n_heads;
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dh));
  const std::size_t L = block_len;
  std::vector<T> probs(blocks * n_heads * L * L, T{0});
  for (std::size_t b = 0; b < blocks; ++b) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < L; ++i) {
        T* p = probs.data() + ((b * n_heads + h) * L + i) * L;
        const T* qi = q.row(b * L + i).data() + c0;
        // positions j > i are masked to -inf: their probability is exactly 0
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const T* kj = k.row(b * L + j).data() + c0;
          T s{0};
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          p[j] = s * inv_sqrt;
          mx = std::max(mx, p[j]);
        }
        T denom{0};
        for (std::size_t j = 0; j <= i; ++j) {
          p[j] = std::exp(p[j] - mx);
          denom += p[j];
        }
        for (std::size_t j = 0; j <= i; ++j) p[j] /= denom;
      }
    }
  }
  return probs;
}

template std::vector<float> causal_attention_probs(const Matrix<float>&, const Matrix<float>&,
                                                   std::size_t, std::size_t);
template std::vector<double> causal_attention_probs(const Matrix<double>&, const Matrix<double>&,
                                                    std::size_t, std::size_t);

}  // namespace kernels

template <typename T>
Var Graph<T>::causal_attention(Var q, Var k, Var v, std::size_t n_heads, std::size_t block_len) {
  check(q);
  check(k);
  check(v);
  const Matrix<T>& qv = value(q);
  const Matrix<T>& kv = value(k);
  const Matrix<T>& vv = value(v);
  require_same_shape(qv, vv, "attention v");
  auto probs = kernels::causal_attention_probs(qv, kv, n_heads, block_len);
  const std::size_t L = block_len;
  const std::size_t blocks = qv.rows() / L;
  const std::size_t dh = qv.cols() / n_heads;

  Node n;
  n.value = Matrix<T>(qv.rows(), qv.cols());
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t h = 0; h < n_heads; ++h)
      for (std::size_t i = 0; i < L; ++i) {
        const T* p = probs.data() + ((b * n_heads + h) * L + i) * L;
        T* out = n.value.row(b * L + i).data() + h * dh;
        for (std::size_t j = 0; j <= i; ++j) {
          const T* vj = vv.row(b * L + j).data() + h * dh;
          for (std::size_t c = 0; c < dh; ++c) out[c] += p[j] * vj[c];
        }
      }
  n.requires_grad = needs(q.id) || needs(k.id) || needs(v.id);
  n.saved = {q.id, k.id, v.id};
  n.backward = [q, k, v, n_heads, L, blocks, dh, probs = std::move(probs)](Graph& g,
                                                                           std::size_t self) {
    const Matrix<T>& up = g.nodes_[self].grad;
    const Matrix<T>& qv = g.value(q);
    const Matrix<T>& kv = g.value(k);
    const Matrix<T>& vv = g.value(v);
    const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dh));
    Matrix<T> gq(qv.rows(), qv.cols()), gk(qv.rows(), qv.cols()), gv(qv.rows(), qv.cols());
    std::vector<T> dp(L);
    for (std::size_t b = 0; b < blocks; ++b)
      for (std::size_t h = 0; h < n_heads; ++h)
        for (std::size_t i = 0; i < L; ++i) {
          const T* p = probs.data() + ((b * n_heads + h) * L + i) * L;
          const std::size_t c0 = h * dh;
          const T* dout = up.row(b * L + i).data() + c0;
          T weighted{0};
          for (std::size_t j = 0; j <= i; ++j) {
            const T* vj = vv.row(b * L + j).data() + c0;
            T* gvj = gv.row(b * L + j).data() + c0;
            T s{0};
            for (std::size_t c = 0; c < dh; ++c) {
              s += dout[c] * vj[c];
              gvj[c] += p[j] * dout[c];
            }
            dp[j] = s;
            weighted += p[j] * s;
          }
          const T* qi = qv.row(b * L + i).data() + c0;
          T* gqi = gq.row(b * L + i).data() + c0;
          for (std::size_t j = 0; j <= i; ++j) {
            const T ds = p[j] * (dp[j] - weighted) * inv_sqrt;
            const T* kj = kv.row(b * L + j).data() + c0;
            T* gkj = gk.row(b * L + j).data() + c0;
            for (std::size_t c = 0; c < dh; ++c) {
              gqi[c] += ds * kj[c];
              gkj[c] += ds * qi[c];
            }
          }
        }
    g.accumulate(q.id, std::move(gq));
    g.accumulate(k.id, std::move(gk));
    g.accumulate(v.id, std::move(gv));
  };
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::cross_entropy(Var logits, std::vector<int> targets, std::vector<T> weights) {
  check(logits);
  const Matrix<T>& z = value(logits);
  if (targets.size() != z.rows() || weights.size() != z.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(z.rows()) + " rows, " +
                     std::to_string(targets.size()) + " targets, " +
                     std::to_string(weights.size()) + " weights");
  }
  double total_w = 0.0;
  for (T w : weights) total_w += static_cast<double>(w);
  if (!(total_w > 0.0)) throw ArgumentError("cross_entropy: no weighted positions");

  Matrix<T> probs(z.rows(), z.cols());
  double loss = 0.0;
  for (std::size_t i = 0; i < z.rows(); ++i) {
    if (weights[i] == T{0}) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= z.cols()) {
      throw ArgumentError("cross_entropy: target " + std::to_string(targets[i]) +
                          " outside vocabulary of " + std::to_string(z.cols()));
    }
    const auto row = z.row(i);
    const T mx = *std::max_element(row.begin(), row.end());
    T denom{0};
    for (std::size_t j = 0; j < row.size(); ++j) {
      probs(i, j) = std::exp(row[j] - mx);
      denom += probs(i, j);
    }
    for (std::size_t j = 0; j < row.size(); ++j) probs(i, j) /= denom;
    const T lse = mx + std::log(denom);
    loss += static_cast<double>(weights[i]) *
            static_cast<double>(lse - row[static_cast<std::size_t>(targets[i])]);
  }
  Node n;
  n.value = Matrix<T>(1, 1, static_cast<T>(loss / total_w));
  n.requires_grad = needs(logits.id);
  n.saved = {logits.id};
  const T inv_w = static_cast<T>(1.0 / total_w);
  n.backward = [logits, targets = std::move(targets), weights = std::move(weights),
                probs = std::move(probs), inv_w](Graph& g, std::size_t self) {
    const T up = g.nodes_[self].grad(0, 0);
    Matrix<T> gz(probs.rows(), probs.cols());
    for (std::size_t i = 0; i < probs.rows(); ++i) {
      if (weights[i] == T{0}) continue;
      const T c = up * weights[i] * inv_w;
      for (std::size_t j = 0; j < probs.cols(); ++j) gz(i, j) = c * probs(i, j);
      gz(i, static_cast<std::size_t>(targets[i])) -= c;
    }
    g.accumulate(logits.id, std::move(gz));
  };
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::sum(Var a) {
  check(a);
  T s{0};
  for (T v : value(a).data()) s += v;
  Node n;
  n.value = Matrix<T>(1, 1, s);
  n.requires_grad = needs(a.id);
  n.backward = [a](Graph& g, std::size_t self) {
    const Matrix<T>& av = g.value(a);
    g.accumulate(a.id, Matrix<T>(av.rows(), av.cols(), g.nodes_[self].grad(0, 0)));
  };
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::sum_squares(Var a) {
  check(a);
  T s{0};
  for (T v : value(a).data()) s += v * v;
  Node n;
  n.value = Matrix<T>(1, 1, s);
  n.requires_grad = needs(a.id);
  n.saved = {a.id};
  n.backward = [a](Graph& g, std::size_t self) {
    g.accumulate(a.id, scaled(g.value(a), T{2} * g.nodes_[self].grad(0, 0)));
  };
  return push(std::move(n));
}

template <typename T>
void Graph<T>::backward(Var loss) {
  if (nodes_.empty()) throw StateError("backward: no forward pass recorded");
  if (loss.id >= nodes_.size()) throw StateError("backward: unknown loss node");
  if (backward_done_) throw StateError("backward: already ran on this graph");
  const Matrix<T>& lv = value(loss);
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw StateError("backward: loss must be 1x1, got " + shape_str(lv));
  }
  backward_done_ = true;
  if (!nodes_[loss.id].requires_grad) return;
  nodes_[loss.id].grad = Matrix<T>(1, 1, T{1});
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.grad.empty()) continue;
    if (n.backward) {
      n.backward(*this, id);  // no nodes are added during backward
    } else if (n.param && n.param->trainable) {
      Param<T>& p = *n.param;
      if (!p.grad.same_shape(p.value)) p.grad = Matrix<T>(p.value.rows(), p.value.cols());
      add_inplace(p.grad, n.grad);
    }
  }
}

template <typename T>
std::size_t Graph<T>::saved_values_since(std::size_t first) const {
  std::unordered_set<std::size_t> seen;
  std::size_t total = 0;
  for (std::size_t id = first; id < nodes_.size(); ++id) {
    for (std::size_t s : nodes_[id].saved) {
      if (s < first || nodes_[s].param) continue;
      if (seen.insert(s).second) total += nodes_[s].value.size();
    }
  }
  return total;
}

template class Graph<float>;
template class Graph<double>;

}  // namespace mlora
