// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mlora/adapters.hpp"
#include "mlora/autodiff.hpp"
#include "mlora/rng.hpp"

namespace mlora {

/// The seven linear projections of a LLaMA-style decoder layer.
enum class Projection : std::uint8_t { q_proj, k_proj, v_proj, o_proj, up_proj, down_proj, gate_proj };

inline constexpr std::array<Projection, 7> kAllProjections = {
    Projection::q_proj,  Projection::k_proj,    Projection::v_proj,   Projection::o_proj,
    Projection::up_proj, Projection::down_proj, Projection::gate_proj};

std::string_view projection_name(Projection p);
std::optional<Projection> parse_projection(std::string_view name);
/// Like parse_projection but throws ArgumentError listing the valid names.
Projection projection_from_name(std::string_view name);
std::string projection_list();

enum class Method : std::uint8_t { ft, lora, multilora };
std::string_view method_name(Method m);
Method method_from_name(std::string_view name);

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_mid = 172;
  std::size_t n_layers = 2;
  std::size_t vocab = 64;
  std::size_t max_seq = 64;

  std::size_t d_head() const { return d_model / n_heads; }
  /// Throws ArgumentError if the dimensions are inconsistent.
  void validate() const;
  /// (d_in, d_out) of a projection weight.
  std::pair<std::size_t, std::size_t> projection_shape(Projection p) const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct LayerWeights {
  Param<T> attn_norm;
  Param<T> mlp_norm;
  std::array<Param<T>, 7> proj;

  Param<T>& operator[](Projection p) { return proj[static_cast<std::size_t>(p)]; }
  const Param<T>& operator[](Projection p) const { return proj[static_cast<std::size_t>(p)]; }
};

template <typename T>
struct DecoderWeights {
  Param<T> tok_emb;     // vocab × d
  Param<T> pos_emb;     // max_seq × d
  Param<T> final_norm;  // 1 × d
  Param<T> unembed;     // d × vocab
  std::vector<LayerWeights<T>> layers;
};

/// Random initialization: embeddings, projections and unembedding
/// Kaiming-Uniform over their input width, norm gains 1.
template <typename T>
DecoderWeights<T> init_decoder(const ModelConfig& cfg, Rng& rng);

/// `batch` right-padded sequences of `seq_len` tokens, row-major. Row t of a
/// sequence predicts targets[t]; loss_mask selects which rows count.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<int> tokens;
  std::vector<int> targets;
  std::vector<std::uint8_t> loss_mask;

  std::size_t rows() const { return batch * seq_len; }
  std::size_t target_count() const;

  /// One sequence, next-token targets at every position but the last.
  static TokenBatch single(const std::vector<int>& ids);
};

/// Per-site record of activation values cached for backward by adapter
/// branches, filled during a forward pass.
struct ActivationProbe {
  std::size_t tokens = 0;
  std::map<std::pair<std::size_t, Projection>, std::size_t> saved_values;

  /// Cached values per token at one site.
  std::size_t per_token(std::size_t layer, Projection p) const;
};

enum class AdapterState : std::uint8_t { none, attached, merged };

/// Decoder-only transformer: pre-norm residual layers of multi-head causal
/// attention and a SwiGLU MLP, with an optional adapter on every projection.
template <typename T>
class Model {
 public:
  Model(ModelConfig cfg, DecoderWeights<T> weights);
  Model(const ModelConfig& cfg, Rng& rng);

  const ModelConfig& config() const { return cfg_; }
  DecoderWeights<T>& weights() { return w_; }
  const DecoderWeights<T>& weights() const { return w_; }

  AdapterSlot<T>& slot(std::size_t layer, Projection p);
  const AdapterSlot<T>& slot(std::size_t layer, Projection p) const;

  AdapterState adapter_state() const { return state_; }
  void set_adapter_state(AdapterState s) { state_ = s; }
  /// Method implied by attached adapters (ft when none are attached).
  Method method() const;

  /// Base params in a fixed order followed by adapter params site by site.
  std::vector<Param<T>*> parameters();
  std::vector<const Param<T>*> parameters() const;
  std::vector<Param<T>*> trainable_parameters();
  void set_base_trainable(bool trainable);

  /// Records the forward pass and returns the rows()×vocab logits node.
  Var forward_logits(Graph<T>& g, const TokenBatch& batch, ActivationProbe* probe = nullptr);
  /// Records the forward pass and returns the scalar mean cross-entropy over
  /// masked target rows.
  Var forward_loss(Graph<T>& g, const TokenBatch& batch, ActivationProbe* probe = nullptr);

  Matrix<T> logits(const TokenBatch& batch);
  T loss(const TokenBatch& batch);

 private:
  Var linear(Graph<T>& g, Var x, std::size_t layer, Projection p, ActivationProbe* probe);
  void validate_batch(const TokenBatch& batch) const;

  ModelConfig cfg_;
  DecoderWeights<T> w_;
  std::vector<std::array<AdapterSlot<T>, 7>> slots_;
  AdapterState state_ = AdapterState::none;
};

extern template class Model<float>;
extern template class Model<double>;

/// Same weights and adapters in another precision.
template <typename U, typename T>
Model<U> convert_model(const Model<T>& m);

/// Canonical parameter name of a projection weight, e.g. "layers.1.v_proj".
std::string site_name(std::size_t layer, Projection p);
/// Inverse of site_name.
std::optional<std::pair<std::size_t, Projection>> parse_site_name(std::string_view name);

/// Layer attention weights for the standalone sublayer functions.
template <typename T>
struct AttentionWeights {
  Matrix<T> q, k, v, o;
  std::size_t n_heads = 1;
};

template <typename T>
struct MlpWeights {
  Matrix<T> gate, up, down;
};

/// head_i = softmax(x·Wq_i·(x·Wk_i)ᵀ/√d_h + causal mask)·x·Wv_i, output
/// concat(heads)·Wo.
template <typename T>
Matrix<T> mha_forward(const Matrix<T>& x, const AttentionWeights<T>& w);

/// (silu(x·W_gate) ⊙ (x·W_up))·W_down.
template <typename T>
Matrix<T> mlp_forward(const Matrix<T>& x, const MlpWeights<T>& w);

inline constexpr double kRmsNormEps = 1e-6;

}  // namespace mlora
