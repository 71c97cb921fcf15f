// SPDX-License-Identifier: Apache-2.0
#include "mlora/model.hpp"

#include <algorithm>
#include <charconv>

namespace mlora {

namespace {

constexpr std::array<std::string_view, 7> kProjectionNames = {
    "q_proj", "k_proj", "v_proj", "o_proj", "up_proj", "down_proj", "gate_proj"};

template <typename T>
Param<T> gain_param(std::string name, std::size_t d) {
  return Param<T>(std::move(name), Matrix<T>(1, d, T{1}));
}

}  // namespace

std::string_view projection_name(Projection p) {
  return kProjectionNames[static_cast<std::size_t>(p)];
}

std::optional<Projection> parse_projection(std::string_view name) {
  for (std::size_t i = 0; i < kProjectionNames.size(); ++i)
    if (kProjectionNames[i] == name) return static_cast<Projection>(i);
  return std::nullopt;
}

std::string projection_list() {
  std::string out;
  for (auto n : kProjectionNames) {
    if (!out.empty()) out += ", ";
    out += n;
  }
  return out;
}

Projection projection_from_name(std::string_view name) {
  if (auto p = parse_projection(name)) return *p;
  throw ArgumentError("unknown projection '" + std::string(name) + "'; valid: " +
                      projection_list());
}

std::string_view method_name(Method m) {
  switch (m) {
    case Method::ft: return "ft";
    case Method::lora: return "lora";
    case Method::multilora: return "multilora";
  }
  return "?";
}

Method method_from_name(std::string_view name) {
  if (name == "ft") return Method::ft;
  if (name == "lora") return Method::lora;
  if (name == "multilora") return Method::multilora;
  throw ArgumentError("unknown method '" + std::string(name) + "'; valid: ft, lora, multilora");
}

void ModelConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || n_layers == 0 || vocab == 0 || max_seq == 0) {
    throw ArgumentError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ArgumentError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                        std::to_string(n_heads));
  }
  if (d_mid <= d_model) throw ArgumentError("d_mid must exceed d_model");
}

std::pair<std::size_t, std::size_t> ModelConfig::projection_shape(Projection p) const {
  switch (p) {
    case Projection::up_proj:
    case Projection::gate_proj: return {d_model, d_mid};
    case Projection::down_proj: return {d_mid, d_model};
    default: return {d_model, d_model};
  }
}

std::size_t TokenBatch::target_count() const {
  return static_cast<std::size_t>(std::count(loss_mask.begin(), loss_mask.end(), 1));
}

TokenBatch TokenBatch::single(const std::vector<int>& ids) {
  if (ids.size() < 2) throw ArgumentError("a sequence needs at least two tokens");
  TokenBatch b;
  b.batch = 1;
  b.seq_len = ids.size();
  b.tokens = ids;
  b.targets.assign(ids.size(), 0);
  b.loss_mask.assign(ids.size(), 0);
  for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
    b.targets[t] = ids[t + 1];
    b.loss_mask[t] = 1;
  }
  return b;
}

std::size_t ActivationProbe::per_token(std::size_t layer, Projection p) const {
  const auto it = saved_values.find({layer, p});
  if (it == saved_values.end() || tokens == 0) return 0;
  return it->second / tokens;
}

std::string site_name(std::size_t layer, Projection p) {
  return "layers." + std::to_string(layer) + "." + std::string(projection_name(p));
}

std::optional<std::pair<std::size_t, Projection>> parse_site_name(std::string_view name) {
  constexpr std::string_view prefix = "layers.";
  if (name.substr(0, prefix.size()) != prefix) return std::nullopt;
  name.remove_prefix(prefix.size());
  const auto dot = name.find('.');
  if (dot == std::string_view::npos) return std::nullopt;
  std::size_t layer = 0;
  const auto [ptr, ec] = std::from_chars(name.data(), name.data() + dot, layer);
  if (ec != std::errc() || ptr != name.data() + dot) return std::nullopt;
  const auto proj = parse_projection(name.substr(dot + 1));
  if (!proj) return std::nullopt;
  return std::make_pair(layer, *proj);
}

template <typename T>
DecoderWeights<T> init_decoder(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t d = cfg.d_model;
  DecoderWeights<T> w;
  w.tok_emb = Param<T>("tok_emb", kaiming_uniform<T>(rng, cfg.vocab, d, d));
  w.pos_emb = Param<T>("pos_emb", kaiming_uniform<T>(rng, cfg.max_seq, d, d));
  w.final_norm = gain_param<T>("final_norm", d);
  w.unembed = Param<T>("unembed", kaiming_uniform<T>(rng, d, cfg.vocab, d));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    LayerWeights<T> lw;
    const std::string prefix = "layers." + std::to_string(l) + ".";
    lw.attn_norm = gain_param<T>(prefix + "attn_norm", d);
    lw.mlp_norm = gain_param<T>(prefix + "mlp_norm", d);
    for (Projection p : kAllProjections) {
      const auto [din, dout] = cfg.projection_shape(p);
      lw[p] = Param<T>(site_name(l, p), kaiming_uniform<T>(rng, din, dout, din));
    }
    w.layers.push_back(std::move(lw));
  }
  return w;
}

template <typename T>
Model<T>::Model(ModelConfig cfg, DecoderWeights<T> weights)
    : cfg_(std::move(cfg)), w_(std::move(weights)), slots_(cfg_.n_layers) {
  cfg_.validate();
  if (w_.layers.size() != cfg_.n_layers) throw ShapeError("layer count does not match config");
  const std::size_t d = cfg_.d_model;
  auto expect = [](const Param<T>& p, std::size_t r, std::size_t c) {
    if (p.value.rows() != r || p.value.cols() != c) {
      throw ShapeError(p.name + ": expected " + shape_str(r, c) + ", got " + shape_str(p.value));
    }
  };
  expect(w_.tok_emb, cfg_.vocab, d);
  expect(w_.pos_emb, cfg_.max_seq, d);
  expect(w_.final_norm, 1, d);
  expect(w_.unembed, d, cfg_.vocab);
  for (const auto& lw : w_.layers) {
    expect(lw.attn_norm, 1, d);
    expect(lw.mlp_norm, 1, d);
    for (Projection p : kAllProjections) {
      const auto [din, dout] = cfg_.projection_shape(p);
      expect(lw[p], din, dout);
    }
  }
}

template <typename T>
Model<T>::Model(const ModelConfig& cfg, Rng& rng) : Model(cfg, init_decoder<T>(cfg, rng)) {}

template <typename T>
AdapterSlot<T>& Model<T>::slot(std::size_t layer, Projection p) {
  if (layer >= slots_.size()) throw ArgumentError("layer index out of range");
  return slots_[layer][static_cast<std::size_t>(p)];
}

template <typename T>
const AdapterSlot<T>& Model<T>::slot(std::size_t layer, Projection p) const {
  if (layer >= slots_.size()) throw ArgumentError("layer index out of range");
  return slots_[layer][static_cast<std::size_t>(p)];
}

template <typename T>
Method Model<T>::method() const {
  for (const auto& layer : slots_)
    for (const auto& s : layer) {
      if (std::holds_alternative<LoraAdapter<T>>(s)) return Method::lora;
      if (std::holds_alternative<MultiLoraAdapter<T>>(s)) return Method::multilora;
    }
  return Method::ft;
}

template <typename T>
std::vector<Param<T>*> Model<T>::parameters() {
  std::vector<Param<T>*> out = {&w_.tok_emb, &w_.pos_emb};
  for (auto& lw : w_.layers) {
    out.push_back(&lw.attn_norm);
    out.push_back(&lw.mlp_norm);
    for (auto& p : lw.proj) out.push_back(&p);
  }
  out.push_back(&w_.final_norm);
  out.push_back(&w_.unembed);
  for (auto& layer : slots_)
    for (auto& s : layer) {
      if (auto* l = std::get_if<LoraAdapter<T>>(&s)) {
        out.push_back(&l->a);
        out.push_back(&l->b);
      } else if (auto* m = std::get_if<MultiLoraAdapter<T>>(&s)) {
        for (std::size_t i = 0; i < m->n(); ++i) {
          out.push_back(&m->a[i]);
          out.push_back(&m->b[i]);
          out.push_back(&m->scaling[i]);
        }
      }
    }
  return out;
}

template <typename T>
std::vector<const Param<T>*> Model<T>::parameters() const {
  auto mut = const_cast<Model*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

template <typename T>
std::vector<Param<T>*> Model<T>::trainable_parameters() {
  auto all = parameters();
  std::erase_if(all, [](const Param<T>* p) { return !p->trainable; });
  return all;
}

template <typename T>
void Model<T>::set_base_trainable(bool trainable) {
  w_.tok_emb.trainable = trainable;
  w_.pos_emb.trainable = trainable;
  w_.final_norm.trainable = trainable;
  w_.unembed.trainable = trainable;
  for (auto& lw : w_.layers) {
    lw.attn_norm.trainable = trainable;
    lw.mlp_norm.trainable = trainable;
    for (auto& p : lw.proj) p.trainable = trainable;
  }
}

template <typename T>
Var Model<T>::linear(Graph<T>& g, Var x, std::size_t layer, Projection p,
                     ActivationProbe* probe) {
  const Var y = g.matmul(x, g.param(w_.layers[layer][p]));
  AdapterSlot<T>& s = slots_[layer][static_cast<std::size_t>(p)];
  if (std::holds_alternative<std::monostate>(s)) return y;
  const std::size_t first = g.size();
  Var delta{};
  if (auto* l = std::get_if<LoraAdapter<T>>(&s)) {
    delta = lora_delta(g, x, *l);
  } else {
    delta = multilora_delta(g, x, std::get<MultiLoraAdapter<T>>(s));
  }
  const Var out = g.add(y, delta);
  if (probe) probe->saved_values[{layer, p}] += g.saved_values_since(first);
  return out;
}

template <typename T>
void Model<T>::validate_batch(const TokenBatch& b) const {
  if (b.batch == 0 || b.seq_len == 0) throw ArgumentError("empty token batch");
  if (b.seq_len > cfg_.max_seq) {
    throw ArgumentError("sequence length " + std::to_string(b.seq_len) + " exceeds max_seq " +
                        std::to_string(cfg_.max_seq));
  }
  if (b.tokens.size() != b.rows() || b.targets.size() != b.rows() ||
      b.loss_mask.size() != b.rows()) {
    throw ShapeError("token batch arrays do not match batch×seq_len");
  }
  for (int t : b.tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg_.vocab) {
      throw ArgumentError("token id " + std::to_string(t) + " outside vocabulary of " +
                          std::to_string(cfg_.vocab));
    }
  }
}

template <typename T>
Var Model<T>::forward_logits(Graph<T>& g, const TokenBatch& batch, ActivationProbe* probe) {
  validate_batch(batch);
  const T eps = static_cast<T>(kRmsNormEps);
  std::vector<int> positions(batch.rows());
  for (std::size_t i = 0; i < positions.size(); ++i)
    positions[i] = static_cast<int>(i % batch.seq_len);
  if (probe) probe->tokens += batch.rows();

  Var x = g.add(g.gather_rows(g.param(w_.tok_emb), batch.tokens),
                g.gather_rows(g.param(w_.pos_emb), std::move(positions)));
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    LayerWeights<T>& lw = w_.layers[l];
    const Var h = g.rms_norm(x, g.param(lw.attn_norm), eps);
    const Var q = linear(g, h, l, Projection::q_proj, probe);
    const Var k = linear(g, h, l, Projection::k_proj, probe);
    const Var v = linear(g, h, l, Projection::v_proj, probe);
    const Var att = g.causal_attention(q, k, v, cfg_.n_heads, batch.seq_len);
    x = g.add(x, linear(g, att, l, Projection::o_proj, probe));

    const Var h2 = g.rms_norm(x, g.param(lw.mlp_norm), eps);
    const Var gate = linear(g, h2, l, Projection::gate_proj, probe);
    const Var up = linear(g, h2, l, Projection::up_proj, probe);
    const Var mid = g.hadamard(g.silu(gate), up);
    x = g.add(x, linear(g, mid, l, Projection::down_proj, probe));
  }
  const Var hf = g.rms_norm(x, g.param(w_.final_norm), eps);
  return g.matmul(hf, g.param(w_.unembed));
}

template <typename T>
Var Model<T>::forward_loss(Graph<T>& g, const TokenBatch& batch, ActivationProbe* probe) {
  for (std::size_t i = 0; i < batch.targets.size(); ++i) {
    if (batch.loss_mask.size() == batch.targets.size() && batch.loss_mask[i] &&
        (batch.targets[i] < 0 || static_cast<std::size_t>(batch.targets[i]) >= cfg_.vocab)) {
      throw ArgumentError("target id " + std::to_string(batch.targets[i]) +
                          " outside vocabulary");
    }
  }
  const Var logits = forward_logits(g, batch, probe);
  std::vector<T> weights(batch.loss_mask.begin(), batch.loss_mask.end());
  return g.cross_entropy(logits, batch.targets, std::move(weights));
}

template <typename T>
Matrix<T> Model<T>::logits(const TokenBatch& batch) {
  Graph<T> g;
  return g.value(forward_logits(g, batch));
}

template <typename T>
T Model<T>::loss(const TokenBatch& batch) {
  Graph<T> g;
  return g.value(forward_loss(g, batch))(0, 0);
}

template class Model<float>;
template class Model<double>;

template <typename U, typename T>
Model<U> convert_model(const Model<T>& m) {
  auto conv = [](const Param<T>& p) {
    return Param<U>(p.name, p.value.template cast<U>(), p.trainable);
  };
  const DecoderWeights<T>& w = m.weights();
  DecoderWeights<U> out;
  out.tok_emb = conv(w.tok_emb);
  out.pos_emb = conv(w.pos_emb);
  out.final_norm = conv(w.final_norm);
  out.unembed = conv(w.unembed);
  for (const auto& lw : w.layers) {
    LayerWeights<U> nl;
    nl.attn_norm = conv(lw.attn_norm);
    nl.mlp_norm = conv(lw.mlp_norm);
    for (std::size_t i = 0; i < lw.proj.size(); ++i) nl.proj[i] = conv(lw.proj[i]);
    out.layers.push_back(std::move(nl));
  }
  Model<U> result(m.config(), std::move(out));
  for (std::size_t l = 0; l < m.config().n_layers; ++l)
    for (Projection p : kAllProjections) result.slot(l, p) = convert_slot<U, T>(m.slot(l, p));
  result.set_adapter_state(m.adapter_state());
  return result;
}

template Model<double> convert_model<double, float>(const Model<float>&);
template Model<float> convert_model<float, double>(const Model<double>&);
template Model<float> convert_model<float, float>(const Model<float>&);
template Model<double> convert_model<double, double>(const Model<double>&);

template DecoderWeights<float> init_decoder<float>(const ModelConfig&, Rng&);
template DecoderWeights<double> init_decoder<double>(const ModelConfig&, Rng&);

template <typename T>
Matrix<T> mha_forward(const Matrix<T>& x, const AttentionWeights<T>& w) {
  const std::size_t d = w.q.rows();
  if (x.cols() != d) throw ShapeError("mha_forward: input " + shape_str(x) + " vs d=" +
                                      std::to_string(d));
  Graph<T> g;
  const Var xv = g.input(x);
  const Var q = g.matmul(xv, g.input(w.q));
  const Var k = g.matmul(xv, g.input(w.k));
  const Var v = g.matmul(xv, g.input(w.v));
  const Var att = g.causal_attention(q, k, v, w.n_heads, x.rows());
  return g.value(g.matmul(att, g.input(w.o)));
}

template <typename T>
Matrix<T> mlp_forward(const Matrix<T>& x, const MlpWeights<T>& w) {
  Graph<T> g;
  const Var xv = g.input(x);
  const Var gate = g.matmul(xv, g.input(w.gate));
  const Var up = g.matmul(xv, g.input(w.up));
  return g.value(g.matmul(g.hadamard(g.silu(gate), up), g.input(w.down)));
}

template Matrix<float> mha_forward(const Matrix<float>&, const AttentionWeights<float>&);
template Matrix<double> mha_forward(const Matrix<double>&, const AttentionWeights<double>&);
template Matrix<float> mlp_forward(const Matrix<float>&, const MlpWeights<float>&);
template Matrix<double> mlp_forward(const Matrix<double>&, const MlpWeights<double>&);

}  // namespace mlora
