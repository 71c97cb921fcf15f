// SPDX-License-Identifier: Apache-2.0
#include "run_config.hpp"

#include <zlib.h>

#include <charconv>
#include <cstdio>
#include <iostream>

#include "mlora/attach.hpp"
#include "mlora/store.hpp"

namespace mlora::cli {

namespace {

template <typename N>
N parse_number(const std::string& key, const std::string& text) {
  N v{};
  const char* end = text.data() + text.size();
  const auto res = std::from_chars(text.data(), end, v);
  if (text.empty() || res.ec != std::errc{} || res.ptr != end) {
    throw ArgumentError("--" + key + ": '" + text + "' is not a valid number");
  }
  return v;
}

const std::array<const char*, 4> kMixKeys = {"mix_choice", "mix_copy", "mix_arith", "mix_longgen"};

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "d_model", "n_heads", "d_mid", "n_layers", "max_seq", "method", "r", "n", "alpha",
      "targets", "lr", "lr_scale", "epochs", "steps", "batch", "warmup_ratio",
      "max_grad_norm", "weight_decay", "seed", "mix_choice", "mix_copy", "mix_arith",
      "mix_longgen"};
  return keys;
}

double RunConfig::base_lr() const {
  if (lr) return *lr;
  return method == Method::ft ? 5e-6 : 5e-5;
}

void RunConfig::set(const std::string& raw_key, const std::string& value) {
  std::string key = raw_key;
  for (char& c : key)
    if (c == '-') c = '_';
  auto size = [&] { return parse_number<std::size_t>(key, value); };
  auto real = [&] { return parse_number<double>(key, value); };
  if (key == "d_model") model.d_model = size();
  else if (key == "n_heads") model.n_heads = size();
  else if (key == "d_mid") model.d_mid = size();
  else if (key == "n_layers") model.n_layers = size();
  else if (key == "max_seq") model.max_seq = size();
  else if (key == "method") method = method_from_name(value);
  else if (key == "r") r = size();
  else if (key == "n") n = size();
  else if (key == "alpha") alpha = real();
  else if (key == "targets") targets = value;
  else if (key == "lr") lr = real();
  else if (key == "lr_scale") lr_scale = real();
  else if (key == "epochs") epochs = size();
  else if (key == "steps") steps = size();
  else if (key == "batch") batch = size();
  else if (key == "warmup_ratio") warmup_ratio = real();
  else if (key == "max_grad_norm") max_grad_norm = real();
  else if (key == "weight_decay") weight_decay = real();
  else if (key == "seed") seed = parse_number<std::uint64_t>(key, value);
  else {
    for (std::size_t t = 0; t < kMixKeys.size(); ++t) {
      if (key == kMixKeys[t]) {
        mix[t] = size();
        return;
      }
    }
    throw ArgumentError("unknown config key '" + raw_key + "'");
  }
}

void RunConfig::validate() const {
  model.validate();
  if (model.vocab != vocab::kSize) throw ArgumentError("vocab is fixed at 64 tokens");
  if (method != Method::ft) target_list();
  if (method != Method::ft && r == 0) throw ArgumentError("--r must be at least 1");
  if (method == Method::multilora && n == 0) throw ArgumentError("--n must be at least 1");
  if (!(lr_scale > 0.0) || base_lr() < 0.0) throw ArgumentError("learning rate must be positive");
  if (batch == 0) throw ArgumentError("--batch must be at least 1");
  if (epochs == 0 && steps == 0) throw ArgumentError("need --epochs or --steps");
  if (!(warmup_ratio >= 0.0 && warmup_ratio <= 1.0)) {
    throw ArgumentError("--warmup-ratio must lie in [0, 1]");
  }
  if (mixture().total() == 0) throw ArgumentError("mixture is empty");
}

std::vector<Projection> RunConfig::target_list() const { return parse_targets(targets); }

MixtureSpec RunConfig::mixture() const {
  MixtureSpec spec;
  spec.counts = mix;
  spec.seed = Rng(seed).fork(3).next_u64();
  return spec;
}

TrainOptions RunConfig::train_options() const {
  TrainOptions o;
  o.lr = effective_lr();
  o.steps = steps;
  o.epochs = epochs;
  o.batch_size = batch;
  o.warmup_ratio = warmup_ratio;
  o.max_grad_norm = max_grad_norm;
  o.adamw.weight_decay = weight_decay;
  o.seed = Rng(seed).fork(4).next_u64();
  return o;
}

std::map<std::string, std::string> RunConfig::to_map() const {
  std::map<std::string, std::string> m = {
      {"d_model", std::to_string(model.d_model)},
      {"n_heads", std::to_string(model.n_heads)},
      {"d_mid", std::to_string(model.d_mid)},
      {"n_layers", std::to_string(model.n_layers)},
      {"max_seq", std::to_string(model.max_seq)},
      {"method", std::string(method_name(method))},
      {"lr", exact_real(base_lr())},
      {"lr_scale", exact_real(lr_scale)},
      {"epochs", std::to_string(epochs)},
      {"steps", std::to_string(steps)},
      {"batch", std::to_string(batch)},
      {"warmup_ratio", exact_real(warmup_ratio)},
      {"max_grad_norm", exact_real(max_grad_norm)},
      {"weight_decay", exact_real(weight_decay)},
      {"seed", std::to_string(seed)}};
  for (std::size_t t = 0; t < kMixKeys.size(); ++t) m[kMixKeys[t]] = std::to_string(mix[t]);
  if (method != Method::ft) {
    m["r"] = std::to_string(r);
    m["targets"] = targets;
  }
  if (method == Method::lora) m["alpha"] = exact_real(alpha_value());
  if (method == Method::multilora) m["n"] = std::to_string(n);
  return m;
}

std::string RunConfig::digest() const {
  std::string text;
  for (const auto& [k, v] : to_map()) text += k + "=" + v + "\n";
  const auto crc =
      crc32(0L, reinterpret_cast<const Bytef*>(text.data()), static_cast<uInt>(text.size()));
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
  return buf;
}

Rng base_rng(std::uint64_t seed) { return Rng(seed).fork(1); }
Rng adapter_rng(std::uint64_t seed) { return Rng(seed).fork(2); }

TrainResult run_training(const RunConfig& cfg, std::size_t log_every) {
  cfg.validate();
  Rng brng = base_rng(cfg.seed);
  Model<float> model(cfg.model, brng);
  Model<float> base = model;
  Rng arng = adapter_rng(cfg.seed);
  if (cfg.method == Method::lora) {
    attach_lora(model, cfg.target_list(), cfg.r, cfg.alpha_value(), arng);
  } else if (cfg.method == Method::multilora) {
    attach_multilora(model, cfg.target_list(), cfg.n, cfg.r, arng);
  }
  const std::vector<Sample> samples = gen_mixture(cfg.mixture());
  const TrainOptions opts = cfg.train_options();
  auto log = train(model, samples, opts, [&](const LossRecord& rec) {
    if (log_every > 0 && (rec.step == 1 || rec.step % log_every == 0)) {
      std::fprintf(stderr, "[%s] step %zu loss %.4f lr %.3g\n",
                   std::string(method_name(cfg.method)).c_str(), rec.step, rec.loss, rec.lr);
    }
  });
  return {std::move(model), std::move(log), std::move(base)};
}

}  // namespace mlora::cli
