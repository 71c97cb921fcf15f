// SPDX-License-Identifier: Apache-2.0
#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "mlora/attach.hpp"
#include "mlora/bench.hpp"
#include "mlora/spectral.hpp"
#include "mlora/store.hpp"
#include "run_config.hpp"

namespace mlora::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

// Input that parsed but cannot be processed: maps to the data exit code.
int report(const char* kind, const std::exception& e, int code) {
  std::fprintf(stderr, "mlora: %s: %s\n", kind, e.what());
  return code;
}

std::string dashed(std::string s) {
  std::replace(s.begin(), s.end(), '_', '-');
  return s;
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  return out;
}

struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
};

void add_config_flags(CLI::App* app, ConfigFlags& f) {
  app->add_option("--config", f.config_path, "Flat 'key = value' file; flags override it");
  for (const std::string& key : config_keys())
    f.options[key] = app->add_option("--" + dashed(key), f.values[key]);
}

RunConfig resolve(const ConfigFlags& f, RunConfig cfg) {
  if (!f.config_path.empty())
    for (const auto& [k, v] : load_kv(f.config_path)) cfg.set(k, v);
  for (const auto& [k, opt] : f.options)
    if (opt->count() > 0) cfg.set(k, f.values.at(k));
  cfg.validate();
  return cfg;
}

std::map<std::string, std::string> run_metadata(const RunConfig& cfg, std::size_t steps) {
  std::map<std::string, std::string> m = {{"run.digest", cfg.digest()},
                                          {"run.trained_steps", std::to_string(steps)}};
  for (const auto& [k, v] : cfg.to_map()) m["run." + k] = v;
  return m;
}

void write_loss_log(const fs::path& path, const std::vector<LossRecord>& log) {
  std::ofstream out = open_out(path);
  out << "step,loss,lr\n";
  for (const LossRecord& r : log)
    out << r.step << ',' << format_real(r.loss) << ',' << format_real(r.lr) << '\n';
}

struct TrainedRun {
  TrainResult result;
  double initial = 0.0;
  double final = 0.0;
};

TrainedRun train_and_save(const RunConfig& cfg, const fs::path& out, const fs::path& log_path,
                          const fs::path& base_path) {
  std::fprintf(stderr, "training %s (config %s, lr %.3g)\n",
               std::string(method_name(cfg.method)).c_str(), cfg.digest().c_str(),
               cfg.effective_lr());
  TrainedRun run{run_training(cfg, 100)};
  const auto& log = run.result.log;
  const std::size_t window = std::min<std::size_t>(log.size(), 100);
  run.initial = mean_loss(log, 0, std::min<std::size_t>(log.size(), 10));
  run.final = mean_loss(log, log.size() - window, window);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_checkpoint(out, to_checkpoint(run.result.model, run_metadata(cfg, log.size())));
  if (!base_path.empty()) {
    if (base_path.has_parent_path()) fs::create_directories(base_path.parent_path());
    save_checkpoint(base_path, to_checkpoint(run.result.base, run_metadata(cfg, 0)));
  }
  if (!log_path.empty()) write_loss_log(log_path, log);
  std::fprintf(stderr, "%s: loss %.4f -> %.4f over %zu steps\n",
               std::string(method_name(cfg.method)).c_str(), run.initial, run.final, log.size());
  return run;
}

// ΔW per site, in layer then projection order.
using SiteDeltas = std::vector<std::pair<std::string, MatrixD>>;

SiteDeltas model_deltas(const Checkpoint& tuned, const Checkpoint* base, const std::string& what) {
  const Model<float> m = model_from_checkpoint<float>(tuned);
  SiteDeltas out;
  if (m.adapter_state() == AdapterState::attached) {
    // Materialized in double so that the rank of A·B survives rounding.
    const Model<double> md = convert_model<double>(m);
    for (std::size_t l = 0; l < m.config().n_layers; ++l)
      for (Projection p : kAllProjections)
        if (!std::holds_alternative<std::monostate>(md.slot(l, p)))
          out.emplace_back(site_name(l, p), site_delta(md, l, p));
    return out;
  }
  if (!base) {
    throw ArgumentError(what + " holds plain weights; pass --base to take the difference");
  }
  for (std::size_t l = 0; l < m.config().n_layers; ++l)
    for (Projection p : kAllProjections)
      out.emplace_back(site_name(l, p), delta_from_checkpoints(*base, tuned, site_name(l, p)));
  return out;
}

SiteDeltas load_deltas(const std::string& path, const std::string& base_path) {
  const Checkpoint ck = load_checkpoint(path);
  const auto kind = ck.metadata.find("kind");
  if (kind != ck.metadata.end() && kind->second == "delta") {
    SiteDeltas out;
    for (const Tensor& t : ck.tensors) out.emplace_back(t.name, t.to_matrix());
    return out;
  }
  if (base_path.empty()) return model_deltas(ck, nullptr, path);
  const Checkpoint base = load_checkpoint(base_path);
  return model_deltas(ck, &base, path);
}

const MatrixD& find_site(const SiteDeltas& d, std::size_t layer, Projection p,
                         const std::string& source) {
  const std::string name = site_name(layer, p);
  for (const auto& [n, m] : d)
    if (n == name) return m;
  throw ArgumentError("no update for site '" + name + "' in " + source);
}

std::vector<MatrixD> module_deltas(const SiteDeltas& d, Projection p, const std::string& source) {
  std::map<std::size_t, MatrixD> by_layer;
  for (const auto& [n, m] : d) {
    const auto site = parse_site_name(n);
    if (site && site->second == p) by_layer.emplace(site->first, m);
  }
  if (by_layer.empty()) {
    throw ArgumentError("no update for module '" + std::string(projection_name(p)) + "' in " +
                        source);
  }
  std::vector<MatrixD> out;
  for (auto& [l, m] : by_layer) out.push_back(std::move(m));
  return out;
}

fs::path layer_path(const fs::path& out, std::size_t layer) {
  fs::path p = out;
  p.replace_filename(out.stem().string() + ".layer" + std::to_string(layer) +
                     out.extension().string());
  return p;
}

void write_grid(const fs::path& path, const SimilarityGrid& g) {
  std::ofstream out = open_out(path);
  write_grid_csv(out, g);
}

void write_hist(const fs::path& path, const SpectrumHistogram& h) {
  std::ofstream out = open_out(path);
  write_histogram_csv(out, h);
}

// --- merge -----------------------------------------------------------------

std::vector<TokenBatch> probe_batches(std::size_t count, std::uint64_t seed) {
  MixtureSpec spec;
  spec.seed = seed;
  for (std::size_t k = 0; k < count; ++k) ++spec.counts[k % 4];
  return batchify(gen_mixture(spec), 10);
}

int cmd_merge(const std::string& base_path, const std::string& adapter_path,
              const std::string& out, std::size_t probes, std::uint64_t seed) {
  Model<float> model = model_from_checkpoint<float>(load_checkpoint(adapter_path));
  if (model.adapter_state() == AdapterState::merged) {
    throw FormatError(adapter_path + " is already merged");
  }
  if (model.adapter_state() != AdapterState::attached) {
    throw FormatError(adapter_path + " holds fully fine-tuned weights; nothing to merge");
  }
  const Model<float> base = model_from_checkpoint<float>(load_checkpoint(base_path));
  if (base.adapter_state() == AdapterState::attached) {
    throw FormatError(base_path + " carries adapters; expected plain base weights");
  }
  if (!(base.config() == model.config())) {
    throw FormatError(base_path + " and " + adapter_path + " have different model shapes");
  }
  model.weights() = base.weights();
  model.set_base_trainable(false);

  const std::vector<TokenBatch> batches = probe_batches(probes, seed);
  std::vector<MatrixF> adapted;
  for (const TokenBatch& b : batches) adapted.push_back(model.logits(b));
  merge(model);
  double dev = 0.0;
  for (std::size_t k = 0; k < batches.size(); ++k)
    dev = std::max(dev, static_cast<double>(max_abs_diff(adapted[k], model.logits(batches[k]))));

  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  save_checkpoint(out, to_checkpoint(model, {{"merged.base", base_path},
                                             {"merged.adapter", adapter_path}}));
  std::printf("max_logit_deviation %s\n", format_real(dev).c_str());
  return kExitOk;
}

// --- analyze ---------------------------------------------------------------

int cmd_delta(const std::string& tuned, const std::string& base, const std::string& out) {
  const SiteDeltas d = load_deltas(tuned, base);
  Checkpoint ck;
  ck.metadata = {{"kind", "delta"}, {"delta.tuned", tuned}};
  if (!base.empty()) ck.metadata["delta.base"] = base;
  for (const auto& [name, m] : d) ck.add(Tensor::from_matrix(name, m));
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  save_checkpoint(out, ck);
  std::fprintf(stderr, "wrote %zu site updates to %s\n", d.size(), out.c_str());
  return kExitOk;
}

int cmd_svd_hist(const std::string& input, const std::string& base, const std::string& module,
                 const std::string& agg, const std::string& out) {
  const Projection p = projection_from_name(module);
  Aggregation a;
  if (agg == "mean") a = Aggregation::mean;
  else if (agg == "per-layer") a = Aggregation::per_layer;
  else throw ArgumentError("--agg must be 'mean' or 'per-layer'");
  const std::vector<MatrixD> dws = module_deltas(load_deltas(input, base), p, input);
  const std::vector<SpectrumHistogram> hists = sv_histogram(dws, a);
  if (a == Aggregation::mean) {
    write_hist(out, hists.front());
  } else {
    for (std::size_t l = 0; l < hists.size(); ++l) write_hist(layer_path(out, l), hists[l]);
  }
  return kExitOk;
}

int cmd_subspace_sim(const std::string& a, const std::string& b, const std::string& base,
                     const std::string& module, std::size_t layer, std::size_t max_rank,
                     bool right, const std::string& out) {
  const Projection p = projection_from_name(module);
  const SiteDeltas da = load_deltas(a, base);
  const SiteDeltas db = load_deltas(b, base);
  SimilarityGrid g =
      similarity_grid(find_site(da, layer, p, a), find_site(db, layer, p, b), max_rank, right);
  g.source_a = a;
  g.source_b = b;
  g.site = site_name(layer, p);
  write_grid(out, g);
  return kExitOk;
}

int cmd_pairwise(const std::string& input, const std::string& module, std::size_t layer,
                 std::size_t max_rank, const std::string& out) {
  const Projection p = projection_from_name(module);
  const Model<float> m = model_from_checkpoint<float>(load_checkpoint(input));
  if (layer >= m.config().n_layers) throw ArgumentError("--layer out of range");
  const Model<double> md = convert_model<double>(m);
  const auto* ad = std::get_if<MultiLoraAdapter<double>>(&md.slot(layer, p));
  if (!ad) throw FormatError(input + " has no MultiLoRA adapter on " + site_name(layer, p));
  const std::vector<SimilarityGrid> grids = pairwise_sublora_grid(*ad, max_rank);
  const std::size_t n = ad->n();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      write_grid(fs::path(out) / ("sub" + std::to_string(i) + "_sub" + std::to_string(j) + ".csv"),
                 grids[i * n + j]);
  return kExitOk;
}

// --- bench -----------------------------------------------------------------

int cmd_bench(const RunConfig& cfg, std::size_t r, std::size_t n_max, const std::string& module,
              std::size_t time_steps, std::size_t warmup, const std::string& out) {
  const Projection p = projection_from_name(module);
  if (r == 0 || n_max == 0) throw ArgumentError("--r and --n-max must be at least 1");
  const auto [d_in, d_out] = cfg.model.projection_shape(p);
  json entries = json::array();
  for (std::size_t n = 1; n <= n_max; ++n) {
    for (Method method : {Method::lora, Method::multilora}) {
      AdapterShape s{method, d_in, d_out, method == Method::lora ? n * r : r,
                     method == Method::lora ? 1 : n};
      CostReport rep = cost_report(s);
      rep.config_fingerprint = config_fingerprint(cfg.model, s);
      json e = to_json(rep);
      e["total_rank"] = n * r;
      // Timing attaches to every projection, so the rank must fit the smallest.
      const std::size_t limit = std::min(cfg.model.d_model, cfg.model.d_mid);
      if (time_steps > 0 && s.rank <= limit) {
        ThroughputOptions o{time_steps, warmup, cfg.batch, cfg.seed};
        e["wall_tokens_per_second"] = measure_throughput(cfg.model, s, o);
        std::fprintf(stderr, "%s n=%zu r=%zu: %.0f tokens/s\n",
                     std::string(method_name(method)).c_str(), s.n, s.rank,
                     e["wall_tokens_per_second"].get<double>());
      } else {
        e["wall_tokens_per_second"] = nullptr;
      }
      entries.push_back(std::move(e));
    }
  }
  const json doc = {{"site", std::string(projection_name(p))},
                    {"r", r},
                    {"model",
                     {{"d_model", cfg.model.d_model},
                      {"n_heads", cfg.model.n_heads},
                      {"d_mid", cfg.model.d_mid},
                      {"n_layers", cfg.model.n_layers},
                      {"vocab", cfg.model.vocab},
                      {"max_seq", cfg.model.max_seq}}},
                    {"entries", entries}};
  std::ofstream f = open_out(out);
  f << doc.dump(2) << '\n';
  return kExitOk;
}

// --- repro -----------------------------------------------------------------

double grid_mean(const SimilarityGrid& g) {
  double s = 0.0;
  for (double v : g.values) s += v;
  return s / static_cast<double>(g.values.size());
}

// exp of the entropy of the normalized spectrum: how many directions carry
// the update.
double effective_rank(const std::vector<double>& sigma) {
  double total = 0.0;
  for (double s : sigma) total += s;
  if (total <= 0.0) return 0.0;
  double h = 0.0;
  for (double s : sigma) {
    const double q = s / total;
    if (q > 0.0) h -= q * std::log(q);
  }
  return std::exp(h);
}

int cmd_repro(RunConfig cfg, const fs::path& out, std::size_t max_rank) {
  fs::create_directories(out);
  const std::size_t total_rank = cfg.n * cfg.r;

  RunConfig ft = cfg;
  ft.method = Method::ft;
  ft.lr.reset();
  RunConfig lora = cfg;
  lora.method = Method::lora;
  lora.lr.reset();
  lora.r = total_rank;
  lora.alpha = static_cast<double>(total_rank);
  RunConfig ml = cfg;
  ml.method = Method::multilora;
  ml.lr.reset();
  if (cfg.lr) {
    throw ArgumentError("repro picks per-method learning rates; use --lr-scale instead of --lr");
  }
  for (const RunConfig* c : {&ft, &lora, &ml}) c->validate();

  const std::vector<std::pair<std::string, const RunConfig*>> runs = {
      {"ft", &ft}, {"lora", &lora}, {"multilora", &ml}};
  json report;
  report["config"] = cfg.to_map();
  report["total_rank"] = total_rank;
  std::map<std::string, SiteDeltas> deltas;
  Checkpoint base_ck;
  for (const auto& [name, c] : runs) {
    const fs::path ckpt = out / (name + ".mlra");
    const TrainedRun run = train_and_save(*c, ckpt, out / (name + "_loss.csv"),
                                          name == "ft" ? out / "base.mlra" : fs::path());
    report["training"][name] = {{"initial_loss", run.initial},
                                {"final_loss", run.final},
                                {"steps", run.result.log.size()},
                                {"lr", c->effective_lr()}};
    if (name == "ft") base_ck = load_checkpoint(out / "base.mlra");
    const Checkpoint tuned = load_checkpoint(ckpt);
    deltas[name] = model_deltas(tuned, &base_ck, ckpt.string());
  }

  const std::size_t layers = cfg.model.n_layers;
  bool zero_ok = true;
  json zero_checks = json::array();
  for (const auto& [name, c] : runs) {
    for (Projection p : kAllProjections) {
      const std::string proj(projection_name(p));
      const std::vector<MatrixD> dws = module_deltas(deltas[name], p, name);
      const auto per_layer = sv_histogram(dws, Aggregation::per_layer);
      for (std::size_t l = 0; l < layers; ++l) {
        write_hist(out / "hist" / (name + "_" + proj + ".layer" + std::to_string(l) + ".csv"),
                   per_layer[l]);
      }
      write_hist(out / "hist" / (name + "_" + proj + ".mean.csv"),
                 sv_histogram(dws, Aggregation::mean).front());

      double eff = 0.0, nrank = 0.0;
      for (const MatrixD& m : dws) {
        const auto sigma = svd(m).sigma;
        eff += effective_rank(sigma);
        nrank += static_cast<double>(numerical_rank(sigma));
      }
      report["spectrum"][name][proj] = {{"effective_rank", eff / double(layers)},
                                        {"numerical_rank", nrank / double(layers)}};

      if (name == "lora") {
        const std::size_t need = std::min(dws[0].rows(), dws[0].cols()) - total_rank;
        for (std::size_t l = 0; l < layers; ++l) {
          const auto zeros = static_cast<std::size_t>(per_layer[l].zero_count);
          const bool ok = zeros >= need;
          zero_ok = zero_ok && ok;
          zero_checks.push_back({{"site", site_name(l, p)},
                                 {"zero_count", zeros},
                                 {"required", need},
                                 {"status", ok ? "pass" : "fail"}});
        }
      }
    }
  }
  report["lora_zero_count_check"] = zero_checks;

  const std::vector<std::pair<std::string, std::string>> pairs = {
      {"ft", "lora"}, {"ft", "multilora"}, {"lora", "multilora"}};
  for (const auto& [a, b] : pairs) {
    for (Projection p : kAllProjections) {
      double mean = 0.0;
      for (std::size_t l = 0; l < layers; ++l) {
        SimilarityGrid g = similarity_grid(find_site(deltas[a], l, p, a),
                                           find_site(deltas[b], l, p, b), max_rank);
        g.site = site_name(l, p);
        write_grid(out / "grid" / (a + "_vs_" + b + "." + g.site + ".csv"), g);
        mean += grid_mean(g);
      }
      report["similarity"][a + "_vs_" + b][std::string(projection_name(p))] =
          mean / double(layers);
    }
  }

  // Sub-LoRA grids stop at r: beyond it a module's singular vectors span its
  // null space.
  const Model<double> mld = convert_model<double>(
      model_from_checkpoint<float>(load_checkpoint(out / "multilora.mlra")));
  if (cfg.n >= 2) {
    for (std::size_t l = 0; l < layers; ++l) {
      for (Projection p : kAllProjections) {
        const auto& ad = std::get<MultiLoraAdapter<double>>(mld.slot(l, p));
        const auto grids = pairwise_sublora_grid(ad, cfg.r);
        for (std::size_t i = 0; i < cfg.n; ++i)
          for (std::size_t j = i + 1; j < cfg.n; ++j)
            write_grid(out / "pairwise" /
                           (site_name(l, p) + ".sub" + std::to_string(i) + "_sub" +
                            std::to_string(j) + ".csv"),
                       grids[i * cfg.n + j]);
      }
    }
  }

  // Tendencies from the analysis, recorded without a verdict.
  double sim_ft_lora = 0.0, sim_ft_ml = 0.0, eff_lora = 0.0, eff_ml = 0.0, eff_ft = 0.0;
  for (Projection p : kAllProjections) {
    const std::string proj(projection_name(p));
    sim_ft_lora += report["similarity"]["ft_vs_lora"][proj].get<double>() / 7.0;
    sim_ft_ml += report["similarity"]["ft_vs_multilora"][proj].get<double>() / 7.0;
    eff_ft += report["spectrum"]["ft"][proj]["effective_rank"].get<double>() / 7.0;
    eff_lora += report["spectrum"]["lora"][proj]["effective_rank"].get<double>() / 7.0;
    eff_ml += report["spectrum"]["multilora"][proj]["effective_rank"].get<double>() / 7.0;
  }
  report["observations"] = {
      {"mean_similarity_ft_vs_lora", sim_ft_lora},
      {"mean_similarity_ft_vs_multilora", sim_ft_ml},
      {"multilora_closer_to_ft_than_lora", sim_ft_ml > sim_ft_lora},
      {"mean_effective_rank", {{"ft", eff_ft}, {"lora", eff_lora}, {"multilora", eff_ml}}},
      {"multilora_spectrum_wider_than_lora", eff_ml > eff_lora}};

  std::ofstream(out / "report.json") << report.dump(2) << '\n';
  std::ofstream txt = open_out(out / "report.txt");
  char line[256];
  txt << "training (mean loss of first 10 / last 100 steps)\n";
  for (const auto& [name, c] : runs) {
    std::snprintf(line, sizeof line, "  %-10s %.4f -> %.4f  lr %.3g\n", name.c_str(),
                  report["training"][name]["initial_loss"].get<double>(),
                  report["training"][name]["final_loss"].get<double>(), c->effective_lr());
    txt << line;
  }
  std::snprintf(line, sizeof line,
                "subspace similarity to FT (mean over %zux%zu grids): lora %.4f, multilora "
                "%.4f\n",
                max_rank, max_rank, sim_ft_lora, sim_ft_ml);
  txt << line;
  std::snprintf(line, sizeof line, "effective rank of updates: ft %.2f, lora %.2f, multilora %.2f\n",
                eff_ft, eff_lora, eff_ml);
  txt << line;
  txt << "lora zero-count per layer >= min(d_in, d_out) - " << total_rank << ": "
      << (zero_ok ? "pass" : "FAIL") << '\n';
  std::fprintf(stderr, "report written to %s\n", (out / "report.txt").c_str());
  return zero_ok ? kExitOk : kExitNumeric;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"MultiLoRA desk-scale lab"};
  app.name("mlora");
  app.require_subcommand(1);

  ConfigFlags train_flags;
  std::string train_out, train_log, train_base;
  CLI::App* train = app.add_subcommand("train", "Train on the generated task mixture");
  add_config_flags(train, train_flags);
  train->add_option("--out", train_out, "Checkpoint path")->required();
  train->add_option("--log", train_log, "Loss log CSV (step,loss,lr)");
  train->add_option("--save-base", train_base, "Also save the untrained base weights here");

  std::string m_base, m_adapter, m_out;
  std::size_t m_probes = 100;
  std::uint64_t m_seed = 0;
  CLI::App* merge_cmd = app.add_subcommand("merge", "Fold adapters into the base weights");
  merge_cmd->add_option("--base", m_base, "Plain base checkpoint")->required();
  merge_cmd->add_option("--adapter", m_adapter, "Adapter checkpoint")->required();
  merge_cmd->add_option("--out", m_out, "Merged checkpoint path")->required();
  merge_cmd->add_option("--probes", m_probes, "Probe sequences for the deviation check");
  merge_cmd->add_option("--probe-seed", m_seed, "Seed of the probe sequences");

  CLI::App* analyze = app.add_subcommand("analyze", "Weight-update analysis");
  analyze->require_subcommand(1);
  std::string a_tuned, a_base, a_out, a_module, a_agg = "mean", a_a, a_b, a_input;
  std::size_t a_layer = 0, a_max_rank = kDefaultMaxRank;
  bool a_right = false;
  CLI::App* delta = analyze->add_subcommand("delta", "Write ΔW of every site");
  delta->add_option("--tuned", a_tuned, "Tuned or adapter checkpoint")->required();
  delta->add_option("--base", a_base, "Base checkpoint (needed for plain weights)");
  delta->add_option("--out", a_out, "Output checkpoint of ΔW tensors")->required();
  CLI::App* hist = analyze->add_subcommand("svd-hist", "Histogram of -log10 singular values");
  hist->add_option("--input", a_input, "ΔW, adapter or tuned checkpoint")->required();
  hist->add_option("--base", a_base, "Base checkpoint (needed for plain weights)");
  hist->add_option("--module", a_module, "Projection name")->required();
  hist->add_option("--agg", a_agg, "mean or per-layer");
  hist->add_option("--out", a_out, "CSV path")->required();
  CLI::App* sim = analyze->add_subcommand("subspace-sim", "Similarity grid of two updates");
  sim->add_option("--a", a_a, "First ΔW source")->required();
  sim->add_option("--b", a_b, "Second ΔW source")->required();
  sim->add_option("--base", a_base, "Base checkpoint (needed for plain weights)");
  sim->add_option("--module", a_module, "Projection name")->required();
  sim->add_option("--layer", a_layer, "Layer index");
  sim->add_option("--max-rank", a_max_rank, "Grid size");
  sim->add_flag("--right", a_right, "Use right singular vectors");
  sim->add_option("--out", a_out, "CSV path")->required();
  CLI::App* pair = analyze->add_subcommand("pairwise-sim", "Grids between sub-LoRA modules");
  pair->add_option("--input", a_input, "MultiLoRA checkpoint")->required();
  pair->add_option("--module", a_module, "Projection name")->required();
  pair->add_option("--layer", a_layer, "Layer index");
  pair->add_option("--max-rank", a_max_rank, "Grid size");
  pair->add_option("--out", a_out, "Output directory")->required();

  ConfigFlags bench_flags;
  std::string b_out, b_module = "q_proj";
  std::size_t b_r = 8, b_n_max = 5, b_steps = 100, b_warmup = 10;
  CLI::App* bench = app.add_subcommand("bench", "Cost counters and throughput over n");
  bench->add_option("--config", bench_flags.config_path, "Flat 'key = value' file");
  for (const char* key : {"d_model", "n_heads", "d_mid", "n_layers", "max_seq", "batch", "seed"}) {
    bench_flags.options[key] = bench->add_option("--" + dashed(key), bench_flags.values[key]);
  }
  bench->add_option("--r", b_r, "Rank of each parallel module");
  bench->add_option("--n-max", b_n_max, "Sweep n = 1..n-max");
  bench->add_option("--module", b_module, "Site whose shape the counters use");
  bench->add_option("--time-steps", b_steps, "Timed steps per config (0 skips timing)");
  bench->add_option("--warmup", b_warmup, "Untimed steps before timing");
  bench->add_option("--out", b_out, "JSON report path")->required();

  ConfigFlags repro_flags;
  std::string r_out;
  std::size_t r_max_rank = kDefaultMaxRank;
  CLI::App* repro = app.add_subcommand("repro", "FT, LoRA and MultiLoRA runs plus analysis");
  add_config_flags(repro, repro_flags);
  repro->add_option("--out", r_out, "Output directory")->required();
  repro->add_option("--max-rank", r_max_rank, "Similarity grid size");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train) {
      const RunConfig cfg = resolve(train_flags, RunConfig{});
      train_and_save(cfg, train_out, train_log, train_base);
      return kExitOk;
    }
    if (*merge_cmd) return cmd_merge(m_base, m_adapter, m_out, m_probes, m_seed);
    if (*delta) return cmd_delta(a_tuned, a_base, a_out);
    if (*hist) return cmd_svd_hist(a_input, a_base, a_module, a_agg, a_out);
    if (*sim) {
      return cmd_subspace_sim(a_a, a_b, a_base, a_module, a_layer, a_max_rank, a_right, a_out);
    }
    if (*pair) return cmd_pairwise(a_input, a_module, a_layer, a_max_rank, a_out);
    if (*bench) {
      return cmd_bench(resolve(bench_flags, RunConfig{}), b_r, b_n_max, b_module, b_steps,
                       b_warmup, b_out);
    }
    if (*repro) {
      RunConfig defaults;
      defaults.lr_scale = 100.0;
      return cmd_repro(resolve(repro_flags, defaults), r_out, r_max_rank);
    }
  } catch (const ArgumentError& e) {
    report("usage", e, kExitUsage);
    std::fputs(app.get_subcommands().front()->help().c_str(), stderr);
    return kExitUsage;
  } catch (const ShapeError& e) {
    return report("usage", e, kExitUsage);
  } catch (const FormatError& e) {
    return report("data", e, kExitData);
  } catch (const StateError& e) {
    return report("data", e, kExitData);
  } catch (const DegenerateInputError& e) {
    return report("data", e, kExitData);
  } catch (const NumericError& e) {
    return report("numeric", e, kExitNumeric);
  } catch (const fs::filesystem_error& e) {
    return report("data", e, kExitData);
  }
  return kExitUsage;
}

}  // namespace mlora::cli
