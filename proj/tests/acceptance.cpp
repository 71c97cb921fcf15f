// SPDX-License-Identifier: Apache-2.0
// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Usage: mlora_acceptance [criterion numbers...]
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "mlora/attach.hpp"
#include "mlora/bench.hpp"
#include "mlora/spectral.hpp"
#include "mlora/store.hpp"
#include "mlora/svd.hpp"
#include "mlora/trainer.hpp"
#include "oracles.hpp"
#include "run_config.hpp"
#include "toy.hpp"

using namespace mlora;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void expect(bool ok, const std::string& what) {
    if (!ok && pass) detail = what;
    pass = pass && ok;
  }
};

struct Criterion {
  int id;
  const char* name;
  double limit_s;
  std::function<Outcome()> body;
};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

fs::path scratch(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("mlora_acceptance_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "mlora");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli::run(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// ---------------------------------------------------------------------------

Outcome starting_point() {
  Outcome o;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    Model<float> base(ModelConfig{}, rng);
    const TokenBatch b = toy::sample_batch(2, seed, 60);
    const MatrixF ref = base.logits(b);
    Model<float> lo = base, ml = base;
    attach_lora(lo, parse_targets("all"), 24, 24.0, rng);
    attach_multilora(ml, parse_targets("all"), 3, 8, rng);
    o.expect(lo.logits(b) == ref, "lora logits differ at seed " + std::to_string(seed));
    o.expect(ml.logits(b) == ref, "multilora logits differ at seed " + std::to_string(seed));
  }
  o.detail = o.pass ? "20 models bit-identical" : o.detail;
  return o;
}

// σ_k ≤ 1e-8·σ₁ for every k past the bound.
bool tail_vanishes(const MatrixD& dw, std::size_t bound, double& worst) {
  const auto s = svd(dw).sigma;
  for (std::size_t k = bound; k < s.size(); ++k) worst = std::max(worst, s[k] / s[0]);
  return s.size() <= bound || s[bound] <= 1e-8 * s[0];
}

Outcome rank_bounds() {
  Outcome o;
  const ModelConfig cfg;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed + 100);
    for (Projection p : {Projection::q_proj, Projection::up_proj, Projection::down_proj}) {
      const auto [din, dout] = cfg.projection_shape(p);
      auto lo = make_lora<double>(din, dout, 8, 8.0, rng);
      lo.b.value = kaiming_uniform<double>(rng, 8, dout, 8);
      o.expect(tail_vanishes(materialize_delta(lo), 8, worst), "lora tail");
      for (std::size_t n : {1, 3, 5}) {
        auto ml = make_multilora<double>(din, dout, n, 8, rng);
        for (auto& s : ml.scaling)
          for (double& v : s.value.data()) v = rng.uniform(-1.5, 1.5);
        o.expect(tail_vanishes(materialize_delta(ml), n * 8, worst),
                 "multilora n=" + std::to_string(n) + " tail");
      }
    }
  }
  if (o.pass) o.detail = "worst tail ratio " + num(worst);
  return o;
}

std::vector<TokenBatch> probes(std::size_t count, std::uint64_t seed) {
  MixtureSpec spec;
  spec.seed = seed;
  for (TaskTag t : kAllTasks) spec.count(t) = count / 4;
  std::vector<TokenBatch> out;
  for (const Sample& s : gen_mixture(spec)) {
    std::vector<int> ids = s.input_ids;
    ids.insert(ids.end(), s.target_ids.begin(), s.target_ids.end());
    out.push_back(TokenBatch::single(ids));
  }
  return out;
}

template <typename T>
double trained_merge_deviation(Method method, std::size_t steps) {
  Rng rng(7);
  Model<T> m(ModelConfig{}, rng);
  if (method == Method::lora) {
    attach_lora(m, parse_targets("all"), 24, 24.0, rng);
  } else {
    attach_multilora(m, parse_targets("all"), 3, 8, rng);
  }
  MixtureSpec spec;
  spec.seed = 3;
  for (TaskTag t : kAllTasks) spec.count(t) = 200;
  TrainOptions opt;
  opt.lr = 5e-3;
  opt.steps = steps;
  train(m, gen_mixture(spec), opt);
  const auto ps = probes(100, 11);
  std::vector<Matrix<T>> adapted;
  for (const TokenBatch& b : ps) adapted.push_back(m.logits(b));
  merge(m);
  double dev = 0.0;
  for (std::size_t i = 0; i < ps.size(); ++i) dev = std::max(dev, max_abs_diff(adapted[i], m.logits(ps[i])));
  return dev;
}

Outcome merge_equivalence() {
  Outcome o;
  std::string d;
  for (Method m : {Method::lora, Method::multilora}) {
    const double f = trained_merge_deviation<float>(m, 200);
    const double dd = trained_merge_deviation<double>(m, 100);
    o.expect(f < 1e-4, std::string(method_name(m)) + " float deviation " + num(f));
    o.expect(dd < 1e-10, std::string(method_name(m)) + " double deviation " + num(dd));
    d += std::string(method_name(m)) + " f32 " + num(f) + " f64 " + num(dd) + "; ";
  }
  if (o.pass) o.detail = d;
  return o;
}

Outcome svd_correctness() {
  Outcome o;
  std::mt19937_64 gen(42);
  double sig = 0.0, orth = 0.0, rec = 0.0;
  for (int k = 0; k < 100; ++k) {
    const std::size_t r = 1 + gen() % 64, c = 1 + gen() % 64;
    const MatrixD m = oracle::random_matrix(r, c, gen());
    const SvdResult s = svd(m), ref = svd_oracle(m);
    for (std::size_t i = 0; i < s.sigma.size(); ++i) sig = std::max(sig, std::abs(s.sigma[i] - ref.sigma[i]));
    orth = std::max({orth, oracle::orthonormality_error(s.u), oracle::orthonormality_error(s.v)});
    rec = std::max(rec, frobenius_norm(subtract(oracle::reconstruct(s.u, s.sigma, s.v), m)) /
                            frobenius_norm(m));
  }
  o.expect(sig < 1e-10, "sigma error " + num(sig));
  o.expect(orth < 1e-8, "orthonormality error " + num(orth));
  o.expect(rec < 1e-8, "reconstruction error " + num(rec));
  if (o.pass) o.detail = "sigma " + num(sig) + ", orth " + num(orth) + ", recon " + num(rec);
  return o;
}

Outcome phi_properties() {
  Outcome o;
  const MatrixD m = oracle::random_matrix(64, 48, 5);
  const SimilarityGrid self = similarity_grid(m, m, 30);
  double diag = 0.0;
  for (std::size_t i = 1; i <= 30; ++i) diag = std::max(diag, std::abs(self.at(i, i) - 1.0));
  o.expect(diag < 1e-9, "self similarity off by " + num(diag));
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const SimilarityGrid g = similarity_grid(oracle::random_matrix(64, 64, seed),
                                             oracle::low_rank(64, 172, 24, seed + 9), 30);
    for (double v : g.values) o.expect(v >= -1e-9 && v <= 1.0 + 1e-9, "grid value " + num(v));
  }
  MatrixD e1(8, 8), e2(8, 8);
  e1(0, 0) = 1.0;
  e2(1, 1) = 1.0;
  o.expect(subspace_similarity(e1, e2, 1, 1) == 0.0, "e1 vs e2 not exactly 0");
  // Updates living on disjoint coordinate blocks.
  MatrixD a(20, 12), b(20, 12);
  const MatrixD fa = oracle::random_matrix(5, 12, 1), fb = oracle::random_matrix(5, 12, 2);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 12; ++j) a(i, j) = fa(i, j), b(i + 5, j) = fb(i, j);
  for (std::size_t i = 1; i <= 5; ++i)
    for (std::size_t j = 1; j <= 5; ++j)
      o.expect(subspace_similarity(a, b, i, j) == 0.0, "block orthogonal case not exactly 0");
  if (o.pass) o.detail = "max diagonal error " + num(diag);
  return o;
}

Outcome gradients() {
  Outcome o;
  std::string d;
  const TokenBatch batch = toy::sample_batch(1, 21, 16);
  for (Method method : {Method::ft, Method::lora, Method::multilora}) {
    Rng rng(31);
    Model<double> m(ModelConfig{}, rng);
    if (method == Method::lora) attach_lora(m, parse_targets("all"), 8, 16.0, rng);
    if (method == Method::multilora) attach_multilora(m, parse_targets("all"), 3, 8, rng);
    toy::perturb_adapters(m, rng);
    const GradCheckReport r = toy::model_grad_check(m, batch, 5);
    o.expect(r.max_rel_error < 1e-4, std::string(method_name(method)) + " error " +
                                         num(r.max_rel_error) + " at " + r.worst_param);
    d += std::string(method_name(method)) + " " + num(r.max_rel_error) + " over " +
         std::to_string(r.coords_checked) + " coords; ";
  }
  if (o.pass) o.detail = d;
  return o;
}

Outcome determinism() {
  Outcome o;
  const fs::path dir = scratch("determinism");
  for (const char* name : {"a.mlra", "b.mlra"}) {
    const int code = run_cli({"train", "--method", "multilora", "--steps", "500", "--seed", "3",
                              "--lr-scale", "100", "--out", (dir / name).string()});
    o.expect(code == 0, "train exited " + std::to_string(code));
  }
  if (o.pass) {
    const std::string a = slurp(dir / "a.mlra"), b = slurp(dir / "b.mlra");
    o.expect(!a.empty() && a == b, "checkpoints differ");
    o.detail = std::to_string(a.size()) + " bytes identical";
  }
  fs::remove_all(dir);
  return o;
}

Outcome training_sanity() {
  Outcome o;
  std::string d;
  for (Method method : {Method::ft, Method::lora, Method::multilora}) {
    cli::RunConfig cfg;
    cfg.method = method;
    cfg.lr_scale = 100.0;
    if (method == Method::lora) cfg.r = 24, cfg.alpha = 24.0;
    if (method == Method::multilora) cfg.r = 8, cfg.n = 3;
    const auto res = cli::run_training(cfg);
    const auto& log = res.log;
    const double first = mean_loss(log, 0, 10);
    const double last = mean_loss(log, log.size() - 100, 100);
    o.expect(log.size() == 2000, "ran " + std::to_string(log.size()) + " steps");
    o.expect(last < 0.5 * first, std::string(method_name(method)) + " " + num(first) + " -> " + num(last));
    d += std::string(method_name(method)) + " " + num(first) + "->" + num(last) + "; ";
  }
  if (o.pass) o.detail = d;
  return o;
}

Outcome counters() {
  Outcome o;
  const ModelConfig cfg;
  for (Projection p : kAllProjections) {
    const auto [din, dout] = cfg.projection_shape(p);
    const auto lo = flop_count({Method::lora, din, dout, 24, 1}).matmul_flops_per_token_per_site;
    for (std::size_t n : {1, 2, 3, 4, 6, 8}) {
      o.expect(flop_count({Method::multilora, din, dout, 24 / n, n}).matmul_flops_per_token_per_site == lo,
               "flops differ at n=" + std::to_string(n));
    }
  }
  const TokenBatch b = toy::sample_batch(1, 3, 40);
  std::vector<std::size_t> measured;
  for (std::size_t n = 1; n <= 5; ++n) {
    Rng rng(n);
    Model<float> m(cfg, rng);
    attach_multilora(m, parse_targets("all"), n, 8, rng);
    Graph<float> g;
    ActivationProbe probe;
    m.forward_loss(g, b, &probe);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      for (Projection p : kAllProjections) {
        const auto [din, dout] = cfg.projection_shape(p);
        const std::uint64_t analytic = activation_count({Method::multilora, din, dout, 8, n});
        o.expect(probe.per_token(l, p) == analytic, "instrumented count differs at n=" + std::to_string(n));
        o.expect(analytic == n * activation_count({Method::multilora, din, dout, 8, 1}), "not linear in n");
      }
    }
    measured.push_back(probe.per_token(0, Projection::q_proj));
  }
  if (o.pass) {
    o.detail = "q_proj cached values/token:";
    for (std::size_t v : measured) o.detail += " " + std::to_string(v);
  }
  return o;
}

// Parses `i,j,phi` and returns the number of rows, or 0 on any defect.
std::size_t check_grid_csv(const fs::path& p, std::size_t max_rank) {
  std::istringstream in(slurp(p));
  std::string line;
  if (!std::getline(in, line) || line != "i,j,phi") return 0;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    std::size_t i = 0, j = 0;
    double phi = -1.0;
    char c1 = 0, c2 = 0;
    std::istringstream ls(line);
    if (!(ls >> i >> c1 >> j >> c2 >> phi) || c1 != ',' || c2 != ',') return 0;
    if (i != rows / max_rank + 1 || j != rows % max_rank + 1) return 0;
    if (!(phi >= -1e-9 && phi <= 1.0 + 1e-9)) return 0;
    ++rows;
  }
  return rows;
}

// Returns the zero count of a histogram CSV or -1 on any defect.
double check_hist_csv(const fs::path& p) {
  std::istringstream in(slurp(p));
  std::string line;
  if (!std::getline(in, line) || line != "bin_lo,bin_hi,count") return -1;
  std::size_t bins = 0;
  double prev_hi = -2.0;
  while (std::getline(in, line)) {
    if (line.starts_with("zero_count,,")) {
      const double z = std::stod(line.substr(12));
      return bins == 40 && std::abs(prev_hi - 8.0) < 1e-9 ? z : -1;
    }
    double lo = 0, hi = 0, count = 0;
    char c1 = 0, c2 = 0;
    std::istringstream ls(line);
    if (!(ls >> lo >> c1 >> hi >> c2 >> count) || std::abs(lo - prev_hi) > 1e-9 || hi <= lo || count < 0)
      return -1;
    prev_hi = hi;
    ++bins;
  }
  return -1;
}

Outcome pipeline() {
  Outcome o;
  const fs::path dir = scratch("repro");
  const int code = run_cli({"repro", "--out", (dir / "out").string()});
  o.expect(code == 0, "repro exited " + std::to_string(code));
  if (!o.pass) return o;
  const fs::path out = dir / "out";
  const ModelConfig cfg;
  const std::size_t total_rank = 3 * 8;
  std::size_t hist_files = 0, grid_files = 0, zero_checks = 0;
  for (const char* m : {"ft", "lora", "multilora"}) {
    for (Projection p : kAllProjections) {
      const auto [din, dout] = cfg.projection_shape(p);
      for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const fs::path f = out / "hist" / (std::string(m) + "_" + std::string(projection_name(p)) +
                                           ".layer" + std::to_string(l) + ".csv");
        const double zeros = check_hist_csv(f);
        o.expect(zeros >= 0, "bad histogram " + f.string());
        ++hist_files;
        if (std::string(m) == "lora") {
          const double need = static_cast<double>(std::min(din, dout) - total_rank);
          o.expect(zeros >= need, f.filename().string() + " zero count " + num(zeros) + " < " + num(need));
          ++zero_checks;
        }
      }
    }
  }
  for (const auto& e : fs::directory_iterator(out / "grid")) {
    o.expect(check_grid_csv(e.path(), 30) == 900, "bad 30x30 grid " + e.path().string());
    ++grid_files;
  }
  o.expect(grid_files == 3 * 7 * cfg.n_layers, "expected 42 grids, found " + std::to_string(grid_files));
  const auto report = nlohmann::json::parse(slurp(out / "report.json"));
  o.expect(report.contains("observations"), "report lacks observations");
  if (o.pass) {
    o.detail = std::to_string(hist_files) + " histograms, " + std::to_string(grid_files) +
               " grids, " + std::to_string(zero_checks) + " LoRA zero-count checks";
  }
  fs::remove_all(dir);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "starting-point identity", 5, starting_point},
      {2, "rank bounds", 30, rank_bounds},
      {3, "merge equivalence", 60, merge_equivalence},
      {4, "svd correctness", 10, svd_correctness},
      {5, "phi properties", 10, phi_properties},
      {6, "gradient correctness", 120, gradients},
      {7, "determinism", 120, determinism},
      {8, "training sanity", 600, training_sanity},
      {9, "counter identities", 5, counters},
      {10, "pipeline regeneration", 900, pipeline},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  bool ok = true;
  for (const Criterion& c : all) {
    if (!wanted.empty() && !wanted.contains(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome r;
    try {
      r = c.body();
    } catch (const std::exception& e) {
      r.pass = false;
      r.detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs >= c.limit_s) {
      r.pass = false;
      r.detail = "took " + num(secs) + " s, limit " + num(c.limit_s) + " s; " + r.detail;
    }
    ok = ok && r.pass;
    std::printf("criterion %2d %s  %-24s %7.2fs  %s\n", c.id, r.pass ? "PASS" : "FAIL", c.name, secs,
                r.detail.c_str());
    std::fflush(stdout);
  }
  return ok ? 0 : 1;
}
