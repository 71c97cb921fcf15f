// SPDX-License-Identifier: Apache-2.0
#include "mlora/spectral.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <ostream>

namespace mlora {

namespace {

void require_index(std::size_t k, const MatrixD& m, const char* which) {
  const std::size_t p = std::min(m.rows(), m.cols());
  if (k == 0 || k > p) {
    throw ArgumentError(std::string("subspace index ") + which + " = " + std::to_string(k) +
                        " outside [1, " + std::to_string(p) + "] for a " + shape_str(m) +
                        " matrix");
  }
}

const MatrixD& basis(const SvdResult& s, bool right) { return right ? s.v : s.u; }

}  // namespace

double subspace_similarity(const MatrixD& dw_a, const MatrixD& dw_b, std::size_t i,
                           std::size_t j, bool right) {
  require_index(i, dw_a, "i");
  require_index(j, dw_b, "j");
  const SimilarityGrid g = similarity_grid_from_bases(basis(svd(dw_a), right),
                                                      basis(svd(dw_b), right), i, j);
  return g.at(i, j);
}

SimilarityGrid similarity_grid(const MatrixD& dw_a, const MatrixD& dw_b, std::size_t max_rank,
                               bool right) {
  require_index(max_rank, dw_a, "max_rank");
  require_index(max_rank, dw_b, "max_rank");
  return similarity_grid_from_bases(basis(svd(dw_a), right), basis(svd(dw_b), right), max_rank,
                                    max_rank);
}

SimilarityGrid similarity_grid_from_bases(const MatrixD& u_a, const MatrixD& u_b,
                                          std::size_t max_i, std::size_t max_j) {
  if (u_a.rows() != u_b.rows()) {
    throw ShapeError("similarity_grid: bases " + shape_str(u_a) + " and " + shape_str(u_b) +
                     " live in different spaces");
  }
  if (max_i == 0 || max_i > u_a.cols() || max_j == 0 || max_j > u_b.cols()) {
    throw ArgumentError("similarity_grid: rank outside the available columns");
  }
  const MatrixD m = matmul_tn(leading_columns(u_a, max_i), leading_columns(u_b, max_j));

  // prefix[i][j] = Σ_{p<i, q<j} m(p,q)²
  MatrixD prefix(max_i + 1, max_j + 1);
  for (std::size_t p = 0; p < max_i; ++p)
    for (std::size_t q = 0; q < max_j; ++q)
      prefix(p + 1, q + 1) =
          m(p, q) * m(p, q) + prefix(p, q + 1) + prefix(p + 1, q) - prefix(p, q);

  SimilarityGrid g;
  g.max_i = max_i;
  g.max_j = max_j;
  g.values.resize(max_i * max_j);
  for (std::size_t i = 1; i <= max_i; ++i)
    for (std::size_t j = 1; j <= max_j; ++j)
      g.values[(i - 1) * max_j + (j - 1)] =
          prefix(i, j) / static_cast<double>(std::min(i, j));
  return g;
}

double SpectrumHistogram::total() const {
  double t = zero_count;
  for (double c : counts) t += c;
  return t;
}

std::size_t HistogramSpec::bin_of(double neg_log) const {
  double t = (neg_log - lo) / (hi - lo) * static_cast<double>(bins);
  // Values a rounding error away from an edge belong to the bin it opens, so
  // that e.g. σ = 0.1 lands where −log10 = 1 does.
  const double r = std::round(t);
  if (std::abs(t - r) < 1e-9) t = r;
  if (t < 0.0) return 0;
  const auto k = static_cast<std::size_t>(std::floor(t));
  return std::min(k, bins - 1);
}

SpectrumHistogram sv_histogram(const std::vector<double>& sigma, const HistogramSpec& spec) {
  if (spec.bins == 0 || !(spec.hi > spec.lo)) throw ArgumentError("bad histogram spec");
  SpectrumHistogram h;
  h.edges.resize(spec.bins + 1);
  for (std::size_t k = 0; k <= spec.bins; ++k)
    h.edges[k] = spec.lo + (spec.hi - spec.lo) * static_cast<double>(k) /
                               static_cast<double>(spec.bins);
  h.counts.assign(spec.bins, 0.0);
  h.matrices = 1;
  const double s1 = sigma.empty() ? 0.0 : *std::max_element(sigma.begin(), sigma.end());
  const double tau = spec.zero_rel * s1;
  for (double s : sigma) {
    if (s <= tau) {
      h.zero_count += 1.0;
      continue;
    }
    h.counts[spec.bin_of(-std::log10(s))] += 1.0;
  }
  return h;
}

SpectrumHistogram sv_histogram(const MatrixD& dw, const HistogramSpec& spec) {
  return sv_histogram(svd(dw).sigma, spec);
}

std::vector<SpectrumHistogram> sv_histogram(const std::vector<MatrixD>& dws, Aggregation agg,
                                            const HistogramSpec& spec) {
  if (dws.empty()) throw ArgumentError("sv_histogram: empty matrix list");
  for (const MatrixD& m : dws) {
    if (!m.same_shape(dws.front())) {
      throw ArgumentError("sv_histogram: shapes " + shape_str(dws.front()) + " and " +
                          shape_str(m) + " mixed in one list");
    }
  }
  std::vector<SpectrumHistogram> each;
  each.reserve(dws.size());
  for (const MatrixD& m : dws) each.push_back(sv_histogram(m, spec));
  if (agg == Aggregation::per_layer) return each;

  SpectrumHistogram mean = each.front();
  for (std::size_t k = 1; k < each.size(); ++k) {
    for (std::size_t b = 0; b < mean.bins(); ++b) mean.counts[b] += each[k].counts[b];
    mean.zero_count += each[k].zero_count;
  }
  const auto n = static_cast<double>(each.size());
  for (double& c : mean.counts) c /= n;
  mean.zero_count /= n;
  mean.matrices = each.size();
  return {mean};
}

std::vector<SimilarityGrid> pairwise_sublora_grid(const MultiLoraAdapter<double>& adapter,
                                                  std::size_t max_rank) {
  const std::size_t n = adapter.n();
  if (n < 2) throw ArgumentError("pairwise comparison needs at least two sub-LoRA modules");
  std::vector<MatrixD> bases;
  for (std::size_t i = 0; i < n; ++i) {
    if (max_abs(adapter.scaling[i].value) == 0.0) {
      throw DegenerateInputError("sub-LoRA " + std::to_string(i) +
                                 " has an all-zero scaling vector; its update is empty");
    }
    const MatrixD dw = materialize_module_delta(adapter, i);
    require_index(max_rank, dw, "max_rank");
    bases.push_back(svd(dw).u);
  }
  std::vector<SimilarityGrid> grids;
  grids.reserve(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      SimilarityGrid g = similarity_grid_from_bases(bases[i], bases[j], max_rank, max_rank);
      g.source_a = "sub" + std::to_string(i);
      g.source_b = "sub" + std::to_string(j);
      grids.push_back(std::move(g));
    }
  }
  return grids;
}

std::string format_real(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 12);
  return std::string(buf, res.ptr);
}

void write_grid_csv(std::ostream& out, const SimilarityGrid& grid) {
  out << "i,j,phi\n";
  for (std::size_t i = 1; i <= grid.max_i; ++i)
    for (std::size_t j = 1; j <= grid.max_j; ++j)
      out << i << ',' << j << ',' << format_real(grid.at(i, j)) << '\n';
}

void write_histogram_csv(std::ostream& out, const SpectrumHistogram& hist) {
  out << "bin_lo,bin_hi,count\n";
  for (std::size_t b = 0; b < hist.bins(); ++b)
    out << format_real(hist.edges[b]) << ',' << format_real(hist.edges[b + 1]) << ','
        << format_real(hist.counts[b]) << '\n';
  out << "zero_count,," << format_real(hist.zero_count) << '\n';
}

}  // namespace mlora
