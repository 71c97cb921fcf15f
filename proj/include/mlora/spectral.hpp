// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "mlora/adapters.hpp"
#include "mlora/matrix.hpp"
#include "mlora/svd.hpp"

namespace mlora {

/// φ(i, j) = ‖U_iᵀ·U′_j‖_F² / min(i, j) where U_i holds the top-i singular
/// vectors. Left vectors unless `right` is set.
///
/// Throws ArgumentError when i or j is zero or larger than the smaller
/// dimension of its matrix. Columns past the numerical rank are still taken
/// as svd() returns them.
double subspace_similarity(const MatrixD& dw_a, const MatrixD& dw_b, std::size_t i,
                           std::size_t j, bool right = false);

struct SimilarityGrid {
  std::size_t max_i = 0;
  std::size_t max_j = 0;
  std::vector<double> values;  // row-major, (i-1)·max_j + (j-1)
  std::string source_a;
  std::string source_b;
  std::string site;

  /// 1-based, as in φ(i, j).
  double at(std::size_t i, std::size_t j) const { return values[(i - 1) * max_j + (j - 1)]; }
};

inline constexpr std::size_t kDefaultMaxRank = 30;

/// φ(i, j) for i, j in [1, max_rank] from one SVD of each matrix.
SimilarityGrid similarity_grid(const MatrixD& dw_a, const MatrixD& dw_b,
                               std::size_t max_rank = kDefaultMaxRank, bool right = false);

/// Same grid from already computed singular vectors (columns of u_a, u_b).
SimilarityGrid similarity_grid_from_bases(const MatrixD& u_a, const MatrixD& u_b,
                                          std::size_t max_i, std::size_t max_j);

enum class Aggregation { per_layer, mean };

/// Binned −log10(σ). Counts are per bin; under mean aggregation they are
/// averages and need not be integral.
struct SpectrumHistogram {
  std::vector<double> edges;  // bins + 1 ascending edges
  std::vector<double> counts;
  double zero_count = 0.0;
  std::size_t matrices = 0;  // matrices aggregated

  std::size_t bins() const { return counts.size(); }
  double total() const;
};

struct HistogramSpec {
  std::size_t bins = 40;
  double lo = -2.0;  // over −log10(σ)
  double hi = 8.0;
  /// σ ≤ zero_rel·σ₁ goes to the zero bucket.
  double zero_rel = 1e-8;

  /// Bin index of a −log10(σ) value. Values outside [lo, hi) land in the edge
  /// bins.
  std::size_t bin_of(double neg_log) const;
};

/// Histogram of one spectrum.
SpectrumHistogram sv_histogram(const std::vector<double>& sigma, const HistogramSpec& spec = {});
SpectrumHistogram sv_histogram(const MatrixD& dw, const HistogramSpec& spec = {});

/// Histograms of a same-shaped list (one module across layers): one per
/// matrix under per_layer, their bin-wise mean under mean. Throws
/// ArgumentError on an empty list or a shape mismatch.
std::vector<SpectrumHistogram> sv_histogram(const std::vector<MatrixD>& dws, Aggregation agg,
                                            const HistogramSpec& spec = {});

/// grids[i·n + j] = similarity_grid(ΔW_i, ΔW_j) over the individually
/// materialized sub-LoRA updates ΔW_i = (A_i·B_i)·diag(scaling_i). Throws
/// ArgumentError for n < 2 and DegenerateInputError when a module's scaling
/// vector is entirely zero.
std::vector<SimilarityGrid> pairwise_sublora_grid(const MultiLoraAdapter<double>& adapter,
                                                  std::size_t max_rank = kDefaultMaxRank);

/// `i,j,phi` with one row per cell.
void write_grid_csv(std::ostream& out, const SimilarityGrid& grid);
/// `bin_lo,bin_hi,count` rows then a `zero_count,,N` trailer.
void write_histogram_csv(std::ostream& out, const SpectrumHistogram& hist);

/// Values formatted with 12 significant digits, independent of locale.
std::string format_real(double v);

}  // namespace mlora
