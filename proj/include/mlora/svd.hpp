// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "mlora/matrix.hpp"

namespace mlora {

/// Thin SVD m = u·diag(sigma)·vᵀ with p = min(rows, cols).
///
/// sigma is non-increasing and non-negative, u (m×p) and v (n×p) have
/// orthonormal columns. Signs are fixed so that the largest-magnitude entry
/// of each u column is non-negative (lowest index wins ties), which makes
/// singular vectors reproducible.
struct SvdResult {
  MatrixD u;
  std::vector<double> sigma;
  MatrixD v;
};

/// One-sided (Hestenes) Jacobi SVD. Throws NumericError on non-finite input
/// and ArgumentError on an empty matrix.
SvdResult svd(const MatrixD& m);

/// Independent reference SVD: eigen-decomposes the smaller Gram matrix
/// (mᵀm or m·mᵀ) with cyclic two-sided Jacobi and takes square roots.
/// Limited to min(rows, cols) <= 64.
SvdResult svd_oracle(const MatrixD& m);

inline constexpr std::size_t kSvdOracleMaxDim = 64;

/// Count of singular values strictly above rel_tol·sigma[0].
std::size_t numerical_rank(const std::vector<double>& sigma, double rel_tol = 1e-8);

/// Convenience: numerical rank of a matrix through svd().
std::size_t numerical_rank(const MatrixD& m, double rel_tol = 1e-8);

/// Columns 0..count-1 of u as a standalone matrix.
MatrixD leading_columns(const MatrixD& u, std::size_t count);

}  // namespace mlora
