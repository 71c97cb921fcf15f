// SPDX-License-Identifier: Apache-2.0
#include "mlora/svd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace mlora {

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();
constexpr int kMaxSweeps = 80;

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void require_svd_input(const MatrixD& m, const char* who) {
  if (m.empty()) throw ArgumentError(std::string(who) + ": empty matrix");
  if (!all_finite(m)) throw NumericError(std::string(who) + ": non-finite input");
}

// Column-major scratch: row j of `cols` holds column j of the logical matrix.
// Fills columns flagged in `missing` with unit vectors orthogonal to all the
// others (modified Gram-Schmidt against canonical basis candidates, twice).
void complete_basis(MatrixD& cols, const std::vector<bool>& missing) {
  const std::size_t dim = cols.cols();
  std::size_t candidate = 0;
  for (std::size_t j = 0; j < cols.rows(); ++j) {
    if (!missing[j]) continue;
    auto target = cols.row(j);
    for (; candidate < dim; ++candidate) {
      std::fill(target.begin(), target.end(), 0.0);
      target[candidate] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t k = 0; k < cols.rows(); ++k) {
          if (k == j || (missing[k] && k > j)) continue;
          const auto other = cols.row(k);
          const double proj = dot(other, target);
          for (std::size_t i = 0; i < dim; ++i) target[i] -= proj * other[i];
        }
      }
      const double norm = std::sqrt(dot(target, target));
      if (norm > 0.5) {
        for (auto& x : target) x /= norm;
        ++candidate;
        break;
      }
    }
  }
}

// Builds the SvdResult from column-major factors: row j of u_cols / v_cols is
// singular-vector j. Sorts by sigma, fixes signs.
SvdResult assemble(std::vector<double> sigma, const MatrixD& u_cols, const MatrixD& v_cols) {
  const std::size_t p = sigma.size();
  std::vector<std::size_t> order(p);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });

  SvdResult r;
  r.sigma.resize(p);
  r.u = MatrixD(u_cols.cols(), p);
  r.v = MatrixD(v_cols.cols(), p);
  for (std::size_t k = 0; k < p; ++k) {
    const std::size_t src = order[k];
    const auto uc = u_cols.row(src);
    const auto vc = v_cols.row(src);
    std::size_t arg = 0;
    for (std::size_t i = 1; i < uc.size(); ++i)
      if (std::abs(uc[i]) > std::abs(uc[arg])) arg = i;
    const double sign = uc[arg] < 0.0 ? -1.0 : 1.0;
    r.sigma[k] = sigma[src];
    for (std::size_t i = 0; i < uc.size(); ++i) r.u(i, k) = sign * uc[i];
    for (std::size_t i = 0; i < vc.size(); ++i) r.v(i, k) = sign * vc[i];
  }
  return r;
}

SvdResult swap_factors(SvdResult r) {
  std::swap(r.u, r.v);
  // Sign convention is defined on u; re-apply after the swap.
  for (std::size_t k = 0; k < r.sigma.size(); ++k) {
    std::size_t arg = 0;
    for (std::size_t i = 1; i < r.u.rows(); ++i)
      if (std::abs(r.u(i, k)) > std::abs(r.u(arg, k))) arg = i;
    if (r.u(arg, k) < 0.0) {
      for (std::size_t i = 0; i < r.u.rows(); ++i) r.u(i, k) = -r.u(i, k);
      for (std::size_t i = 0; i < r.v.rows(); ++i) r.v(i, k) = -r.v(i, k);
    }
  }
  return r;
}

SvdResult jacobi_tall(const MatrixD& m) {
  const std::size_t rows = m.rows(), n = m.cols();
  MatrixD w = transpose(m);  // row j = column j of m
  MatrixD v = MatrixD::identity(n);
  const double norm_f = frobenius_norm(m);
  const double tol = std::max(1e-15, kEps * static_cast<double>(rows));
  const double tiny = 1e-16 * norm_f;

  bool converged = norm_f == 0.0;
  for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        auto wp = w.row(p);
        auto wq = w.row(q);
        const double alpha = dot(wp, wp);
        const double beta = dot(wq, wq);
        const double gamma = dot(wp, wq);
        if (std::min(alpha, beta) <= tiny * tiny) continue;
        if (std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < rows; ++i) {
          const double a = wp[i], b = wq[i];
          wp[i] = c * a - s * b;
          wq[i] = s * a + c * b;
        }
        auto vp = v.row(p);
        auto vq = v.row(q);
        for (std::size_t i = 0; i < n; ++i) {
          const double a = vp[i], b = vq[i];
          vp[i] = c * a - s * b;
          vq[i] = s * a + c * b;
        }
      }
    }
    converged = !rotated;
  }
  if (!converged) throw NumericError("svd: Jacobi sweeps did not converge");

  std::vector<double> sigma(n);
  std::vector<bool> missing(n, false);
  MatrixD u_cols(n, rows);
  for (std::size_t j = 0; j < n; ++j) {
    const auto col = w.row(j);
    sigma[j] = std::sqrt(dot(col, col));
    if (sigma[j] <= tiny || sigma[j] == 0.0) {
      missing[j] = true;
      continue;
    }
    auto dst = u_cols.row(j);
    for (std::size_t i = 0; i < rows; ++i) dst[i] = col[i] / sigma[j];
  }
  if (std::find(missing.begin(), missing.end(), true) != missing.end()) {
    complete_basis(u_cols, missing);
  }
  return assemble(std::move(sigma), u_cols, v);
}

// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns eigenvalues
// and eigenvectors as rows of `vecs`.
void symmetric_eigen(MatrixD a, std::vector<double>& values, MatrixD& vecs) {
  const std::size_t n = a.rows();
  MatrixD q = MatrixD::identity(n);
  const double scale = frobenius_norm(a);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) off += a(i, j) * a(i, j);
    if (std::sqrt(off) <= 1e-17 * scale || off == 0.0) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t r = p + 1; r < n; ++r) {
        const double apq = a(p, r);
        if (apq == 0.0) continue;
        const double theta = (a(r, r) - a(p, p)) / (2.0 * apq);
        const double t =
            std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(1.0 + theta * theta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {  // A ← A·J
          const double akp = a(k, p), akr = a(k, r);
          a(k, p) = c * akp - s * akr;
          a(k, r) = s * akp + c * akr;
        }
        for (std::size_t k = 0; k < n; ++k) {  // A ← Jᵀ·A
          const double apk = a(p, k), ark = a(r, k);
          a(p, k) = c * apk - s * ark;
          a(r, k) = s * apk + c * ark;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double qkp = q(k, p), qkr = q(k, r);
          q(k, p) = c * qkp - s * qkr;
          q(k, r) = s * qkp + c * qkr;
        }
      }
    }
  }
  values.resize(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = a(i, i);
  vecs = transpose(q);
}

}  // namespace

SvdResult svd(const MatrixD& m) {
  require_svd_input(m, "svd");
  if (m.rows() < m.cols()) return swap_factors(jacobi_tall(transpose(m)));
  return jacobi_tall(m);
}

SvdResult svd_oracle(const MatrixD& m) {
  require_svd_input(m, "svd_oracle");
  const bool tall = m.rows() >= m.cols();
  const std::size_t p = tall ? m.cols() : m.rows();
  if (p > kSvdOracleMaxDim) {
    throw ArgumentError("svd_oracle: min dimension " + std::to_string(p) + " exceeds cap " +
                        std::to_string(kSvdOracleMaxDim));
  }
  // Gram of the short side: eigenvectors are the short-side singular vectors.
  const MatrixD gram = tall ? matmul_tn(m, m) : matmul_nt(m, m);
  std::vector<double> lambda;
  MatrixD short_vecs;
  symmetric_eigen(gram, lambda, short_vecs);

  std::vector<double> sigma(p);
  const double norm_f = frobenius_norm(m);
  const std::size_t long_dim = tall ? m.rows() : m.cols();
  MatrixD long_vecs(p, long_dim);
  std::vector<bool> missing(p, false);
  for (std::size_t k = 0; k < p; ++k) {
    sigma[k] = std::sqrt(std::max(lambda[k], 0.0));
    // long-side vector = m·v/σ (tall) or mᵀ·u/σ (wide)
    auto dst = long_vecs.row(k);
    const auto sv = short_vecs.row(k);
    for (std::size_t i = 0; i < long_dim; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < p; ++j) acc += (tall ? m(i, j) : m(j, i)) * sv[j];
      dst[i] = acc;
    }
    const double len = std::sqrt(dot(dst, dst));
    if (len <= 1e-10 * norm_f || len == 0.0) {
      missing[k] = true;
    } else {
      for (auto& x : dst) x /= len;
    }
  }
  if (std::find(missing.begin(), missing.end(), true) != missing.end()) {
    complete_basis(long_vecs, missing);
  }
  return tall ? assemble(std::move(sigma), long_vecs, short_vecs)
              : assemble(std::move(sigma), short_vecs, long_vecs);
}

std::size_t numerical_rank(const std::vector<double>& sigma, double rel_tol) {
  if (sigma.empty() || sigma.front() == 0.0) return 0;
  const double tau = rel_tol * sigma.front();
  return static_cast<std::size_t>(
      std::count_if(sigma.begin(), sigma.end(), [tau](double s) { return s > tau; }));
}

std::size_t numerical_rank(const MatrixD& m, double rel_tol) {
  return numerical_rank(svd(m).sigma, rel_tol);
}

MatrixD leading_columns(const MatrixD& u, std::size_t count) {
  return column_block(u, 0, count);
}

}  // namespace mlora
