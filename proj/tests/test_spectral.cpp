// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <sstream>

#include "mlora/spectral.hpp"
#include "oracles.hpp"

using namespace mlora;

namespace {

// ‖U_a[:, :i]ᵀ U_b[:, :j]‖_F² / min(i, j) from oracle bases.
double phi_oracle(const MatrixD& a, const MatrixD& b, std::size_t i, std::size_t j) {
  const MatrixD ua = svd_oracle(a).u, ub = svd_oracle(b).u;
  double s = 0.0;
  for (std::size_t p = 0; p < i; ++p) {
    for (std::size_t q = 0; q < j; ++q) {
      double dot = 0.0;
      for (std::size_t k = 0; k < ua.rows(); ++k) dot += ua(k, p) * ub(k, q);
      s += dot * dot;
    }
  }
  return s / static_cast<double>(std::min(i, j));
}

MatrixD diag(std::initializer_list<double> d) {
  MatrixD m(d.size(), d.size());
  std::size_t i = 0;
  for (double v : d) m(i, i) = v, ++i;
  return m;
}

}  // namespace

TEST_SUITE("spectral") {

TEST_CASE("identical and orthogonal subspaces") {
  const MatrixD m = oracle::random_matrix(8, 6, 1);
  for (std::size_t i = 1; i <= 6; ++i) CHECK(subspace_similarity(m, m, i, i) == doctest::Approx(1.0));
  MatrixD e1(4, 4), e2(4, 4);
  e1(0, 0) = 1.0;
  e2(1, 1) = 1.0;
  CHECK(subspace_similarity(e1, e2, 1, 1) == doctest::Approx(0.0));
}

TEST_CASE("similarity agrees with the oracle") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const MatrixD a = oracle::random_matrix(10, 7, seed), b = oracle::random_matrix(10, 7, seed + 50);
    CHECK(std::abs(subspace_similarity(a, b, 3, 5) - phi_oracle(a, b, 3, 5)) < 1e-8);
    CHECK(std::abs(subspace_similarity(a, b, 6, 2) - phi_oracle(a, b, 6, 2)) < 1e-8);
    const MatrixD at = oracle::naive_transpose(a), bt = oracle::naive_transpose(b);
    CHECK(std::abs(subspace_similarity(at, bt, 2, 4, true) - phi_oracle(a, b, 2, 4)) < 1e-8);
  }
}

TEST_CASE("similarity bounds and arguments") {
  const MatrixD a = oracle::random_matrix(6, 5, 3), b = oracle::random_matrix(6, 5, 4);
  CHECK_THROWS_AS(subspace_similarity(a, b, 0, 1), ArgumentError);
  CHECK_THROWS_AS(subspace_similarity(a, b, 1, 6), ArgumentError);
  CHECK_THROWS_AS(subspace_similarity(a, oracle::random_matrix(5, 5, 1), 1, 1), ShapeError);
  const SimilarityGrid g = similarity_grid(a, b, 5);
  CHECK(g.values.size() == 25);
  for (double v : g.values) {
    CHECK(v >= -1e-12);
    CHECK(v <= 1.0 + 1e-12);
  }
  const MatrixD sq = oracle::random_matrix(5, 5, 2);
  CHECK(similarity_grid(sq, oracle::random_matrix(5, 5, 3), 5).at(5, 5) == doctest::Approx(1.0));
  CHECK_THROWS_AS(similarity_grid(a, b, 6), ArgumentError);
}

TEST_CASE("grid matches pointwise similarity and is transpose symmetric") {
  const MatrixD a = oracle::random_matrix(12, 9, 5), b = oracle::random_matrix(12, 9, 6);
  const SimilarityGrid ab = similarity_grid(a, b, 8), ba = similarity_grid(b, a, 8);
  const SimilarityGrid aa = similarity_grid(a, a, 8);
  for (std::size_t i = 1; i <= 8; ++i) {
    CHECK(aa.at(i, i) == doctest::Approx(1.0));
    for (std::size_t j = 1; j <= 8; ++j) {
      CHECK(std::abs(ab.at(i, j) - subspace_similarity(a, b, i, j)) < 1e-12);
      CHECK(std::abs(ab.at(i, j) - ba.at(j, i)) < 1e-12);
    }
  }
}

TEST_CASE("histogram bins") {
  const SpectrumHistogram h = sv_histogram(diag({10.0, 1.0, 0.1}));
  REQUIRE(h.bins() == 40);
  CHECK(h.edges.front() == -2.0);
  CHECK(h.edges.back() == 8.0);
  for (std::size_t b = 0; b < 40; ++b) CHECK(h.counts[b] == ((b == 4 || b == 8 || b == 12) ? 1.0 : 0.0));
  CHECK(h.zero_count == 0.0);
  CHECK(h.total() == 3.0);

  const HistogramSpec spec;
  CHECK(spec.bin_of(-5.0) == 0);
  CHECK(spec.bin_of(100.0) == 39);
  const SpectrumHistogram z = sv_histogram(std::vector<double>{2.0, 1e-9, 0.0});
  CHECK(z.zero_count == 2.0);
  CHECK(z.total() == 3.0);
}

TEST_CASE("lora update has at least k - r zero singular values") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const MatrixD dw = oracle::low_rank(16, 24, 3, seed);
    CHECK(sv_histogram(dw).zero_count >= 16 - 3);
  }
}

TEST_CASE("aggregation") {
  const MatrixD a = oracle::random_matrix(6, 6, 7), b = oracle::low_rank(6, 6, 2, 8);
  const auto same = sv_histogram({a, a, a}, Aggregation::mean);
  REQUIRE(same.size() == 1);
  CHECK(same[0].counts == sv_histogram(a).counts);
  CHECK(same[0].matrices == 3);
  const auto per = sv_histogram({a, b}, Aggregation::per_layer);
  REQUIRE(per.size() == 2);
  CHECK(per[1].zero_count == sv_histogram(b).zero_count);
  const auto mean = sv_histogram({a, b}, Aggregation::mean);
  for (std::size_t k = 0; k < 40; ++k)
    CHECK(mean[0].counts[k] == doctest::Approx((per[0].counts[k] + per[1].counts[k]) / 2));
  CHECK_THROWS_AS(sv_histogram(std::vector<MatrixD>{}, Aggregation::mean), ArgumentError);
  CHECK_THROWS_AS(sv_histogram({a, oracle::random_matrix(5, 6, 1)}, Aggregation::mean), ArgumentError);
}

TEST_CASE("pairwise sub-lora grids") {
  Rng rng(9);
  auto ad = make_multilora<double>(10, 8, 3, 2, rng);
  CHECK_THROWS_AS(pairwise_sublora_grid(ad, 2), DegenerateInputError);
  for (std::size_t i = 0; i < 3; ++i) ad.scaling[i].value = oracle::random_matrix(1, 8, 20 + i);
  const auto grids = pairwise_sublora_grid(ad, 2);
  REQUIRE(grids.size() == 9);
  for (std::size_t i = 0; i < 3; ++i) {
    const MatrixD di = materialize_module_delta(ad, i);
    CHECK(grids[i * 3 + i].at(2, 2) == doctest::Approx(1.0));
    for (std::size_t j = 0; j < 3; ++j) {
      const MatrixD dj = materialize_module_delta(ad, j);
      CHECK(grids[i * 3 + j].source_a == "sub" + std::to_string(i));
      CHECK(std::abs(grids[i * 3 + j].at(1, 2) - grids[j * 3 + i].at(2, 1)) < 1e-12);
      CHECK(std::abs(grids[i * 3 + j].at(2, 2) - phi_oracle(di, dj, 2, 2)) < 1e-8);
    }
  }
  auto one = make_multilora<double>(10, 8, 1, 2, rng);
  CHECK_THROWS_AS(pairwise_sublora_grid(one, 2), ArgumentError);
}

TEST_CASE("csv output") {
  SimilarityGrid g;
  g.max_i = 2;
  g.max_j = 1;
  g.values = {1.0, 0.125};
  std::ostringstream os;
  write_grid_csv(os, g);
  CHECK(os.str() == "i,j,phi\n1,1,1\n2,1,0.125\n");

  SpectrumHistogram h = sv_histogram(diag({10.0}));
  std::ostringstream hs;
  write_histogram_csv(hs, h);
  const std::string s = hs.str();
  CHECK(s.starts_with("bin_lo,bin_hi,count\n-2,-1.75,0\n"));
  CHECK(s.find("\n-1,-0.75,1\n") != std::string::npos);
  CHECK(s.ends_with("zero_count,,0\n"));
  CHECK(format_real(1.0 / 3.0) == "0.333333333333");
}

}
