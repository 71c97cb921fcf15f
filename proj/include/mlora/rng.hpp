// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>

#include "mlora/matrix.hpp"

namespace mlora {

/// Seeded 64-bit generator. The engine is mt19937_64, whose output sequence
/// is fixed by the standard; all conversions to real and integer ranges are
/// done here rather than through the implementation-defined <random>
/// distributions, so streams are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on the open interval (0, 1).
  double uniform_open() {
    return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
  }

  /// Uniform on the open interval (lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform_open(); }

  /// Uniform integer in [0, bound). Rejection sampling keeps it unbiased.
  std::uint64_t below(std::uint64_t bound);

  /// Child generator with an independent stream.
  Rng fork(std::uint64_t salt);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

/// i.i.d. samples from U(-1/√fan_in, +1/√fan_in); never hits the bound.
template <typename T>
Matrix<T> kaiming_uniform(Rng& rng, std::size_t rows, std::size_t cols, std::size_t fan_in);

/// Fisher-Yates shuffle driven by `rng`.
template <typename Container>
void shuffle(Container& items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i));
    using std::swap;
    swap(items[i - 1], items[j]);
  }
}

}  // namespace mlora
