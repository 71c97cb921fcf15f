// SPDX-License-Identifier: Apache-2.0
#include "mlora/rng.hpp"

#include <cmath>
#include <limits>

namespace mlora {

std::uint64_t Rng::below(std::uint64_t bound) {
  if (bound == 0) throw ArgumentError("Rng::below: bound must be positive");
  const std::uint64_t limit =
      std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % bound;
}

Rng Rng::fork(std::uint64_t salt) {
  // splitmix64 finalizer over (next output ^ salt)
  std::uint64_t z = engine_() ^ (salt * 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return Rng(z ^ (z >> 31));
}

template <typename T>
Matrix<T> kaiming_uniform(Rng& rng, std::size_t rows, std::size_t cols, std::size_t fan_in) {
  if (fan_in == 0) throw ArgumentError("kaiming_uniform: fan_in must be >= 1");
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  const T bound_t = static_cast<T>(bound);
  Matrix<T> m(rows, cols);
  for (auto& v : m.data()) {
    T s;
    do {
      s = static_cast<T>(rng.uniform(-bound, bound));
    } while (!(std::abs(s) < bound_t));  // rounding to T may land on the bound
    v = s;
  }
  return m;
}

template Matrix<float> kaiming_uniform<float>(Rng&, std::size_t, std::size_t, std::size_t);
template Matrix<double> kaiming_uniform<double>(Rng&, std::size_t, std::size_t, std::size_t);

}  // namespace mlora
