#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace stlgt {

// Quantile by linear interpolation between order statistics:
// position q * (n - 1) in the sorted sample.
template <typename Scalar>
Scalar quantile_sorted(const std::vector<Scalar>& sorted, Scalar q) {
  if (sorted.empty()) throw std::invalid_argument("quantile of empty sample");
  const Scalar pos = q * static_cast<Scalar>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const Scalar frac = pos - static_cast<Scalar>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

template <typename Scalar>
Scalar quantile(std::vector<Scalar> values, Scalar q) {
  std::sort(values.begin(), values.end());
  return quantile_sorted(values, q);
}

}  // namespace stlgt
