#pragma once

// Direct real-input DFT. T is small (L + H), so the O(T^2) sum is used
// instead of an FFT.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>

#include "stlgt/tensor.hpp"

namespace stlgt {

// Relative threshold below which a magnitude is reported as exactly zero, so
// that round-off in the bins of a flat series never decides a ranking.
inline constexpr double kDftZeroTolerance = 1e-12;

template <typename Scalar>
struct DftTwiddles {
  MatrixX<Scalar> cos_table;  // bins x T
  MatrixX<Scalar> sin_table;

  explicit DftTwiddles(Eigen::Index length) {
    const Eigen::Index bins = length / 2 + 1;
    cos_table.resize(bins, length);
    sin_table.resize(bins, length);
    for (Eigen::Index f = 0; f < bins; ++f) {
      for (Eigen::Index t = 0; t < length; ++t) {
        const auto phase = static_cast<Scalar>((f * t) % length) / static_cast<Scalar>(length);
        const Scalar angle = Scalar(2) * std::numbers::pi_v<Scalar> * phase;
        cos_table(f, t) = std::cos(angle);
        sin_table(f, t) = std::sin(angle);
      }
    }
  }
};

// Real and imaginary parts per bin and channel: each (floor(T/2)+1) x c.
template <typename Derived>
void rdft(const Eigen::MatrixBase<Derived>& series,
          MatrixX<typename Derived::Scalar>& re,
          MatrixX<typename Derived::Scalar>& im) {
  using Scalar = typename Derived::Scalar;
  const DftTwiddles<Scalar> tw(series.rows());
  re = tw.cos_table * series;
  im = -(tw.sin_table * series);
}

template <typename Derived>
MatrixX<typename Derived::Scalar> rdft_magnitudes(const Eigen::MatrixBase<Derived>& series) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> re, im;
  rdft(series, re, im);
  MatrixX<Scalar> mag = (re.array().square() + im.array().square()).sqrt().matrix();
  for (Eigen::Index c = 0; c < series.cols(); ++c) {
    const Scalar mass = series.col(c).cwiseAbs().sum();
    for (Eigen::Index f = 0; f < mag.rows(); ++f) {
      if (mag(f, c) <= Scalar(kDftZeroTolerance) * mass) mag(f, c) = Scalar(0);
    }
  }
  return mag;
}

// Channel-mean magnitude per bin, used to score candidate periods.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> bin_mean_amplitude(
    const Eigen::MatrixBase<Derived>& series) {
  return rdft_magnitudes(series).rowwise().mean();
}

}  // namespace stlgt
