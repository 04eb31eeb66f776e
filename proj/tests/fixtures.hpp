// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#include "quaff/outlier.hpp"
#include "quaff/random.hpp"
#include "quaff/tensor.hpp"

namespace quaff::testing {

// Activations ~ N(0, 1) with one channel blown up `scale` times, plus weights ~ N(0, 0.05).
struct OutlierCase {
  Matrix x;
  Matrix w;
  std::uint32_t channel = 0;
  ChannelIndexSet outliers;
  CalibrationStats calib;
};

inline OutlierCase outlier_injected_case(std::uint64_t seed, std::size_t t = 32, std::size_t c_in = 256,
                                         std::size_t c_out = 64, float scale = 100.0f) {
  OutlierCase c;
  CounterRng pick(derive_seed(seed, "channel"));
  c.channel = static_cast<std::uint32_t>(pick.below(c_in));
  c.x = seeded_random_matrix(t, c_in, derive_seed(seed, "x"), Distribution::normal(0.0f, 1.0f));
  for (std::size_t i = 0; i < t; ++i) c.x(i, c.channel) *= scale;
  c.w = seeded_random_matrix(c_in, c_out, derive_seed(seed, "w"), Distribution::normal(0.0f, 0.05f));
  c.outliers = ChannelIndexSet({c.channel}, c_in);
  // Calibrate on an independent draw from the same family.
  Matrix calib_x = seeded_random_matrix(t, c_in, derive_seed(seed, "calib"), Distribution::normal(0.0f, 1.0f));
  for (std::size_t i = 0; i < t; ++i) calib_x(i, c.channel) *= scale;
  c.calib = CalibrationStats::empty(c_in);
  accumulate_calibration(c.calib, calib_x);
  return c;
}

// Full-precision decomposed forward: (X / s) W + (X / s)_{:,O} (s_O - 1) W_O.
inline Matrix decomposed_reference(const Matrix& x, const Matrix& w, const ChannelIndexSet& o, std::span<const float> s) {
  Matrix x_hat = scale_columns(x, s, ScaleMode::Divide);
  Matrix y = matmul_f32(x_hat, w);
  Matrix w_hat = select_rows(w, o);
  for (std::size_t k = 0; k < o.size(); ++k) {
    for (float& v : w_hat.row(k)) v *= s[o[k]] - 1.0f;
  }
  add_inplace(y, matmul_f32(select_columns(x_hat, o), w_hat));
  return y;
}

}  // namespace quaff::testing
