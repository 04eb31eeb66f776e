// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "quaff/tensor.hpp"

namespace quaff {

inline constexpr float kDefaultMomentum = 0.2f;
inline constexpr float kDefaultSmoothAlpha = 0.5f;

// Per-channel outlier scaling for one layer. s is 1 off the outlier set and >= 1 on it.
// Single writer: only the owning training loop calls momentum_update.
struct ScalingState {
  std::vector<float> s;
  float gamma = kDefaultMomentum;
  std::uint64_t step = 0;

  static ScalingState identity(std::size_t c_in, float gamma) { return {std::vector<float>(c_in, 1.0f), gamma, 0}; }
};

// beta_i = 1 off O; beta_i = max(1, sqrt(colmax_i / wmax_i)) on O, with colmax over all rows of x.
// w_row_abs_max is indexed like O (one entry per outlier channel) and must be positive.
std::vector<float> compute_beta(const Matrix& x, std::span<const float> w_row_abs_max, const ChannelIndexSet& outliers);
// Same formula from precomputed column maxima (length c_in).
std::vector<float> compute_beta_from_maxima(std::span<const float> col_abs_max, std::span<const float> w_row_abs_max,
                                            const ChannelIndexSet& outliers);

// s_t = gamma * s_{t-1} + (1 - gamma) * beta, then step += 1.
void momentum_update(ScalingState& state, std::span<const float> beta);

// s_i = xmax_i^alpha / wmax_i^(1 - alpha); zero maxima are floored to 1e-8 and s to 1e-5.
std::vector<float> smooth_factors(std::span<const float> x_col_abs_max, std::span<const float> w_row_abs_max,
                                  float alpha = kDefaultSmoothAlpha);

// Sample Pearson correlation restricted to the indices of the ceil(top_frac * n) largest
// entries of a (ties to the lower index). A constant side yields 0.
double pearson_similarity(std::span<const float> a, std::span<const float> b, double top_frac);

}  // namespace quaff
