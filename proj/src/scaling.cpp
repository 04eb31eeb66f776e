// SPDX-License-Identifier: Apache-2.0
#include "quaff/scaling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "quaff/error.hpp"

namespace quaff {

std::vector<float> compute_beta_from_maxima(std::span<const float> col_abs_max, std::span<const float> w_row_abs_max,
                                            const ChannelIndexSet& outliers) {
  if (w_row_abs_max.size() != outliers.size()) {
    throw DataError("weight maxima length " + std::to_string(w_row_abs_max.size()) + " does not match |O| = " +
                    std::to_string(outliers.size()));
  }
  std::vector<float> beta(col_abs_max.size(), 1.0f);
  for (std::size_t k = 0; k < outliers.size(); ++k) {
    const std::uint32_t c = outliers[k];
    if (c >= col_abs_max.size()) throw DataError("outlier channel " + std::to_string(c) + " out of range");
    if (!(w_row_abs_max[k] > 0.0f)) {
      throw DataError("weight row " + std::to_string(c) + " has zero abs-max; cannot scale it");
    }
    beta[c] = std::max(1.0f, std::sqrt(col_abs_max[c] / w_row_abs_max[k]));
  }
  return beta;
}

std::vector<float> compute_beta(const Matrix& x, std::span<const float> w_row_abs_max, const ChannelIndexSet& outliers) {
  if (outliers.empty()) return std::vector<float>(x.cols, 1.0f);
  return compute_beta_from_maxima(col_abs_max(x), w_row_abs_max, outliers);
}

void momentum_update(ScalingState& state, std::span<const float> beta) {
  if (beta.size() != state.s.size()) {
    throw DataError("beta length " + std::to_string(beta.size()) + " does not match state length " +
                    std::to_string(state.s.size()));
  }
  const float g = state.gamma;
  for (std::size_t i = 0; i < beta.size(); ++i) {
    // Off O both operands are exactly 1, and g*1 + (1-g)*1 rounds back to 1 for any g in [0, 1].
    if (state.s[i] == 1.0f && beta[i] == 1.0f) continue;
    state.s[i] = g * state.s[i] + (1.0f - g) * beta[i];
  }
  ++state.step;
}

std::vector<float> smooth_factors(std::span<const float> x_col_abs_max, std::span<const float> w_row_abs_max,
                                  float alpha) {
  if (x_col_abs_max.size() != w_row_abs_max.size()) {
    throw DataError("smoothing maxima lengths differ: " + std::to_string(x_col_abs_max.size()) + " vs " +
                    std::to_string(w_row_abs_max.size()));
  }
  constexpr float kMaxFloor = 1e-8f;
  constexpr float kScaleFloor = 1e-5f;
  std::vector<float> s(x_col_abs_max.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double xm = std::max(x_col_abs_max[i], kMaxFloor);
    const double wm = std::max(w_row_abs_max[i], kMaxFloor);
    const double v = std::pow(xm, alpha) / std::pow(wm, 1.0 - alpha);
    s[i] = std::max(static_cast<float>(v), kScaleFloor);
  }
  return s;
}

double pearson_similarity(std::span<const float> a, std::span<const float> b, double top_frac) {
  if (a.size() != b.size()) throw DataError("pearson inputs differ in length");
  std::size_t keep = static_cast<std::size_t>(std::ceil(top_frac * static_cast<double>(a.size())));
  keep = std::min(keep, a.size());
  if (keep < 2) throw DataError("pearson similarity needs at least 2 entries after filtering, got " + std::to_string(keep));

  std::vector<std::size_t> idx(a.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t l, std::size_t r) { return a[l] > a[r]; });
  idx.resize(keep);

  double ma = 0.0, mb = 0.0;
  for (std::size_t i : idx) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(keep);
  mb /= static_cast<double>(keep);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i : idx) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

}  // namespace quaff
