// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "quaff/tensor.hpp"

namespace quaff {

inline constexpr float kDefaultOutlierThreshold = 100.0f;

// Per-layer calibration statistics. xi[o] counts the samples in which channel o's
// abs-max exceeded threshold * mean(|X|) over the whole sample.
struct CalibrationStats {
  std::vector<std::uint32_t> xi;
  std::vector<float> channel_abs_max;
  std::uint64_t samples_seen = 0;

  static CalibrationStats empty(std::size_t c_in) { return {std::vector<std::uint32_t>(c_in, 0), std::vector<float>(c_in, 0.0f), 0}; }
  std::size_t c_in() const { return xi.size(); }

  // Counts add, maxima max, samples add.
  void merge(const CalibrationStats& other);
  bool operator==(const CalibrationStats&) const = default;
};

void accumulate_calibration(CalibrationStats& stats, const Matrix& x, float threshold = kDefaultOutlierThreshold);

// Top `budget` channels by xi, ties to the larger channel abs-max, then the lower index.
// Channels never seen outlying (xi == 0) are never selected.
ChannelIndexSet select_outliers(const CalibrationStats& stats, std::size_t budget);

// Channels whose column abs-max exceeds threshold * mean(|X|) in this batch.
ChannelIndexSet runtime_outliers(const Matrix& x, float threshold = kDefaultOutlierThreshold);

// |runtime ∩ predefined| / |runtime|; 1 when nothing outlies at runtime.
double hit_rate(const ChannelIndexSet& predefined, const ChannelIndexSet& runtime);

enum class LayerRole { QProj, KProj, VProj, OProj, UpProj, DownProj };

inline constexpr LayerRole kAllRoles[] = {LayerRole::QProj, LayerRole::KProj, LayerRole::VProj,
                                         LayerRole::OProj, LayerRole::UpProj, LayerRole::DownProj};

std::string_view to_string(LayerRole role);
std::optional<LayerRole> parse_layer_role(std::string_view s);

// 0.03% of c_in for q/k/v/up, 4% for o, 10% for down.
float default_budget_fraction(LayerRole role);

inline constexpr double kMaxFullPrecisionFraction = 0.05;

struct LayerBudgetSpec {
  LayerRole role = LayerRole::QProj;
  std::size_t c_in = 0;
  std::size_t c_out = 0;
  float budget_frac = 0.0f;
};

struct BudgetAllocation {
  std::vector<std::size_t> counts;
  double full_precision_fraction = 0.0;  // sum(count * c_out) / sum(c_in * c_out)
};

// count = floor(frac * c_in) per layer. If the retained full-precision fraction exceeds 5%,
// the o_proj and down_proj counts are scaled down by a common factor until it fits.
BudgetAllocation allocate_budgets(const std::vector<LayerBudgetSpec>& layers,
                                  double max_fraction = kMaxFullPrecisionFraction);

// One layer of the calibration artifact.
struct CalibrationLayer {
  std::string name;  // e.g. "layers.0.q_proj"
  LayerRole role = LayerRole::QProj;
  std::size_t c_out = 0;
  CalibrationStats stats;
  ChannelIndexSet outliers;
  std::size_t budget = 0;
};

struct CalibrationArtifact {
  std::vector<CalibrationLayer> layers;
  double full_precision_fraction = 0.0;

  const CalibrationLayer* find(std::string_view name) const;
};

inline constexpr std::string_view kCalibrationHeader = "quaff-calib v1";

// Line-oriented text; rendering is deterministic so equal artifacts give equal bytes.
std::string render_calibration(const CalibrationArtifact& artifact);
CalibrationArtifact parse_calibration(std::string_view text);
void save_calibration(const CalibrationArtifact& artifact, const std::string& path);
CalibrationArtifact load_calibration(const std::string& path);

}  // namespace quaff
