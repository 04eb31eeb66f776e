// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "quaff/config.hpp"
#include "quaff/outlier.hpp"

namespace quaff {

inline constexpr std::string_view kToolVersion = "quaff 0.1.0";
inline constexpr std::string_view kMetricsHeader =
    "step,layer,role,loss,hit_rate,pearson_sim,quant_error,step_latency_ms,storage_bytes";

// One metrics.csv row. Per-step loss rows use layer "model" and role "all"; empty fields are blank.
struct MetricsRecord {
  std::uint64_t step = 0;
  std::string layer;
  std::string role;
  std::optional<double> loss, hit_rate, pearson_sim, quant_error, step_latency_ms;
  std::optional<std::uint64_t> storage_bytes;

  bool operator==(const MetricsRecord&) const = default;
};

std::string format_metrics_row(const MetricsRecord& r);
// Throws DataError on a missing file, wrong header or malformed row.
std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path);

// FP32 forward over calib_batches batches; selects O per layer under the role budgets.
CalibrationArtifact run_calibration(const RunConfig& rc, std::ostream* log = nullptr);

struct TrainResult {
  std::filesystem::path run_dir;
  std::vector<double> losses;  // steps run by this call
  std::uint64_t first_step = 0;
};

// Requires rc.calib and rc.out. With `resume`, continues from <out>/checkpoint.bin when present.
TrainResult run_training(const RunConfig& rc, bool resume = false, std::ostream* log = nullptr);

struct EngineSummary {
  std::string engine;
  std::size_t runs = 0;
  double final_loss_mean = 0.0, final_loss_std = 0.0;
  double mean_hit_rate = 0.0, mean_pearson = 0.0, mean_quant_error = 0.0;
  double mean_step_latency_ms = 0.0;
  std::uint64_t storage_bytes = 0;
};

// Reads run dirs (never writes them), writes merged.csv, summary.csv, report.md and SVG plots into `out`.
std::vector<EngineSummary> run_compare(const std::vector<std::filesystem::path>& dirs, const std::filesystem::path& out,
                                       std::ostream* log = nullptr);

struct BenchRow {
  std::string kernel;
  std::size_t tokens = 0, c_in = 0, c_out = 0;
  double median_ms = 0.0;
  std::size_t reps = 0;
};

std::vector<BenchRow> run_microbench(const RunConfig& rc);
std::string render_bench_csv(const std::vector<BenchRow>& rows);

}  // namespace quaff
