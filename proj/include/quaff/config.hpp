// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "quaff/model.hpp"
#include "quaff/qlinear.hpp"
#include "quaff/train.hpp"

namespace quaff {

// Grammar (one statement per line):
//   line    := blank | comment | section | pair
//   comment := ('#' | ';') any*
//   section := '[' name ']'
//   pair    := key '=' value        key and value are trimmed; value runs to end of line
// Keys are scoped by the preceding section. Unknown sections or keys are errors.
// Relative paths resolve against the directory holding the config file.
struct RunConfig {
  std::filesystem::path corpus;
  ModelConfig model;  // vocab_size is filled in from the corpus
  TrainConfig train;
  EngineKind engine = EngineKind::Quaff;
  EngineConfig engine_config;
  std::array<float, 6> budget{0.0003f, 0.0003f, 0.0003f, 0.04f, 0.0003f, 0.10f};
  double max_full_precision = kMaxFullPrecisionFraction;
  float threshold = kDefaultOutlierThreshold;
  std::size_t calib_batches = 8;
  std::filesystem::path calib;  // optional, train can take it from here
  std::filesystem::path out;
  std::uint64_t seed = 0;       // run seed: batches, dropout
  std::size_t checkpoint_every = 100;
  bool record_latency = true;
  double pearson_top = 0.01;

  std::vector<std::size_t> bench_shapes{128, 256, 512};
  std::size_t bench_tokens = 64;
  std::size_t bench_reps = 20;
  std::size_t bench_warmup = 3;

  // Throws ConfigError; checks ranges and that the corpus (and calib, when set) exist.
  void validate() const;
};

// Throws ConfigError with the offending line number.
RunConfig parse_run_config(std::string_view text, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);
// Fully resolved config in the same grammar, absolute paths; parses back to an equal config.
std::string render_run_config(const RunConfig& rc);

}  // namespace quaff
