// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>

#include "quaff/tensor.hpp"

namespace quaff {

// Counter-based generator. Draw i of stream `seed` is
//   splitmix64(seed + (i + 1) * 0x9E3779B97F4A7C15)
// with the standard SplitMix64 finalizer
//   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//   z =  z ^ (z >> 31)
// so any draw can be reproduced from (seed, counter) alone, in any language.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t counter = 0) : seed_(seed), counter_(counter) {}

  std::uint64_t next_u64();
  // Top 24 bits scaled by 2^-24: uniform on [0, 1) and exactly representable.
  float uniform();
  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }
  // Box-Muller on two uniform draws (the first is shifted into (0, 1]).
  float normal(float mean = 0.0f, float stddev = 1.0f);
  // Uniform integer in [0, n) by multiply-shift on 32 high bits.
  std::uint64_t below(std::uint64_t n);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

std::uint64_t splitmix64(std::uint64_t z);

// Stream splitting: child seed for a named or numbered component of one root seed.
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream);
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream);

struct Distribution {
  enum class Kind { Uniform, Normal };
  Kind kind = Kind::Uniform;
  float a = -1.0f;  // lo or mean
  float b = 1.0f;   // hi or stddev

  static Distribution uniform(float lo, float hi) { return {Kind::Uniform, lo, hi}; }
  static Distribution normal(float mean, float stddev) { return {Kind::Normal, mean, stddev}; }
};

// Entries drawn in row-major order from CounterRng(seed).
Matrix seeded_random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed,
                            Distribution dist = Distribution::uniform(-1.0f, 1.0f));

}  // namespace quaff
