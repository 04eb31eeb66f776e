// SPDX-License-Identifier: Apache-2.0
#include "quaff/random.hpp"

#include <cmath>
#include <numbers>

namespace quaff {

std::uint64_t splitmix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t CounterRng::next_u64() {
  ++counter_;
  return splitmix64(seed_ + counter_ * 0x9E3779B97F4A7C15ULL);
}

float CounterRng::uniform() {
  return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f;
}

float CounterRng::normal(float mean, float stddev) {
  double u1 = (static_cast<double>(next_u64() >> 40) + 1.0) * 0x1.0p-24;
  double u2 = static_cast<double>(next_u64() >> 40) * 0x1.0p-24;
  double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  return mean + stddev * static_cast<float>(z);
}

std::uint64_t CounterRng::below(std::uint64_t n) {
  return ((next_u64() >> 32) * n) >> 32;
}

std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream) {
  return splitmix64(root ^ splitmix64(stream + 0x632BE59BD9B4E019ULL));
}

std::uint64_t derive_seed(std::uint64_t root, std::string_view stream) {
  // FNV-1a over the stream name.
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : stream) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return derive_seed(root, h);
}

Matrix seeded_random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, Distribution dist) {
  Matrix m(rows, cols);
  CounterRng rng(seed);
  for (float& v : m.data) {
    v = dist.kind == Distribution::Kind::Uniform ? rng.uniform(dist.a, dist.b) : rng.normal(dist.a, dist.b);
  }
  return m;
}

}  // namespace quaff
