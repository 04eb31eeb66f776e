// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "quaff/error.hpp"
#include "quaff/random.hpp"
#include "quaff/scaling.hpp"

using namespace quaff;

TEST_CASE("compute_beta examples") {
  // Column 1 peaks at 9, its weight row at 1: beta = sqrt(9) = 3.
  Matrix x = make_matrix({{0.5f, 9.0f, 0.1f}, {-0.2f, -4.0f, 0.3f}});
  std::vector<float> wmax{1.0f};
  auto beta = compute_beta(x, wmax, ChannelIndexSet({1}, 3));
  CHECK(beta == std::vector<float>{1.0f, 3.0f, 1.0f});

  // sqrt(0.25) = 0.5 clamps to 1.
  auto clamped = compute_beta(make_matrix({{0.0f, 0.25f}}), wmax, ChannelIndexSet({1}, 2));
  CHECK(clamped[1] == 1.0f);

  auto none = compute_beta(x, {}, ChannelIndexSet());
  CHECK(none == std::vector<float>(3, 1.0f));

  std::vector<float> zero{0.0f};
  CHECK_THROWS_AS(compute_beta(x, zero, ChannelIndexSet({1}, 3)), DataError);
}

TEST_CASE("compute_beta is invariant to token order and monotone in input scale") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Matrix x = seeded_random_matrix(12, 16, seed, Distribution::normal(0, 5));
    ChannelIndexSet o({2, 5, 11}, 16);
    std::vector<float> wmax{0.1f, 0.5f, 0.02f};
    auto base = compute_beta(x, wmax, o);

    Matrix rev(x.rows, x.cols);
    for (std::size_t i = 0; i < x.rows; ++i) {
      std::copy_n(x.row(x.rows - 1 - i).begin(), x.cols, rev.row(i).begin());
    }
    CHECK(compute_beta(rev, wmax, o) == base);

    auto prev = base;
    for (float c : {1.0f, 1.5f, 3.0f, 10.0f}) {
      Matrix cx = x;
      for (float& v : cx.data) v *= c;
      auto b = compute_beta(cx, wmax, o);
      for (std::size_t i = 0; i < b.size(); ++i) CHECK(b[i] >= prev[i]);
      prev = b;
    }
  }
}

TEST_CASE("momentum_update examples") {
  ScalingState st{{1.0f, 3.0f}, 0.2f, 0};
  std::vector<float> beta{1.0f, 5.0f};
  momentum_update(st, beta);
  CHECK(st.s[1] == 4.6f);
  CHECK(st.s[0] == 1.0f);
  CHECK(st.step == 1);

  ScalingState frozen{{1.0f, 3.0f}, 1.0f, 0};
  momentum_update(frozen, beta);
  CHECK(frozen.s[1] == 3.0f);

  ScalingState memoryless{{1.0f, 3.0f}, 0.0f, 0};
  momentum_update(memoryless, beta);
  CHECK(memoryless.s[1] == 5.0f);

  CHECK_THROWS_AS(momentum_update(st, std::vector<float>{1.0f}), DataError);
}

TEST_CASE("momentum_update keeps off-outlier channels at exactly 1 and blends convexly") {
  ChannelIndexSet o({0, 3, 7}, 10);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    CounterRng rng(seed);
    ScalingState st = ScalingState::identity(10, rng.uniform());
    for (int t = 0; t < 50; ++t) {
      Matrix x = seeded_random_matrix(4, 10, seed * 100 + t, Distribution::normal(0, 20));
      auto beta = compute_beta(x, std::vector<float>{0.3f, 0.05f, 1.0f}, o);
      auto prev = st.s;
      momentum_update(st, beta);
      for (std::uint32_t i = 0; i < 10; ++i) {
        if (!o.contains(i)) {
          CHECK(st.s[i] == 1.0f);
        } else {
          CHECK(st.s[i] >= 1.0f);
          CHECK(st.s[i] >= std::min(prev[i], beta[i]) * (1 - 1e-6f));
          CHECK(st.s[i] <= std::max(prev[i], beta[i]) * (1 + 1e-6f));
        }
      }
    }
  }
}

TEST_CASE("smooth_factors") {
  std::vector<float> xm{4, 1}, wm{1, 4};
  auto s = smooth_factors(xm, wm, 0.5f);
  CHECK(s[0] == doctest::Approx(2.0));
  CHECK(s[1] == doctest::Approx(0.5));

  auto s0 = smooth_factors(xm, wm, 0.0f);
  CHECK(s0[0] == doctest::Approx(1.0));
  CHECK(s0[1] == doctest::Approx(0.25));

  std::vector<float> same{3, 7};
  for (float v : smooth_factors(same, same, 0.5f)) CHECK(v == doctest::Approx(1.0));

  // Zero maxima are floored rather than dividing by zero.
  std::vector<float> z{0, 0};
  for (float v : smooth_factors(z, z, 0.5f)) CHECK(std::isfinite(v));
  for (float v : smooth_factors(z, wm, 0.5f)) CHECK(v >= 1e-5f);
}

TEST_CASE("pearson_similarity") {
  std::vector<float> a{1, 2, 3, 7, 4};
  CHECK(pearson_similarity(a, a, 1.0) == doctest::Approx(1.0));
  std::vector<float> anti(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) anti[i] = 10.0f - a[i];
  CHECK(pearson_similarity(a, anti, 1.0) == doctest::Approx(-1.0));
  CHECK(pearson_similarity(std::vector<float>{1, 2, 3}, std::vector<float>{2, 4, 6}, 1.0) == doctest::Approx(1.0));

  std::vector<float> flat(a.size(), 2.0f);
  CHECK(pearson_similarity(a, flat, 1.0) == 0.0);
  CHECK_THROWS_AS(pearson_similarity(a, a, 0.1), DataError);

  // Top 40% of a = indices {3, 4}; b agrees there and disagrees elsewhere.
  std::vector<float> b{9, -9, 9, 7, 4};
  CHECK(pearson_similarity(a, b, 0.4) == doctest::Approx(1.0));
}
