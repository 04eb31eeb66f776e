// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "quaff/tensor.hpp"

namespace quaff {

// PerToken: one step per row (activations). PerOC: one step per column (weights,
// laid out c_in x c_out). PerTensor: one step for everything.
enum class Granularity { PerTensor, PerToken, PerOC };

std::string_view to_string(Granularity g);

inline constexpr int kDefaultBits = 8;

// Largest representable magnitude, 2^(bits-1) - 1. The range is symmetric: -2^(bits-1) is never produced.
constexpr int quant_max(int bits) { return (1 << (bits - 1)) - 1; }

struct QuantizedTensor {
  IntMatrix values;
  std::vector<float> steps;  // length 1, rows or cols
  Granularity granularity = Granularity::PerTensor;
  int bits = kDefaultBits;

  float step_at(std::size_t r, std::size_t c) const {
    switch (granularity) {
      case Granularity::PerToken: return steps[r];
      case Granularity::PerOC: return steps[c];
      default: return steps[0];
    }
  }
};

// Symmetric round-to-nearest. Each group's step is group_abs_max / (2^(bits-1) - 1) and
// values are round-half-away-from-zero(x / step). An all-zero group gets step 1.
// Throws NumericalError on non-finite input, DataError on unsupported bit widths (4..8).
QuantizedTensor quantize(const Matrix& x, Granularity g, int bits = kDefaultBits);

Matrix dequantize(const QuantizedTensor& q);

// out(i, j) = acc(i, j) * row_steps[i] * col_steps[j]; a length-1 span broadcasts.
Matrix rescale_accumulator(const Int32Matrix& acc, std::span<const float> row_steps, std::span<const float> col_steps);

// Integer GEMM with 32-bit accumulation, rescaled by the activation and weight steps.
// qx must be PerToken or PerTensor, qw PerOC or PerTensor.
Matrix quantized_matmul(const QuantizedTensor& qx, const QuantizedTensor& qw);

// g * dequantize(qw)^T without materializing the dequantized weights.
Matrix matmul_dequantized_bt(const Matrix& g, const QuantizedTensor& qw);

struct QuantError {
  double frobenius_rel = 0.0;  // ||x - ref||_F / ||ref||_F, 0 when both are zero
  double max_abs = 0.0;
};

QuantError quant_error(const Matrix& x, const Matrix& ref);

}  // namespace quaff
