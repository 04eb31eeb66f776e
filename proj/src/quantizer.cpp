// SPDX-License-Identifier: Apache-2.0
#include "quaff/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "quaff/error.hpp"
#include "quaff/parallel.hpp"

namespace quaff {

std::string_view to_string(Granularity g) {
  switch (g) {
    case Granularity::PerTensor: return "per-tensor";
    case Granularity::PerToken: return "per-token";
    case Granularity::PerOC: return "per-oc";
  }
  return "?";
}

namespace {

float step_for(float abs_max, int qmax) {
  if (abs_max == 0.0f) return 1.0f;
  return abs_max / static_cast<float>(qmax);
}

}  // namespace

QuantizedTensor quantize(const Matrix& x, Granularity g, int bits) {
  if (bits < 4 || bits > 8) throw DataError("unsupported bit width " + std::to_string(bits));
  if (!all_finite(x)) throw NumericalError("cannot quantize non-finite values (" + x.shape() + ")");
  const int qmax = quant_max(bits);

  QuantizedTensor q;
  q.granularity = g;
  q.bits = bits;
  q.values = IntMatrix(x.rows, x.cols);

  switch (g) {
    case Granularity::PerTensor:
      q.steps = {step_for(x.empty() ? 0.0f : global_abs_max(x), qmax)};
      break;
    case Granularity::PerToken:
      q.steps.resize(x.rows);
      for (std::size_t i = 0; i < x.rows; ++i) {
        float m = 0.0f;
        for (float v : x.row(i)) m = std::max(m, std::fabs(v));
        q.steps[i] = step_for(m, qmax);
      }
      break;
    case Granularity::PerOC: {
      std::vector<float> m(x.cols, 0.0f);
      for (std::size_t i = 0; i < x.rows; ++i) {
        for (std::size_t j = 0; j < x.cols; ++j) m[j] = std::max(m[j], std::fabs(x(i, j)));
      }
      q.steps.resize(x.cols);
      for (std::size_t j = 0; j < x.cols; ++j) q.steps[j] = step_for(m[j], qmax);
      break;
    }
  }

  for (std::size_t i = 0; i < x.rows; ++i) {
    for (std::size_t j = 0; j < x.cols; ++j) {
      const double step = q.step_at(i, j);
      const double src = x(i, j);
      // std::round rounds halves away from zero.
      double r = std::round(src / step);
      r = std::clamp(r, static_cast<double>(-qmax), static_cast<double>(qmax));
      if (std::fabs(src - r * step) > 0.5 * step * (1.0 + 1e-6)) {
        throw NumericalError("quantization error exceeds half a step at (" + std::to_string(i) + ", " +
                             std::to_string(j) + ")");
      }
      q.values(i, j) = static_cast<std::int8_t>(r);
    }
  }
  return q;
}

Matrix dequantize(const QuantizedTensor& q) {
  Matrix out(q.values.rows, q.values.cols);
  for (std::size_t i = 0; i < out.rows; ++i) {
    for (std::size_t j = 0; j < out.cols; ++j) {
      out(i, j) = static_cast<float>(q.values(i, j)) * q.step_at(i, j);
    }
  }
  return out;
}

Matrix rescale_accumulator(const Int32Matrix& acc, std::span<const float> row_steps, std::span<const float> col_steps) {
  const bool row_bcast = row_steps.size() == 1;
  const bool col_bcast = col_steps.size() == 1;
  if ((!row_bcast && row_steps.size() != acc.rows) || (!col_bcast && col_steps.size() != acc.cols)) {
    throw DataError("step vectors do not match accumulator " + acc.shape());
  }
  Matrix out(acc.rows, acc.cols);
  for (std::size_t i = 0; i < acc.rows; ++i) {
    const float sr = row_bcast ? row_steps[0] : row_steps[i];
    for (std::size_t j = 0; j < acc.cols; ++j) {
      const float sc = col_bcast ? col_steps[0] : col_steps[j];
      out(i, j) = static_cast<float>(acc(i, j)) * sr * sc;
    }
  }
  return out;
}

Matrix quantized_matmul(const QuantizedTensor& qx, const QuantizedTensor& qw) {
  if (qx.granularity == Granularity::PerOC) {
    throw DataError("activation operand must be per-token or per-tensor, got per-oc");
  }
  if (qw.granularity == Granularity::PerToken) {
    throw DataError("weight operand must be per-oc or per-tensor, got per-token");
  }
  Int32Matrix acc = matmul_i8_acc32(qx.values, qw.values);
  return rescale_accumulator(acc, qx.steps, qw.steps);
}

Matrix matmul_dequantized_bt(const Matrix& g, const QuantizedTensor& qw) {
  // qw is k x n; result is g (t x n) times qw^T (n x k).
  if (g.cols != qw.values.cols) {
    throw DataError("matmul shape mismatch: " + g.shape() + " * (" + qw.values.shape() + ")^T");
  }
  const std::size_t k = qw.values.rows, n = qw.values.cols;
  // Fold the column steps into g once, then walk the int8 rows.
  Matrix gs = g;
  if (qw.granularity == Granularity::PerOC) {
    gs = scale_columns(g, qw.steps, ScaleMode::Multiply);
  } else {
    for (float& v : gs.data) v *= qw.steps[0];
  }
  Matrix wt(n, k);
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < n; ++j) wt(j, p) = static_cast<float>(qw.values(p, j));
  }
  return matmul_f32(gs, wt);
}

QuantError quant_error(const Matrix& x, const Matrix& ref) {
  if (x.rows != ref.rows || x.cols != ref.cols) {
    throw DataError("quant_error shape mismatch: " + x.shape() + " vs " + ref.shape());
  }
  double diff2 = 0.0, ref2 = 0.0, max_abs = 0.0;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double d = static_cast<double>(x.data[i]) - ref.data[i];
    diff2 += d * d;
    ref2 += static_cast<double>(ref.data[i]) * ref.data[i];
    max_abs = std::max(max_abs, std::fabs(d));
  }
  QuantError e;
  e.max_abs = max_abs;
  if (ref2 > 0.0) {
    e.frobenius_rel = std::sqrt(diff2) / std::sqrt(ref2);
  } else {
    e.frobenius_rel = diff2 > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
  }
  return e;
}

}  // namespace quaff
