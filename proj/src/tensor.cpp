// SPDX-License-Identifier: Apache-2.0
#include "quaff/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "quaff/error.hpp"
#include "quaff/parallel.hpp"

namespace quaff {

Matrix make_matrix(std::size_t rows, std::size_t cols, std::vector<float> values) {
  if (values.size() != rows * cols) {
    throw DataError("matrix " + std::to_string(rows) + "x" + std::to_string(cols) + " needs " +
                    std::to_string(rows * cols) + " values, got " + std::to_string(values.size()));
  }
  Matrix m;
  m.rows = rows;
  m.cols = cols;
  m.data = std::move(values);
  if (!all_finite(m)) throw DataError("matrix contains non-finite values");
  return m;
}

Matrix make_matrix(std::initializer_list<std::initializer_list<float>> rows) {
  std::size_t r = rows.size();
  std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<float> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DataError("ragged matrix literal");
    values.insert(values.end(), row.begin(), row.end());
  }
  return make_matrix(r, c, std::move(values));
}

bool all_finite(const Matrix& m) {
  return std::all_of(m.data.begin(), m.data.end(), [](float v) { return std::isfinite(v); });
}

ChannelIndexSet::ChannelIndexSet(std::vector<std::uint32_t> indices, std::size_t limit)
    : indices_(std::move(indices)) {
  for (std::size_t k = 0; k < indices_.size(); ++k) {
    if (indices_[k] >= limit) {
      throw DataError("channel index " + std::to_string(indices_[k]) + " out of range [0, " +
                      std::to_string(limit) + ")");
    }
    if (k > 0 && indices_[k] <= indices_[k - 1]) throw DataError("channel indices must be strictly increasing");
  }
}

ChannelIndexSet ChannelIndexSet::from_unsorted(std::vector<std::uint32_t> indices, std::size_t limit) {
  std::sort(indices.begin(), indices.end());
  indices.erase(std::unique(indices.begin(), indices.end()), indices.end());
  return ChannelIndexSet(std::move(indices), limit);
}

ChannelIndexSet ChannelIndexSet::all(std::size_t n) {
  std::vector<std::uint32_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = static_cast<std::uint32_t>(i);
  return ChannelIndexSet(std::move(idx), n);
}

bool ChannelIndexSet::contains(std::uint32_t i) const {
  return std::binary_search(indices_.begin(), indices_.end(), i);
}

namespace {

void check_inner(std::size_t a_cols, std::size_t b_rows, const std::string& a_shape, const std::string& b_shape) {
  if (a_cols != b_rows) throw DataError("matmul shape mismatch: " + a_shape + " * " + b_shape);
}

}  // namespace

Matrix matmul_f32(const Matrix& a, const Matrix& b) {
  check_inner(a.cols, b.rows, a.shape(), b.shape());
  Matrix out(a.rows, b.cols);
  const std::size_t k = a.cols, n = b.cols;
  parallel_for(a.rows, a.rows * k * n, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      float* __restrict o = out.data.data() + i * n;
      const float* ar = a.data.data() + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const float av = ar[p];
        if (av == 0.0f) continue;
        const float* __restrict br = b.data.data() + p * n;
        for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
      }
    }
  });
  return out;
}

Matrix matmul_f32_bt(const Matrix& a, const Matrix& b) {
  check_inner(a.cols, b.cols, a.shape(), b.shape() + "^T");
  return matmul_f32(a, transpose(b));
}

Matrix matmul_f32_at(const Matrix& a, const Matrix& b) {
  check_inner(a.rows, b.rows, a.shape() + "^T", b.shape());
  return matmul_f32(transpose(a), b);
}

Int32Matrix matmul_i8_acc32(const IntMatrix& a, const IntMatrix& b) {
  check_inner(a.cols, b.rows, a.shape(), b.shape());
  if (a.cols > kMaxInt8InnerDim) {
    throw NumericalError("int8 matmul inner dimension " + std::to_string(a.cols) +
                         " exceeds the 32-bit accumulator guard " + std::to_string(kMaxInt8InnerDim));
  }
  Int32Matrix out(a.rows, b.cols);
  const std::size_t k = a.cols, n = b.cols;
  parallel_for(a.rows, a.rows * k * n, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      std::int32_t* __restrict o = out.data.data() + i * n;
      const std::int8_t* ar = a.data.data() + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const std::int32_t av = ar[p];
        if (av == 0) continue;
        const std::int8_t* __restrict br = b.data.data() + p * n;
        for (std::size_t j = 0; j < n; ++j) o[j] += av * static_cast<std::int32_t>(br[j]);
      }
    }
  });
  return out;
}

template <typename T>
BasicMatrix<T> select_columns(const BasicMatrix<T>& x, const ChannelIndexSet& cols) {
  if (!cols.empty() && cols.indices().back() >= x.cols) {
    throw DataError("column index " + std::to_string(cols.indices().back()) + " out of range for " + x.shape());
  }
  BasicMatrix<T> out(x.rows, cols.size());
  for (std::size_t i = 0; i < x.rows; ++i) {
    for (std::size_t j = 0; j < cols.size(); ++j) out(i, j) = x(i, cols[j]);
  }
  return out;
}

template <typename T>
BasicMatrix<T> select_rows(const BasicMatrix<T>& x, const ChannelIndexSet& rows) {
  if (!rows.empty() && rows.indices().back() >= x.rows) {
    throw DataError("row index " + std::to_string(rows.indices().back()) + " out of range for " + x.shape());
  }
  BasicMatrix<T> out(rows.size(), x.cols);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    std::copy_n(x.row(rows[k]).begin(), x.cols, out.row(k).begin());
  }
  return out;
}

template Matrix select_columns(const Matrix&, const ChannelIndexSet&);
template IntMatrix select_columns(const IntMatrix&, const ChannelIndexSet&);
template Matrix select_rows(const Matrix&, const ChannelIndexSet&);
template IntMatrix select_rows(const IntMatrix&, const ChannelIndexSet&);

Matrix scale_columns(const Matrix& x, std::span<const float> s, ScaleMode mode) {
  if (s.size() != x.cols) {
    throw DataError("scale vector length " + std::to_string(s.size()) + " does not match " + x.shape());
  }
  if (mode == ScaleMode::Divide) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (!(s[j] > 0.0f)) throw DataError("divide-mode scale " + std::to_string(j) + " is not positive");
    }
  }
  Matrix out = x;
  for (std::size_t i = 0; i < x.rows; ++i) {
    float* o = out.data.data() + i * x.cols;
    if (mode == ScaleMode::Multiply) {
      for (std::size_t j = 0; j < x.cols; ++j) o[j] *= s[j];
    } else {
      for (std::size_t j = 0; j < x.cols; ++j) o[j] /= s[j];
    }
  }
  return out;
}

Matrix scale_rows(const Matrix& x, std::span<const float> s) {
  if (s.size() != x.rows) {
    throw DataError("row scale length " + std::to_string(s.size()) + " does not match " + x.shape());
  }
  Matrix out = x;
  for (std::size_t i = 0; i < x.rows; ++i) {
    for (float& v : out.row(i)) v *= s[i];
  }
  return out;
}

namespace {

void require_non_empty(const Matrix& x, const char* what) {
  if (x.empty()) throw DataError(std::string(what) + " of an empty matrix");
}

}  // namespace

std::vector<float> row_abs_max(const Matrix& x) {
  require_non_empty(x, "row_abs_max");
  std::vector<float> out(x.rows, 0.0f);
  for (std::size_t i = 0; i < x.rows; ++i) {
    for (float v : x.row(i)) out[i] = std::max(out[i], std::fabs(v));
  }
  return out;
}

std::vector<float> col_abs_max(const Matrix& x) {
  require_non_empty(x, "col_abs_max");
  std::vector<float> out(x.cols, 0.0f);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const float* r = x.data.data() + i * x.cols;
    for (std::size_t j = 0; j < x.cols; ++j) out[j] = std::max(out[j], std::fabs(r[j]));
  }
  return out;
}

float abs_mean(const Matrix& x) {
  require_non_empty(x, "abs_mean");
  double sum = 0.0;
  for (float v : x.data) sum += std::fabs(v);
  return static_cast<float>(sum / static_cast<double>(x.size()));
}

float global_abs_max(const Matrix& x) {
  require_non_empty(x, "global_abs_max");
  float m = 0.0f;
  for (float v : x.data) m = std::max(m, std::fabs(v));
  return m;
}

Matrix transpose(const Matrix& x) {
  Matrix out(x.cols, x.rows);
  for (std::size_t i = 0; i < x.rows; ++i) {
    for (std::size_t j = 0; j < x.cols; ++j) out(j, i) = x(i, j);
  }
  return out;
}

void add_inplace(Matrix& dst, const Matrix& src) {
  if (dst.rows != src.rows || dst.cols != src.cols) {
    throw DataError("add shape mismatch: " + dst.shape() + " + " + src.shape());
  }
  for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

double frobenius_norm(const Matrix& x) {
  double s = 0.0;
  for (float v : x.data) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

}  // namespace quaff
