// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace quaff {

// Dense row-major 2-D array. rows x cols, data.size() == rows * cols.
template <typename T>
struct BasicMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  BasicMatrix() = default;
  BasicMatrix(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const T> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  std::string shape() const { return std::to_string(rows) + "x" + std::to_string(cols); }

  bool operator==(const BasicMatrix&) const = default;
};

using Matrix = BasicMatrix<float>;
using IntMatrix = BasicMatrix<std::int8_t>;
using Int32Matrix = BasicMatrix<std::int32_t>;

// Builds a float matrix from external values; rejects NaN/Inf and size mismatches.
Matrix make_matrix(std::size_t rows, std::size_t cols, std::vector<float> values);
Matrix make_matrix(std::initializer_list<std::initializer_list<float>> rows);

bool all_finite(const Matrix& m);

// Strictly increasing channel positions, all below the channel count they were built for.
class ChannelIndexSet {
 public:
  ChannelIndexSet() = default;
  // Throws DataError unless `indices` is strictly increasing and every entry < limit.
  ChannelIndexSet(std::vector<std::uint32_t> indices, std::size_t limit);
  // Sorts and de-duplicates first.
  static ChannelIndexSet from_unsorted(std::vector<std::uint32_t> indices, std::size_t limit);
  static ChannelIndexSet all(std::size_t n);

  std::span<const std::uint32_t> indices() const { return indices_; }
  std::size_t size() const { return indices_.size(); }
  bool empty() const { return indices_.empty(); }
  bool contains(std::uint32_t i) const;
  std::uint32_t operator[](std::size_t k) const { return indices_[k]; }
  auto begin() const { return indices_.begin(); }
  auto end() const { return indices_.end(); }

  bool operator==(const ChannelIndexSet&) const = default;

 private:
  std::vector<std::uint32_t> indices_;
};

// Largest inner dimension matmul_i8_acc32 accepts: k * 127 * 127 stays below 2^31.
inline constexpr std::size_t kMaxInt8InnerDim = std::size_t{1} << 16;

Matrix matmul_f32(const Matrix& a, const Matrix& b);
// a * b^T, used by backward passes.
Matrix matmul_f32_bt(const Matrix& a, const Matrix& b);
// a^T * b.
Matrix matmul_f32_at(const Matrix& a, const Matrix& b);

Int32Matrix matmul_i8_acc32(const IntMatrix& a, const IntMatrix& b);

template <typename T>
BasicMatrix<T> select_columns(const BasicMatrix<T>& x, const ChannelIndexSet& cols);
// Rows of x picked by `rows` (the W_O extraction).
template <typename T>
BasicMatrix<T> select_rows(const BasicMatrix<T>& x, const ChannelIndexSet& rows);

enum class ScaleMode { Multiply, Divide };
// out(i, j) = x(i, j) * s[j] or x(i, j) / s[j].
Matrix scale_columns(const Matrix& x, std::span<const float> s, ScaleMode mode);
// out(i, j) = x(i, j) * s[i].
Matrix scale_rows(const Matrix& x, std::span<const float> s);

std::vector<float> row_abs_max(const Matrix& x);
std::vector<float> col_abs_max(const Matrix& x);
float abs_mean(const Matrix& x);
float global_abs_max(const Matrix& x);

Matrix transpose(const Matrix& x);
void add_inplace(Matrix& dst, const Matrix& src);
double frobenius_norm(const Matrix& x);

}  // namespace quaff
