// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "quaff/tensor.hpp"

namespace quaff {

// Binary checkpoint layout, all integers little-endian:
//   "QUAFFCKPT"            9-byte magic
//   u32 version            kCheckpointVersion
//   u32 tensor_count
//   tensor_count x {
//     u32 name_len, name bytes (UTF-8)
//     u8  dtype               DType value
//     u32 ndim, u64 dims[ndim]
//     u64 offset              byte offset from the start of the payload area
//     u64 nbytes
//   }
//   payload area: raw little-endian tensor data in table order, no padding
inline constexpr std::string_view kCheckpointMagic = "QUAFFCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { F32 = 0, I8 = 1, I32 = 2, U32 = 3, U64 = 4 };

struct TensorRecord {
  std::string name;
  DType dtype = DType::F32;
  std::vector<std::uint64_t> shape;
  std::vector<std::byte> bytes;
};

// Ordered name -> tensor map. Insertion order is the on-disk order.
class TensorTable {
 public:
  void put_f32(const std::string& name, const Matrix& m);
  void put_f32(const std::string& name, const std::vector<float>& v);
  void put_i8(const std::string& name, const IntMatrix& m);
  void put_u32(const std::string& name, const std::vector<std::uint32_t>& v);
  void put_u64(const std::string& name, const std::vector<std::uint64_t>& v);

  bool contains(std::string_view name) const;
  // Getters throw DataError on a missing name, wrong dtype or (when given) wrong shape.
  Matrix get_matrix(const std::string& name, std::size_t rows, std::size_t cols) const;
  Matrix get_matrix(const std::string& name) const;
  std::vector<float> get_f32(const std::string& name, std::size_t expected_len) const;
  std::vector<float> get_f32(const std::string& name) const;
  IntMatrix get_i8(const std::string& name, std::size_t rows, std::size_t cols) const;
  std::vector<std::uint32_t> get_u32(const std::string& name) const;
  std::vector<std::uint64_t> get_u64(const std::string& name) const;

  const std::vector<TensorRecord>& records() const { return records_; }
  void add(TensorRecord rec);

 private:
  const TensorRecord& find(const std::string& name, DType dtype) const;
  std::vector<TensorRecord> records_;
};

std::vector<std::byte> encode_checkpoint(const TensorTable& table);
// Throws DataError on bad magic, unsupported version or truncation.
TensorTable decode_checkpoint(std::span<const std::byte> bytes);

void write_checkpoint(const std::string& path, const TensorTable& table);
TensorTable read_checkpoint(const std::string& path);

}  // namespace quaff
