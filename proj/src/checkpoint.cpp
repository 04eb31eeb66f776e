// SPDX-License-Identifier: Apache-2.0
#include "quaff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "quaff/error.hpp"

namespace quaff {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::F32:
    case DType::I32:
    case DType::U32: return 4;
    case DType::I8: return 1;
    case DType::U64: return 8;
  }
  throw DataError("unknown checkpoint dtype");
}

template <typename T>
std::vector<std::byte> to_bytes(const T* data, std::size_t n) {
  std::vector<std::byte> out(n * sizeof(T));
  if (n) std::memcpy(out.data(), data, out.size());
  return out;
}

template <typename T>
std::vector<T> from_bytes(const TensorRecord& r) {
  std::vector<T> out(r.bytes.size() / sizeof(T));
  if (!out.empty()) std::memcpy(out.data(), r.bytes.data(), r.bytes.size());
  return out;
}

std::uint64_t element_count(const std::vector<std::uint64_t>& shape) {
  std::uint64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

}  // namespace

void TensorTable::add(TensorRecord rec) {
  if (contains(rec.name)) throw DataError("duplicate tensor name " + rec.name);
  records_.push_back(std::move(rec));
}

void TensorTable::put_f32(const std::string& name, const Matrix& m) {
  add({name, DType::F32, {m.rows, m.cols}, to_bytes(m.data.data(), m.data.size())});
}

void TensorTable::put_f32(const std::string& name, const std::vector<float>& v) {
  add({name, DType::F32, {v.size()}, to_bytes(v.data(), v.size())});
}

void TensorTable::put_i8(const std::string& name, const IntMatrix& m) {
  add({name, DType::I8, {m.rows, m.cols}, to_bytes(m.data.data(), m.data.size())});
}

void TensorTable::put_u32(const std::string& name, const std::vector<std::uint32_t>& v) {
  add({name, DType::U32, {v.size()}, to_bytes(v.data(), v.size())});
}

void TensorTable::put_u64(const std::string& name, const std::vector<std::uint64_t>& v) {
  add({name, DType::U64, {v.size()}, to_bytes(v.data(), v.size())});
}

bool TensorTable::contains(std::string_view name) const {
  for (const auto& r : records_) {
    if (r.name == name) return true;
  }
  return false;
}

const TensorRecord& TensorTable::find(const std::string& name, DType dtype) const {
  for (const auto& r : records_) {
    if (r.name != name) continue;
    if (r.dtype != dtype) throw DataError("tensor " + name + " has unexpected dtype");
    return r;
  }
  throw DataError("checkpoint is missing tensor " + name);
}

namespace {

void expect_shape(const TensorRecord& r, std::vector<std::uint64_t> want) {
  if (r.shape != want) {
    std::string got, exp;
    for (auto d : r.shape) got += (got.empty() ? "" : "x") + std::to_string(d);
    for (auto d : want) exp += (exp.empty() ? "" : "x") + std::to_string(d);
    throw DataError("tensor " + r.name + " has shape " + got + ", expected " + exp);
  }
}

}  // namespace

Matrix TensorTable::get_matrix(const std::string& name, std::size_t rows, std::size_t cols) const {
  const auto& r = find(name, DType::F32);
  expect_shape(r, {rows, cols});
  Matrix m;
  m.rows = rows;
  m.cols = cols;
  m.data = from_bytes<float>(r);
  return m;
}

Matrix TensorTable::get_matrix(const std::string& name) const {
  const auto& r = find(name, DType::F32);
  if (r.shape.size() != 2) throw DataError("tensor " + name + " is not a matrix");
  return get_matrix(name, r.shape[0], r.shape[1]);
}

std::vector<float> TensorTable::get_f32(const std::string& name, std::size_t expected_len) const {
  const auto& r = find(name, DType::F32);
  expect_shape(r, {expected_len});
  return from_bytes<float>(r);
}

std::vector<float> TensorTable::get_f32(const std::string& name) const {
  return from_bytes<float>(find(name, DType::F32));
}

IntMatrix TensorTable::get_i8(const std::string& name, std::size_t rows, std::size_t cols) const {
  const auto& r = find(name, DType::I8);
  expect_shape(r, {rows, cols});
  IntMatrix m;
  m.rows = rows;
  m.cols = cols;
  m.data = from_bytes<std::int8_t>(r);
  return m;
}

std::vector<std::uint32_t> TensorTable::get_u32(const std::string& name) const {
  return from_bytes<std::uint32_t>(find(name, DType::U32));
}

std::vector<std::uint64_t> TensorTable::get_u64(const std::string& name) const {
  return from_bytes<std::uint64_t>(find(name, DType::U64));
}

namespace {

class Writer {
 public:
  template <typename T>
  void put(T v) {
    auto p = reinterpret_cast<const std::byte*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
  }
  void put_bytes(std::span<const std::byte> b) { out.insert(out.end(), b.begin(), b.end()); }
  std::vector<std::byte> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::byte> b) : bytes_(b) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::span<const std::byte> take(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t size() const { return bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw DataError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::span<const std::byte> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::byte> encode_checkpoint(const TensorTable& table) {
  Writer w;
  w.put_bytes(std::as_bytes(std::span(kCheckpointMagic.data(), kCheckpointMagic.size())));
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(table.records().size()));
  std::uint64_t offset = 0;
  for (const auto& r : table.records()) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.name.size()));
    w.put_bytes(std::as_bytes(std::span(r.name.data(), r.name.size())));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(r.dtype));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) w.put<std::uint64_t>(d);
    w.put<std::uint64_t>(offset);
    w.put<std::uint64_t>(r.bytes.size());
    offset += r.bytes.size();
  }
  for (const auto& r : table.records()) w.put_bytes(r.bytes);
  return std::move(w.out);
}

TensorTable decode_checkpoint(std::span<const std::byte> bytes) {
  Reader in(bytes);
  auto magic = in.take(kCheckpointMagic.size());
  if (std::memcmp(magic.data(), kCheckpointMagic.data(), kCheckpointMagic.size()) != 0) {
    throw DataError("bad checkpoint magic");
  }
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = in.get<std::uint32_t>();
  struct Entry {
    TensorRecord rec;
    std::uint64_t offset, nbytes;
  };
  std::vector<Entry> entries;
  for (std::uint32_t k = 0; k < count; ++k) {
    Entry e;
    const auto len = in.get<std::uint32_t>();
    auto name = in.take(len);
    e.rec.name.assign(reinterpret_cast<const char*>(name.data()), name.size());
    const auto dt = in.get<std::uint8_t>();
    if (dt > static_cast<std::uint8_t>(DType::U64)) throw DataError("unknown dtype in tensor " + e.rec.name);
    e.rec.dtype = static_cast<DType>(dt);
    const auto ndim = in.get<std::uint32_t>();
    if (ndim > 8) throw DataError("tensor " + e.rec.name + " has implausible rank");
    for (std::uint32_t d = 0; d < ndim; ++d) e.rec.shape.push_back(in.get<std::uint64_t>());
    e.offset = in.get<std::uint64_t>();
    e.nbytes = in.get<std::uint64_t>();
    if (e.nbytes != element_count(e.rec.shape) * dtype_size(e.rec.dtype)) {
      throw DataError("tensor " + e.rec.name + " byte size does not match its shape");
    }
    entries.push_back(std::move(e));
  }
  const std::size_t payload = in.pos();
  TensorTable table;
  for (auto& e : entries) {
    if (payload + e.offset + e.nbytes > bytes.size()) throw DataError("checkpoint truncated in tensor " + e.rec.name);
    auto b = bytes.subspan(payload + e.offset, e.nbytes);
    e.rec.bytes.assign(b.begin(), b.end());
    table.add(std::move(e.rec));
  }
  return table;
}

void write_checkpoint(const std::string& path, const TensorTable& table) {
  auto bytes = encode_checkpoint(table);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write checkpoint " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("failed writing checkpoint " + path);
}

TensorTable read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read checkpoint " + path);
  std::vector<char> raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(std::as_bytes(std::span(raw.data(), raw.size())));
}

}  // namespace quaff
