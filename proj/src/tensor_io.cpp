// SPDX-License-Identifier: Apache-2.0
#include "cimsim/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cimsim/error.hpp"

namespace cimsim {

namespace {

constexpr std::uint8_t kMagic[4] = {'C', 'I', 'M', 'T'};

} // namespace

void ByteWriter::u16(std::uint16_t v) {
  for (int i = 0; i < 2; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

std::span<const std::uint8_t> ByteReader::take(std::size_t n) {
  if (remaining() < n) throw SimError("CIMT: truncated input");
  auto s = bytes_.subspan(pos_, n);
  pos_ += n;
  return s;
}
std::uint8_t ByteReader::u8() { return take(1)[0]; }
std::uint16_t ByteReader::u16() {
  auto s = take(2);
  return static_cast<std::uint16_t>(s[0] | (s[1] << 8));
}
std::uint32_t ByteReader::u32() {
  auto s = take(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(s[i]) << (8 * i);
  return v;
}
std::uint64_t ByteReader::u64() {
  auto s = take(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(s[i]) << (8 * i);
  return v;
}
double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::size_t dtype_size(DType t) {
  switch (t) {
  case DType::Int8: return 1;
  case DType::Int32: return 4;
  case DType::Float64: return 8;
  }
  throw SimError("CIMT: unknown dtype");
}

std::vector<std::uint8_t> encode_tensor(const TensorBlob &blob) {
  if (blob.dims.size() > 255) throw SimError("CIMT: rank exceeds 255");
  if (blob.extension.size() > 0xFFFF) throw SimError("CIMT: extension exceeds 65535 bytes");
  std::size_t count = 1;
  for (auto d : blob.dims) count *= d;
  if (blob.payload.size() != count * dtype_size(blob.dtype))
    throw SimError("CIMT: payload size does not match dims");

  ByteWriter w;
  w.raw(kMagic);
  w.u8(blob.extension.empty() ? 1 : 2);
  w.u8(static_cast<std::uint8_t>(blob.dtype));
  w.u8(static_cast<std::uint8_t>(blob.dims.size()));
  for (auto d : blob.dims) w.u32(d);
  w.f64(blob.scale);
  if (!blob.extension.empty()) {
    w.u16(static_cast<std::uint16_t>(blob.extension.size()));
    w.raw(blob.extension);
  }
  w.raw(blob.payload);
  return w.take();
}

TensorBlob decode_tensor(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  auto magic = r.take(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw SimError("CIMT: bad magic");
  const std::uint8_t version = r.u8();
  if (version != 1 && version != 2) throw SimError("CIMT: unsupported version " + std::to_string(version));
  TensorBlob b;
  const std::uint8_t dtype = r.u8();
  if (dtype > 2) throw SimError("CIMT: unknown dtype " + std::to_string(dtype));
  b.dtype = static_cast<DType>(dtype);
  const std::uint8_t rank = r.u8();
  std::size_t count = 1;
  for (int i = 0; i < rank; ++i) {
    b.dims.push_back(r.u32());
    count *= b.dims.back();
  }
  b.scale = r.f64();
  if (version == 2) {
    const std::uint16_t n = r.u16();
    auto ext = r.take(n);
    b.extension.assign(ext.begin(), ext.end());
  }
  const std::size_t nbytes = count * dtype_size(b.dtype);
  if (r.remaining() != nbytes)
    throw SimError("CIMT: payload is " + std::to_string(r.remaining()) + " bytes, expected " +
                   std::to_string(nbytes));
  auto p = r.take(nbytes);
  b.payload.assign(p.begin(), p.end());
  return b;
}

namespace {

std::vector<std::uint32_t> dims_of(const Shape &s) {
  std::vector<std::uint32_t> d;
  for (auto x : s) d.push_back(static_cast<std::uint32_t>(x));
  return d;
}

Shape shape_of(const std::vector<std::uint32_t> &d) { return Shape(d.begin(), d.end()); }

void expect_dtype(const TensorBlob &b, DType t) {
  if (b.dtype != t)
    throw SimError("CIMT: dtype " + std::to_string(static_cast<int>(b.dtype)) + " where " +
                   std::to_string(static_cast<int>(t)) + " was expected");
}

} // namespace

TensorBlob to_blob(const QuantTensor &t) {
  TensorBlob b{DType::Int8, dims_of(t.shape), t.scale, {}, {}};
  b.payload.resize(t.codes.size());
  std::memcpy(b.payload.data(), t.codes.data(), t.codes.size());
  return b;
}

TensorBlob to_blob(const AccTensor &t) {
  TensorBlob b{DType::Int32, dims_of(t.shape), t.scale, {}, {}};
  ByteWriter w;
  for (auto v : t.values) w.i32(v);
  b.payload = w.take();
  return b;
}

TensorBlob to_blob(const RealTensor &t) {
  TensorBlob b{DType::Float64, dims_of(t.shape), 1.0, {}, {}};
  ByteWriter w;
  for (auto v : t.values) w.f64(v);
  b.payload = w.take();
  return b;
}

QuantTensor quant_from_blob(const TensorBlob &b) {
  expect_dtype(b, DType::Int8);
  std::vector<std::int8_t> codes(b.payload.size());
  std::memcpy(codes.data(), b.payload.data(), codes.size());
  return QuantTensor(shape_of(b.dims), std::move(codes), b.scale);
}

AccTensor acc_from_blob(const TensorBlob &b) {
  expect_dtype(b, DType::Int32);
  AccTensor t(shape_of(b.dims), b.scale);
  ByteReader r(b.payload);
  for (auto &v : t.values) v = r.i32();
  return t;
}

RealTensor real_from_blob(const TensorBlob &b) {
  expect_dtype(b, DType::Float64);
  RealTensor t{std::vector<double>(b.payload.size() / 8), shape_of(b.dims)};
  ByteReader r(b.payload);
  for (auto &v : t.values) v = r.f64();
  return t;
}

void write_bytes(const std::filesystem::path &path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw SimError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw SimError("write failed: " + path.string());
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SimError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_tensor(const std::filesystem::path &path, const QuantTensor &t) { write_bytes(path, encode_tensor(to_blob(t))); }
void write_tensor(const std::filesystem::path &path, const AccTensor &t) { write_bytes(path, encode_tensor(to_blob(t))); }
void write_tensor(const std::filesystem::path &path, const RealTensor &t) { write_bytes(path, encode_tensor(to_blob(t))); }

QuantTensor read_quant_tensor(const std::filesystem::path &path) { return quant_from_blob(decode_tensor(read_bytes(path))); }
AccTensor read_acc_tensor(const std::filesystem::path &path) { return acc_from_blob(decode_tensor(read_bytes(path))); }
RealTensor read_real_tensor(const std::filesystem::path &path) { return real_from_blob(decode_tensor(read_bytes(path))); }

} // namespace cimsim
