// SPDX-License-Identifier: Apache-2.0
#pragma once

// "CIMT" binary tensor container.
//
//   offset  field
//   0       magic "CIMT"
//   4       version u8   (1 = plain tensor, 2 = tensor with header extension)
//   5       dtype u8     (0 = int8, 1 = int32, 2 = float64)
//   6       rank u8
//   7       dims, rank x u32 little-endian
//   ..      scale, IEEE-754 float64 little-endian
//   ..      [version 2 only] extension length u16 LE, extension bytes
//   ..      payload, row-major, little-endian elements
//
// Extensions start with a kind byte (see ExtensionKind); their layouts are
// owned by the module that writes them.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cimsim/fxp.hpp"

namespace cimsim {

enum class DType : std::uint8_t { Int8 = 0, Int32 = 1, Float64 = 2 };

enum class ExtensionKind : std::uint8_t { ExpLut = 1, RecipLut = 2, WeightImage = 3 };

struct TensorBlob {
  DType dtype = DType::Int8;
  std::vector<std::uint32_t> dims;
  double scale = 1.0;
  std::vector<std::uint8_t> extension; // empty => version 1
  std::vector<std::uint8_t> payload;
};

std::size_t dtype_size(DType t);

std::vector<std::uint8_t> encode_tensor(const TensorBlob &blob);
// Throws SimError on malformed input (bad magic, truncated, size mismatch).
TensorBlob decode_tensor(std::span<const std::uint8_t> bytes);

TensorBlob to_blob(const QuantTensor &t);
TensorBlob to_blob(const AccTensor &t);
TensorBlob to_blob(const RealTensor &t);
QuantTensor quant_from_blob(const TensorBlob &b);
AccTensor acc_from_blob(const TensorBlob &b);
RealTensor real_from_blob(const TensorBlob &b);

void write_bytes(const std::filesystem::path &path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_bytes(const std::filesystem::path &path);

void write_tensor(const std::filesystem::path &path, const QuantTensor &t);
void write_tensor(const std::filesystem::path &path, const AccTensor &t);
void write_tensor(const std::filesystem::path &path, const RealTensor &t);
QuantTensor read_quant_tensor(const std::filesystem::path &path);
AccTensor read_acc_tensor(const std::filesystem::path &path);
RealTensor read_real_tensor(const std::filesystem::path &path);

// Little-endian field packing for headers and extensions.
class ByteWriter {
public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void i8(std::int8_t v) { bytes_.push_back(static_cast<std::uint8_t>(v)); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void u64(std::uint64_t v);
  void f64(double v);
  void raw(std::span<const std::uint8_t> b) { bytes_.insert(bytes_.end(), b.begin(), b.end()); }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }
  const std::vector<std::uint8_t> &bytes() const { return bytes_; }

private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
public:
  explicit ByteReader(std::span<const std::uint8_t> b) : bytes_(b) {}
  std::uint8_t u8();
  std::int8_t i8() { return static_cast<std::int8_t>(u8()); }
  std::uint16_t u16();
  std::uint32_t u32();
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  std::uint64_t u64();
  double f64();
  std::span<const std::uint8_t> take(std::size_t n);
  std::size_t remaining() const { return bytes_.size() - pos_; }

private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

} // namespace cimsim
