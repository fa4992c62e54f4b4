// SPDX-License-Identifier: Apache-2.0
#pragma once

// Fixed-point formats, symmetric per-tensor int8 quantization and the
// 32b->8b requantization unit.
//
// Conventions (used bit-exactly throughout the simulator):
//   real_value = scale * code, zero point is always 0
//   rounding is round-half-to-even everywhere
//   out-of-range results saturate

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cimsim {

using Shape = std::vector<std::size_t>;

std::size_t element_count(const Shape &shape);
std::string shape_string(const Shape &shape);

struct QuantTensor {
  std::vector<std::int8_t> codes;
  Shape shape;
  double scale = 1.0;

  QuantTensor() = default;
  QuantTensor(Shape s, double sc);
  QuantTensor(Shape s, std::vector<std::int8_t> c, double sc);

  std::size_t rows() const { return shape.at(0); }
  std::size_t cols() const { return shape.size() > 1 ? shape[1] : 1; }
  std::int8_t at(std::size_t r, std::size_t c) const { return codes[r * cols() + c]; }
  std::int8_t &at(std::size_t r, std::size_t c) { return codes[r * cols() + c]; }
  std::span<const std::int8_t> row(std::size_t r) const {
    return std::span<const std::int8_t>(codes).subspan(r * cols(), cols());
  }
};

struct AccTensor {
  std::vector<std::int32_t> values;
  Shape shape;
  double scale = 1.0;

  AccTensor() = default;
  AccTensor(Shape s, double sc);

  std::size_t rows() const { return shape.at(0); }
  std::size_t cols() const { return shape.size() > 1 ? shape[1] : 1; }
  std::int32_t at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }
  std::int32_t &at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
};

struct RealTensor {
  std::vector<double> values;
  Shape shape;
};

// Q<integer_bits>.<fraction_bits>. Signed formats carry an extra sign bit,
// so the representable range is [-2^i, 2^i - 2^-f] (signed) or
// [0, 2^i - 2^-f] (unsigned).
struct FxpFormat {
  int integer_bits = 0;
  int fraction_bits = 0;
  bool is_signed = true;

  int width() const { return integer_bits + fraction_bits + (is_signed ? 1 : 0); }
  std::int64_t max_raw() const;
  std::int64_t min_raw() const;
  double lsb() const;
  double max_value() const { return static_cast<double>(max_raw()) * lsb(); }
  double min_value() const { return static_cast<double>(min_raw()) * lsb(); }
  void validate() const;
  std::string to_string() const;

  friend bool operator==(const FxpFormat &, const FxpFormat &) = default;
};

struct Fixed {
  std::int64_t raw = 0;
  FxpFormat format;

  double to_double() const;
  // Nearest representable value (half-to-even), saturated.
  static Fixed from_double(double value, const FxpFormat &format);
};

// Scalar helpers shared by the simulator's datapaths.
double round_half_even(double x);
std::int64_t round_half_even_to_int(double x);
// round_half_even(num / 2^shift) computed exactly; negative shift multiplies.
std::int64_t shift_round_half_even(__int128 num, int shift);
// round_half_even(num / den) computed exactly, den > 0.
std::int64_t div_round_half_even(__int128 num, __int128 den);
std::int64_t saturate(std::int64_t v, std::int64_t lo, std::int64_t hi);
std::int8_t saturate_int8(std::int64_t v);

// Symmetric quantization. With no explicit scale the scale is
// max_abs(x) / (2^(bits-1) - 1); an all-zero input gets scale 1.
// Throws std::invalid_argument on non-finite input or unsupported bits.
QuantTensor quantize(std::span<const double> x, const Shape &shape, int bits = 8,
                     std::optional<double> scale = std::nullopt);

std::vector<double> dequantize(const QuantTensor &q);

// The 32b->8b quantization unit.
QuantTensor requantize_32_to_8(const AccTensor &acc, double out_scale);
std::int8_t requantize_value(std::int32_t value, double ratio);

// Exact product rounded (half-to-even) and saturated to `out`.
Fixed fxp_mul(const Fixed &a, const Fixed &b, const FxpFormat &out);

} // namespace cimsim
