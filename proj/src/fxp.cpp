// SPDX-License-Identifier: Apache-2.0
#include "cimsim/fxp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace cimsim {

std::size_t element_count(const Shape &shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape &shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

QuantTensor::QuantTensor(Shape s, double sc)
    : codes(element_count(s), 0), shape(std::move(s)), scale(sc) {}

QuantTensor::QuantTensor(Shape s, std::vector<std::int8_t> c, double sc)
    : codes(std::move(c)), shape(std::move(s)), scale(sc) {
  if (codes.size() != element_count(shape))
    throw std::invalid_argument("QuantTensor: payload size does not match shape " +
                                shape_string(shape));
}

AccTensor::AccTensor(Shape s, double sc)
    : values(element_count(s), 0), shape(std::move(s)), scale(sc) {}

// ---------------------------------------------------------------------------
// FxpFormat

std::int64_t FxpFormat::max_raw() const {
  const int magnitude_bits = integer_bits + fraction_bits;
  if (magnitude_bits >= 63) return std::numeric_limits<std::int64_t>::max();
  return (std::int64_t{1} << magnitude_bits) - 1;
}

std::int64_t FxpFormat::min_raw() const {
  if (!is_signed) return 0;
  const int magnitude_bits = integer_bits + fraction_bits;
  if (magnitude_bits >= 63) return std::numeric_limits<std::int64_t>::min();
  return -(std::int64_t{1} << magnitude_bits);
}

double FxpFormat::lsb() const { return std::ldexp(1.0, -fraction_bits); }

void FxpFormat::validate() const {
  if (integer_bits < 0 || fraction_bits < 0)
    throw std::invalid_argument("FxpFormat: negative bit count in " + to_string());
  if (width() < 1 || width() > 64)
    throw std::invalid_argument("FxpFormat: total width must be in [1, 64], got " +
                                std::to_string(width()));
}

std::string FxpFormat::to_string() const {
  return std::string(is_signed ? "Q" : "UQ") + std::to_string(integer_bits) + "." +
         std::to_string(fraction_bits);
}

double Fixed::to_double() const { return std::ldexp(static_cast<double>(raw), -format.fraction_bits); }

Fixed Fixed::from_double(double value, const FxpFormat &format) {
  if (!std::isfinite(value)) throw std::invalid_argument("Fixed::from_double: non-finite value");
  const double scaled = std::ldexp(value, format.fraction_bits);
  const double lo = static_cast<double>(format.min_raw());
  const double hi = static_cast<double>(format.max_raw());
  const double r = round_half_even(scaled);
  Fixed out;
  out.format = format;
  if (r <= lo)
    out.raw = format.min_raw();
  else if (r >= hi)
    out.raw = format.max_raw();
  else
    out.raw = static_cast<std::int64_t>(r);
  return out;
}

// ---------------------------------------------------------------------------
// Rounding

double round_half_even(double x) {
  if (!(std::fabs(x) < 4503599627370496.0)) return x; // >= 2^52 is integral (or NaN)
  const double lo = std::floor(x);
  const double diff = x - lo;
  if (diff > 0.5) return lo + 1.0;
  if (diff < 0.5) return lo;
  return std::fmod(lo, 2.0) == 0.0 ? lo : lo + 1.0;
}

std::int64_t round_half_even_to_int(double x) {
  const double r = round_half_even(x);
  if (r >= 9.2e18) return std::numeric_limits<std::int64_t>::max();
  if (r <= -9.2e18) return std::numeric_limits<std::int64_t>::min();
  return static_cast<std::int64_t>(r);
}

namespace {

std::int64_t clamp_to_int64(__int128 v) {
  constexpr __int128 hi = std::numeric_limits<std::int64_t>::max();
  constexpr __int128 lo = std::numeric_limits<std::int64_t>::min();
  if (v > hi) return std::numeric_limits<std::int64_t>::max();
  if (v < lo) return std::numeric_limits<std::int64_t>::min();
  return static_cast<std::int64_t>(v);
}

} // namespace

std::int64_t shift_round_half_even(__int128 num, int shift) {
  if (shift <= 0) {
    if (shift < -62) throw std::invalid_argument("shift_round_half_even: left shift too large");
    return clamp_to_int64(num * (__int128{1} << -shift));
  }
  if (shift > 120) return 0;
  const __int128 q = num >> shift; // arithmetic: floor division
  const __int128 rem = num - (q << shift);
  const __int128 half = __int128{1} << (shift - 1);
  __int128 r = q;
  if (rem > half || (rem == half && (q & 1) != 0)) r = q + 1;
  return clamp_to_int64(r);
}

std::int64_t div_round_half_even(__int128 num, __int128 den) {
  if (den <= 0) throw std::invalid_argument("div_round_half_even: denominator must be positive");
  __int128 q = num / den;
  __int128 rem = num % den;
  if (rem < 0) {
    q -= 1;
    rem += den;
  }
  const __int128 twice = 2 * rem;
  if (twice > den || (twice == den && (q & 1) != 0)) q += 1;
  return clamp_to_int64(q);
}

std::int64_t saturate(std::int64_t v, std::int64_t lo, std::int64_t hi) { return std::clamp(v, lo, hi); }

std::int8_t saturate_int8(std::int64_t v) { return static_cast<std::int8_t>(std::clamp<std::int64_t>(v, -128, 127)); }

// ---------------------------------------------------------------------------
// Quantization

QuantTensor quantize(std::span<const double> x, const Shape &shape, int bits, std::optional<double> scale) {
  if (bits != 4 && bits != 8) throw std::invalid_argument("quantize: bits must be 4 or 8");
  if (element_count(shape) != x.size())
    throw std::invalid_argument("quantize: " + std::to_string(x.size()) +
                                " values do not fit shape " + shape_string(shape));
  double max_abs = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i]))
      throw std::invalid_argument("quantize: non-finite input at flat index " + std::to_string(i));
    max_abs = std::max(max_abs, std::fabs(x[i]));
  }
  const std::int64_t qmax = (std::int64_t{1} << (bits - 1)) - 1;
  const std::int64_t qmin = -qmax - 1;

  QuantTensor out(shape, 1.0);
  if (scale) {
    if (!(*scale > 0.0) || !std::isfinite(*scale))
      throw std::invalid_argument("quantize: scale must be positive and finite");
    out.scale = *scale;
    for (std::size_t i = 0; i < x.size(); ++i)
      out.codes[i] = static_cast<std::int8_t>(saturate(round_half_even_to_int(x[i] / *scale), qmin, qmax));
    return out;
  }
  if (max_abs == 0.0) return out;
  out.scale = max_abs / static_cast<double>(qmax);
  // x * qmax / max_abs keeps exact ties exact (0.5 of max -> 63.5).
  for (std::size_t i = 0; i < x.size(); ++i)
    out.codes[i] = static_cast<std::int8_t>(
        saturate(round_half_even_to_int(x[i] * static_cast<double>(qmax) / max_abs), qmin, qmax));
  return out;
}

std::vector<double> dequantize(const QuantTensor &q) {
  std::vector<double> out(q.codes.size());
  for (std::size_t i = 0; i < q.codes.size(); ++i) out[i] = q.scale * q.codes[i];
  return out;
}

std::int8_t requantize_value(std::int32_t value, double ratio) {
  return saturate_int8(round_half_even_to_int(static_cast<double>(value) * ratio));
}

QuantTensor requantize_32_to_8(const AccTensor &acc, double out_scale) {
  if (!(out_scale > 0.0) || !std::isfinite(out_scale))
    throw std::invalid_argument("requantize_32_to_8: out_scale must be positive and finite");
  QuantTensor out(acc.shape, out_scale);
  const double ratio = acc.scale / out_scale;
  for (std::size_t i = 0; i < acc.values.size(); ++i) out.codes[i] = requantize_value(acc.values[i], ratio);
  return out;
}

Fixed fxp_mul(const Fixed &a, const Fixed &b, const FxpFormat &out) {
  out.validate();
  const __int128 product = static_cast<__int128>(a.raw) * static_cast<__int128>(b.raw);
  const int shift = a.format.fraction_bits + b.format.fraction_bits - out.fraction_bits;
  Fixed r;
  r.format = out;
  if (shift < 0) {
    // Widening the fraction is exact; saturate if it cannot fit.
    const __int128 limit = static_cast<__int128>(out.max_raw());
    const __int128 lower = static_cast<__int128>(out.min_raw());
    __int128 v = product;
    for (int i = 0; i < -shift; ++i) {
      v *= 2;
      if (v > limit) { r.raw = out.max_raw(); return r; }
      if (v < lower) { r.raw = out.min_raw(); return r; }
    }
    r.raw = static_cast<std::int64_t>(v);
    return r;
  }
  r.raw = saturate(shift_round_half_even(product, shift), out.min_raw(), out.max_raw());
  return r;
}

} // namespace cimsim
