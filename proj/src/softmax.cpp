// SPDX-License-Identifier: Apache-2.0
#include "cimsim/softmax.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <stdexcept>

#include "cimsim/error.hpp"

namespace cimsim {

namespace {

void require_row(std::span<const double> z, const char *who) {
  if (z.empty()) throw std::invalid_argument(std::string(who) + ": empty input");
  for (double v : z)
    if (!std::isfinite(v)) throw std::invalid_argument(std::string(who) + ": non-finite input");
}

void validate_entry_format(const LutEntryMode &mode, const char *who) {
  if (mode.is_exact()) return;
  mode.format.validate();
  if (mode.format.is_signed) throw std::invalid_argument(std::string(who) + ": entry format must be unsigned");
  if (mode.format.integer_bits < 1)
    throw std::invalid_argument(std::string(who) + ": entry format needs an integer bit to represent 1.0");
  if (mode.format.width() > 31)
    throw std::invalid_argument(std::string(who) + ": entry format wider than 31 bits");
}

void write_mode(ByteWriter &w, const LutEntryMode &mode) {
  w.u8(mode.is_exact() ? 0 : 1);
  w.u8(static_cast<std::uint8_t>(mode.format.integer_bits));
  w.u8(static_cast<std::uint8_t>(mode.format.fraction_bits));
  w.u8(mode.format.is_signed ? 1 : 0);
}

LutEntryMode read_mode(ByteReader &r) {
  LutEntryMode m;
  const auto kind = r.u8();
  if (kind > 1) throw SimError("LUT blob: unknown entry mode " + std::to_string(kind));
  m.kind = kind == 0 ? LutEntryMode::Kind::Exact : LutEntryMode::Kind::Fixed;
  m.format.integer_bits = r.u8();
  m.format.fraction_bits = r.u8();
  m.format.is_signed = r.u8() != 0;
  if (m.is_exact()) m.format = FxpFormat{1, 15, false};
  return m;
}

std::vector<double> f64_payload(const TensorBlob &b) {
  ByteReader r(b.payload);
  std::vector<double> out(b.payload.size() / 8);
  for (auto &v : out) v = r.f64();
  return out;
}

std::vector<std::int32_t> i32_payload(const TensorBlob &b) {
  ByteReader r(b.payload);
  std::vector<std::int32_t> out(b.payload.size() / 4);
  for (auto &v : out) v = r.i32();
  return out;
}

template <class It> std::vector<std::uint8_t> f64_bytes(It first, It last) {
  ByteWriter w;
  for (; first != last; ++first) w.f64(*first);
  return w.take();
}

template <class It> std::vector<std::uint8_t> i32_bytes(It first, It last) {
  ByteWriter w;
  for (; first != last; ++first) w.i32(static_cast<std::int32_t>(*first));
  return w.take();
}

// Term code of a fixed-point exponential: rhe(raw * 127 / 2^f).
std::int8_t term_code_from_raw(std::int64_t raw, int fraction_bits) {
  const auto c = shift_round_half_even(static_cast<__int128>(raw) * kTermFullScale, fraction_bits);
  return static_cast<std::int8_t>(saturate(c, 0, kTermFullScale));
}

// Denominator increment for one term: rhe(code * 2^fd / 127).
std::int64_t denominator_increment(std::int8_t code, int fraction_bits) {
  return div_round_half_even(static_cast<__int128>(code) << fraction_bits, kTermFullScale);
}

NumeratorTerm make_term(std::int8_t z, const ExpLut &lut) {
  NumeratorTerm t;
  if (lut.mode().is_exact()) {
    t.value = lut.value(z);
    t.code = static_cast<std::int8_t>(saturate(round_half_even_to_int(t.value * kTermFullScale), 0, kTermFullScale));
  } else {
    t.code = term_code_from_raw(lut.raw(z), lut.mode().format.fraction_bits);
    t.value = static_cast<double>(t.code) / kTermFullScale;
  }
  return t;
}

Normalizer fallback_normalizer(std::size_t count) {
  Normalizer m;
  m.fallback = true;
  m.count = count;
  m.value = 1.0 / static_cast<double>(count);
  return m;
}

Normalizer fixed_normalizer(std::int64_t denom_raw, int denom_fraction_bits, std::size_t count,
                            const RecipLut &recip) {
  if (denom_raw <= 0) return fallback_normalizer(count);
  Normalizer m;
  m.count = count;
  const int lead = 63 - std::countl_zero(static_cast<std::uint64_t>(denom_raw));
  const int k = recip.index_bits();
  const std::uint64_t below = static_cast<std::uint64_t>(denom_raw) - (std::uint64_t{1} << lead);
  const std::uint64_t t = lead >= k ? below >> (lead - k) : below << (k - lead);
  m.table_index = static_cast<std::size_t>(t);
  m.exponent = lead - denom_fraction_bits;
  if (recip.mode().is_exact()) {
    m.value = std::ldexp(recip.value(m.table_index), -m.exponent);
  } else {
    m.integer_path = true;
    m.recip_raw = recip.raw(m.table_index);
    m.recip_fraction_bits = recip.mode().format.fraction_bits;
    m.value = std::ldexp(static_cast<double>(m.recip_raw), -(m.recip_fraction_bits + m.exponent));
  }
  return m;
}

} // namespace

// ---------------------------------------------------------------------------
// references

std::vector<double> naive_softmax_ref(std::span<const double> z) {
  require_row(z, "naive_softmax_ref");
  std::vector<double> out(z.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) sum += out[i] = std::exp(z[i]);
  for (double &v : out) v /= sum;
  return out;
}

std::vector<double> safe_softmax_ref_counted(std::span<const double> z, std::size_t &input_reads) {
  require_row(z, "safe_softmax_ref");
  double zmax = z[0];
  for (double v : z) {
    ++input_reads;
    zmax = std::max(zmax, v);
  }
  double sum = 0.0;
  for (double v : z) {
    ++input_reads;
    sum += std::exp(v - zmax);
  }
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    ++input_reads;
    out[i] = std::exp(z[i] - zmax) / sum;
  }
  return out;
}

std::vector<double> safe_softmax_ref(std::span<const double> z) {
  std::size_t reads = 0;
  return safe_softmax_ref_counted(z, reads);
}

std::string LutEntryMode::to_string() const {
  return is_exact() ? "exact" : "fixed:" + format.to_string();
}

// ---------------------------------------------------------------------------
// ExpLut

ExpLut ExpLut::build(double input_scale, const LutEntryMode &mode, std::int8_t z_quant_max) {
  if (!(input_scale > 0.0) || !std::isfinite(input_scale))
    throw std::invalid_argument("build_exp_lut: input_scale must be positive and finite");
  validate_entry_format(mode, "build_exp_lut");
  ExpLut lut;
  lut.input_scale_ = input_scale;
  lut.z_quant_max_ = z_quant_max;
  lut.mode_ = mode;
  const int f = mode.format.fraction_bits;
  const std::int64_t one = std::int64_t{1} << f;
  bool any_nonzero_below = false;
  for (int i = -128; i <= 127; ++i) {
    // Codes above z_quant_max clamp to the 1.0 entry so every entry stays in (0, 1].
    const int offset = std::min(i - z_quant_max, 0);
    const double e = std::exp(input_scale * offset);
    const auto idx = index(static_cast<std::int8_t>(i));
    if (mode.is_exact()) {
      lut.values_[idx] = e;
      lut.raw_[idx] = 0;
      continue;
    }
    const std::int64_t raw = offset == 0 ? one : std::min(round_half_even_to_int(std::ldexp(e, f)), one);
    lut.raw_[idx] = raw;
    lut.values_[idx] = std::ldexp(static_cast<double>(raw), -f);
    if (offset < 0 && raw > 0) any_nonzero_below = true;
  }
  if (!mode.is_exact() && z_quant_max > -128 && !any_nonzero_below) {
    lut.degenerate_ = true;
    lut.warning_ = "exp LUT degenerate: every entry below z_quant_max rounds to 0 at input_scale " +
                   std::to_string(input_scale) + " with " + mode.format.to_string();
  }
  return lut;
}

TensorBlob ExpLut::to_blob() const {
  TensorBlob b;
  b.dims = {256};
  ByteWriter w;
  w.u8(static_cast<std::uint8_t>(ExtensionKind::ExpLut));
  w.f64(input_scale_);
  w.i8(z_quant_max_);
  write_mode(w, mode_);
  b.extension = w.take();
  if (mode_.is_exact()) {
    b.dtype = DType::Float64;
    b.scale = 1.0;
    b.payload = f64_bytes(values_.begin(), values_.end());
  } else {
    b.dtype = DType::Int32;
    b.scale = mode_.format.lsb();
    b.payload = i32_bytes(raw_.begin(), raw_.end());
  }
  return b;
}

ExpLut ExpLut::from_blob(const TensorBlob &blob) {
  if (blob.extension.empty() || blob.extension[0] != static_cast<std::uint8_t>(ExtensionKind::ExpLut))
    throw SimError("exp LUT blob: missing ExpLut header extension");
  if (blob.dims != std::vector<std::uint32_t>{256}) throw SimError("exp LUT blob: expected 256 entries");
  ByteReader r(blob.extension);
  r.u8();
  ExpLut lut;
  lut.input_scale_ = r.f64();
  lut.z_quant_max_ = r.i8();
  lut.mode_ = read_mode(r);
  if (lut.mode_.is_exact()) {
    if (blob.dtype != DType::Float64) throw SimError("exp LUT blob: Exact mode needs float64 entries");
    const auto v = f64_payload(blob);
    std::copy(v.begin(), v.end(), lut.values_.begin());
  } else {
    if (blob.dtype != DType::Int32) throw SimError("exp LUT blob: Fixed mode needs int32 entries");
    const auto v = i32_payload(blob);
    const int f = lut.mode_.format.fraction_bits;
    bool any_nonzero_below = false;
    for (std::size_t i = 0; i < 256; ++i) {
      lut.raw_[i] = v[i];
      lut.values_[i] = std::ldexp(static_cast<double>(v[i]), -f);
      if (static_cast<int>(i) - 128 < lut.z_quant_max_ && v[i] > 0) any_nonzero_below = true;
    }
    lut.degenerate_ = lut.z_quant_max_ > -128 && !any_nonzero_below;
    if (lut.degenerate_) lut.warning_ = "exp LUT degenerate: every entry below z_quant_max is 0";
  }
  return lut;
}

// ---------------------------------------------------------------------------
// RecipLut

RecipLut RecipLut::build(int index_bits, const LutEntryMode &mode) {
  if (index_bits < 4 || index_bits > 12)
    throw std::invalid_argument("build_recip_lut: index bits must be in [4, 12], got " + std::to_string(index_bits));
  validate_entry_format(mode, "build_recip_lut");
  RecipLut lut;
  lut.index_bits_ = index_bits;
  lut.mode_ = mode;
  const std::size_t n = std::size_t{1} << index_bits;
  lut.values_.resize(n);
  lut.raw_.assign(n, 0);
  const int f = mode.format.fraction_bits;
  for (std::size_t t = 0; t < n; ++t) {
    if (mode.is_exact()) {
      lut.values_[t] = 1.0 / (1.0 + std::ldexp(static_cast<double>(t), -index_bits));
      continue;
    }
    // 2^f / (1 + t 2^-k) = 2^(f+k) / (2^k + t), rounded exactly.
    const __int128 num = static_cast<__int128>(1) << (f + index_bits);
    const __int128 den = (static_cast<__int128>(1) << index_bits) + static_cast<__int128>(t);
    lut.raw_[t] = std::min(div_round_half_even(num, den), mode.format.max_raw());
    lut.values_[t] = std::ldexp(static_cast<double>(lut.raw_[t]), -f);
  }
  return lut;
}

TensorBlob RecipLut::to_blob() const {
  TensorBlob b;
  b.dims = {static_cast<std::uint32_t>(values_.size())};
  ByteWriter w;
  w.u8(static_cast<std::uint8_t>(ExtensionKind::RecipLut));
  w.u8(static_cast<std::uint8_t>(index_bits_));
  write_mode(w, mode_);
  b.extension = w.take();
  if (mode_.is_exact()) {
    b.dtype = DType::Float64;
    b.payload = f64_bytes(values_.begin(), values_.end());
  } else {
    b.dtype = DType::Int32;
    b.scale = mode_.format.lsb();
    b.payload = i32_bytes(raw_.begin(), raw_.end());
  }
  return b;
}

RecipLut RecipLut::from_blob(const TensorBlob &blob) {
  if (blob.extension.empty() || blob.extension[0] != static_cast<std::uint8_t>(ExtensionKind::RecipLut))
    throw SimError("reciprocal LUT blob: missing RecipLut header extension");
  ByteReader r(blob.extension);
  r.u8();
  RecipLut lut;
  lut.index_bits_ = r.u8();
  lut.mode_ = read_mode(r);
  if (lut.index_bits_ < 4 || lut.index_bits_ > 12) throw SimError("reciprocal LUT blob: bad index bits");
  const std::size_t n = std::size_t{1} << lut.index_bits_;
  if (blob.dims != std::vector<std::uint32_t>{static_cast<std::uint32_t>(n)})
    throw SimError("reciprocal LUT blob: entry count does not match index bits");
  if (lut.mode_.is_exact()) {
    if (blob.dtype != DType::Float64) throw SimError("reciprocal LUT blob: Exact mode needs float64 entries");
    lut.values_ = f64_payload(blob);
    lut.raw_.assign(n, 0);
  } else {
    if (blob.dtype != DType::Int32) throw SimError("reciprocal LUT blob: Fixed mode needs int32 entries");
    const auto v = i32_payload(blob);
    lut.raw_.assign(v.begin(), v.end());
    lut.values_.resize(n);
    for (std::size_t t = 0; t < n; ++t)
      lut.values_[t] = std::ldexp(static_cast<double>(v[t]), -lut.mode_.format.fraction_bits);
  }
  return lut;
}

// ---------------------------------------------------------------------------
// split evaluation

std::string to_string(SoftmaxFlow flow) {
  return flow == SoftmaxFlow::NormalizeThenMatmul ? "normalize_then_matmul" : "deferred";
}

std::optional<SoftmaxFlow> parse_flow(const std::string &s) {
  if (s == "normalize_then_matmul" || s == "ntm") return SoftmaxFlow::NormalizeThenMatmul;
  if (s == "deferred" || s == "deferred_normalization") return SoftmaxFlow::DeferredNormalization;
  return std::nullopt;
}

SplitSoftmaxState::SplitSoftmaxState(SoftmaxFlow flow, FxpFormat denominator_format)
    : flow_(flow), denom_format_(denominator_format) {
  denom_format_.validate();
  if (denom_format_.is_signed) throw std::invalid_argument("SplitSoftmaxState: denominator format must be unsigned");
  if (denom_format_.width() > 62) throw std::invalid_argument("SplitSoftmaxState: denominator wider than 62 bits");
}

NumeratorTerm SplitSoftmaxState::push(std::int8_t z, const ExpLut &lut) {
  if (finalized_) throw std::logic_error("split_softmax_push: state already finalized");
  const bool exact = lut.mode().is_exact();
  if (exact_ && *exact_ != exact) throw std::logic_error("split_softmax_push: LUT entry mode changed mid-row");
  exact_ = exact;
  ++input_reads_;
  const NumeratorTerm t = make_term(z, lut);
  if (exact) {
    denom_exact_ += t.value;
  } else {
    denom_raw_ = std::min(denom_raw_ + denominator_increment(t.code, denom_format_.fraction_bits),
                          denom_format_.max_raw());
  }
  ++count_;
  terms_.push_back(t);
  return t;
}

double SplitSoftmaxState::denominator_value() const {
  if (exact_ && *exact_) return denom_exact_;
  return std::ldexp(static_cast<double>(denom_raw_), -denom_format_.fraction_bits);
}

Normalizer SplitSoftmaxState::finalize(const RecipLut &recip, SoftmaxDiagnostics *diag) {
  if (finalized_) throw std::logic_error("split_softmax_finalize: already finalized");
  if (count_ == 0) throw std::logic_error("split_softmax_finalize: no token consumed");
  finalized_ = true;
  Normalizer m;
  if (*exact_) {
    if (denom_exact_ > 0.0) {
      m.value = 1.0 / denom_exact_;
      m.count = count_;
    } else {
      m = fallback_normalizer(count_);
    }
  } else {
    m = fixed_normalizer(denom_raw_, denom_format_.fraction_bits, count_, recip);
  }
  if (m.fallback && diag) ++diag->fallback_rows;
  return m;
}

double effective_probability(const NumeratorTerm &term, const Normalizer &m) {
  if (m.fallback) return m.value;
  return term.value * m.value;
}

std::int8_t normalize_term(const NumeratorTerm &term, const Normalizer &m) {
  std::int64_t code;
  if (m.fallback) {
    code = div_round_half_even(kTermFullScale, static_cast<__int128>(m.count));
  } else if (m.integer_path) {
    code = shift_round_half_even(static_cast<__int128>(term.code) * m.recip_raw, m.recip_fraction_bits + m.exponent);
  } else {
    code = round_half_even_to_int(term.value * m.value * kTermFullScale);
  }
  return static_cast<std::int8_t>(saturate(code, 0, kTermFullScale));
}

std::vector<std::int8_t> split_softmax_apply(std::span<const NumeratorTerm> terms, const Normalizer &m) {
  std::vector<std::int8_t> out;
  out.reserve(terms.size());
  for (const auto &t : terms) out.push_back(normalize_term(t, m));
  return out;
}

std::vector<std::int8_t> apply_deferred(std::span<const std::int32_t> weighted_sum, const Normalizer &m,
                                        std::span<const std::int32_t> plain_sum) {
  std::vector<std::int8_t> out(weighted_sum.size());
  if (m.fallback) {
    if (plain_sum.size() != weighted_sum.size())
      throw std::invalid_argument("apply_deferred: fallback row needs the plain value sum");
    for (std::size_t c = 0; c < out.size(); ++c)
      out[c] = saturate_int8(div_round_half_even(plain_sum[c], static_cast<__int128>(m.count)));
    return out;
  }
  for (std::size_t c = 0; c < out.size(); ++c) {
    std::int64_t v;
    if (m.integer_path) {
      const int shift = m.recip_fraction_bits + m.exponent;
      const __int128 prod = static_cast<__int128>(weighted_sum[c]) * m.recip_raw;
      v = shift >= 0 ? div_round_half_even(prod, static_cast<__int128>(kTermFullScale) << shift)
                     : div_round_half_even(prod << -shift, kTermFullScale);
    } else {
      v = round_half_even_to_int(static_cast<double>(weighted_sum[c]) * m.value / kTermFullScale);
    }
    out[c] = saturate_int8(v);
  }
  return out;
}

SplitRowResult evaluate_split_softmax_row(std::span<const std::int8_t> z, const ExpLut &lut, const RecipLut &recip,
                                          FxpFormat denominator_format) {
  if (z.empty()) throw std::logic_error("evaluate_split_softmax_row: empty row");
  SplitRowResult r;
  r.terms.reserve(z.size());
  for (auto code : z) r.terms.push_back(make_term(code, lut));
  if (lut.mode().is_exact()) {
    double d = 0.0;
    for (const auto &t : r.terms) d += t.value;
    if (d > 0.0) {
      r.normalizer.value = 1.0 / d;
      r.normalizer.count = z.size();
    } else {
      r.normalizer = fallback_normalizer(z.size());
    }
  } else {
    // Terms are nonnegative, so saturating once equals saturating every step.
    __int128 d = 0;
    for (const auto &t : r.terms) d += denominator_increment(t.code, denominator_format.fraction_bits);
    const auto raw = static_cast<std::int64_t>(std::min<__int128>(d, denominator_format.max_raw()));
    r.normalizer = fixed_normalizer(raw, denominator_format.fraction_bits, z.size(), recip);
  }
  r.probability_codes = split_softmax_apply(r.terms, r.normalizer);
  for (const auto &t : r.terms) r.probabilities.push_back(effective_probability(t, r.normalizer));
  return r;
}

SplitRowResult stream_split_softmax_row(std::span<const std::int8_t> z, const ExpLut &lut, const RecipLut &recip,
                                        FxpFormat denominator_format, SoftmaxDiagnostics *diag) {
  SplitSoftmaxState st(SoftmaxFlow::NormalizeThenMatmul, denominator_format);
  SplitRowResult r;
  for (auto code : z) r.terms.push_back(st.push(code, lut));
  r.normalizer = st.finalize(recip, diag);
  r.probability_codes = split_softmax_apply(r.terms, r.normalizer);
  for (const auto &t : r.terms) r.probabilities.push_back(effective_probability(t, r.normalizer));
  return r;
}

} // namespace cimsim
