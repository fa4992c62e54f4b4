// SPDX-License-Identifier: Apache-2.0
#pragma once

// Reference softmax implementations and the LUT-based split fixed-point
// softmax: a 256-entry exponential table indexed by the raw int8 score
// code (offset by z_quant_max instead of the row maximum), a running
// fixed-point denominator, and a mantissa-indexed reciprocal table that
// yields the normalizer M once the row has been consumed.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cimsim/fxp.hpp"
#include "cimsim/tensor_io.hpp"

namespace cimsim {

// --- reference implementations ---------------------------------------------

std::vector<double> naive_softmax_ref(std::span<const double> z);
std::vector<double> safe_softmax_ref(std::span<const double> z);
// Same as safe_softmax_ref, but counts every read of an input element
// (max scan, exponent-sum pass, normalization pass).
std::vector<double> safe_softmax_ref_counted(std::span<const double> z, std::size_t &input_reads);

// --- LUT configuration -------------------------------------------------------

struct LutEntryMode {
  enum class Kind { Exact, Fixed };
  Kind kind = Kind::Fixed;
  FxpFormat format{1, 15, false};

  static LutEntryMode exact() { return {Kind::Exact, {}}; }
  static LutEntryMode fixed(FxpFormat f) { return {Kind::Fixed, f}; }
  bool is_exact() const { return kind == Kind::Exact; }
  std::string to_string() const;

  friend bool operator==(const LutEntryMode &, const LutEntryMode &) = default;
};

// UQ1.15: 1.0 is representable, so the z_quant_max entry is exact.
inline constexpr FxpFormat kDefaultExpLutFormat{1, 15, false};
inline constexpr FxpFormat kDefaultRecipLutFormat{1, 15, false};
// 24 fraction bits; 16 integer bits so 4096 unit terms cannot saturate.
inline constexpr FxpFormat kDefaultDenominatorFormat{16, 24, false};
inline constexpr int kDefaultRecipIndexBits = 8;
inline constexpr std::int8_t kDefaultZQuantMax = 127;
// Numerator terms are int8 codes in [0, 127] representing code / 127.
inline constexpr int kTermFullScale = 127;

class ExpLut {
public:
  // entry(i) represents exp(input_scale * (min(i, z_quant_max) - z_quant_max)).
  // Throws std::invalid_argument for a non-positive scale.
  static ExpLut build(double input_scale, const LutEntryMode &mode,
                      std::int8_t z_quant_max = kDefaultZQuantMax);

  double value(std::int8_t code) const { return values_[index(code)]; }
  // Raw fixed-point entry; only meaningful in Fixed mode.
  std::int64_t raw(std::int8_t code) const { return raw_[index(code)]; }

  double input_scale() const { return input_scale_; }
  std::int8_t z_quant_max() const { return z_quant_max_; }
  const LutEntryMode &mode() const { return mode_; }
  // Fixed mode only: every entry below z_quant_max rounded to zero.
  bool degenerate() const { return degenerate_; }
  const std::string &warning() const { return warning_; }

  TensorBlob to_blob() const;
  static ExpLut from_blob(const TensorBlob &blob);

private:
  static std::size_t index(std::int8_t code) { return static_cast<std::size_t>(code + 128); }

  std::array<double, 256> values_{};
  std::array<std::int64_t, 256> raw_{};
  double input_scale_ = 1.0;
  std::int8_t z_quant_max_ = kDefaultZQuantMax;
  LutEntryMode mode_;
  bool degenerate_ = false;
  std::string warning_;
};

class RecipLut {
public:
  // entry(t) represents 1 / (1 + t * 2^-k) for t in [0, 2^k).
  static RecipLut build(int index_bits = kDefaultRecipIndexBits,
                        const LutEntryMode &mode = LutEntryMode::fixed(kDefaultRecipLutFormat));

  std::size_t size() const { return values_.size(); }
  int index_bits() const { return index_bits_; }
  double value(std::size_t t) const { return values_.at(t); }
  std::int64_t raw(std::size_t t) const { return raw_.at(t); }
  const LutEntryMode &mode() const { return mode_; }

  TensorBlob to_blob() const;
  static RecipLut from_blob(const TensorBlob &blob);

private:
  std::vector<double> values_;
  std::vector<std::int64_t> raw_;
  int index_bits_ = kDefaultRecipIndexBits;
  LutEntryMode mode_;
};

// --- split evaluation ----------------------------------------------------------

enum class SoftmaxFlow { NormalizeThenMatmul, DeferredNormalization };

std::string to_string(SoftmaxFlow flow);
std::optional<SoftmaxFlow> parse_flow(const std::string &s);

struct NumeratorTerm {
  std::int8_t code = 0; // Fixed mode: value = code / 127
  double value = 0.0;   // represented value (exact real in Exact mode)
};

// The normalizer M ~ 1/D, carried as a table value plus a power-of-two
// shift so that applying it stays in integer arithmetic:
//   M = recip_raw * 2^-(recip_fraction_bits + exponent)
struct Normalizer {
  double value = 1.0;
  bool integer_path = false; // recip_raw/exponent valid
  std::int64_t recip_raw = 0;
  int recip_fraction_bits = 0;
  int exponent = 0;
  std::size_t table_index = 0;
  bool fallback = false; // denominator underflowed; uniform 1/count applies
  std::size_t count = 0;
};

struct SoftmaxDiagnostics {
  std::uint64_t fallback_rows = 0;
};

class SplitSoftmaxState {
public:
  explicit SplitSoftmaxState(SoftmaxFlow flow = SoftmaxFlow::NormalizeThenMatmul,
                             FxpFormat denominator_format = kDefaultDenominatorFormat);

  // Consumes one score code. Throws std::logic_error after finalize.
  NumeratorTerm push(std::int8_t z, const ExpLut &lut);
  // Throws std::logic_error when nothing was pushed or already finalized.
  Normalizer finalize(const RecipLut &recip, SoftmaxDiagnostics *diag = nullptr);

  std::size_t count() const { return count_; }
  bool finalized() const { return finalized_; }
  SoftmaxFlow flow() const { return flow_; }
  std::int64_t denominator_raw() const { return denom_raw_; }
  double denominator_value() const;
  const FxpFormat &denominator_format() const { return denom_format_; }
  // Every push reads its input exactly once.
  std::size_t input_reads() const { return input_reads_; }
  const std::vector<NumeratorTerm> &terms() const { return terms_; }

private:
  SoftmaxFlow flow_;
  FxpFormat denom_format_;
  std::optional<bool> exact_;
  std::int64_t denom_raw_ = 0;
  double denom_exact_ = 0.0;
  std::size_t count_ = 0;
  std::size_t input_reads_ = 0;
  bool finalized_ = false;
  std::vector<NumeratorTerm> terms_;
};

// Represented (dequantized) probability term * M, before any int8 rounding.
double effective_probability(const NumeratorTerm &term, const Normalizer &m);

// NormalizeThenMatmul: p = term * M as an int8 code in [0, 127] (scale 1/127).
std::int8_t normalize_term(const NumeratorTerm &term, const Normalizer &m);
std::vector<std::int8_t> split_softmax_apply(std::span<const NumeratorTerm> terms, const Normalizer &m);

// DeferredNormalization: weighted_sum[c] = sum_j term_code_j * v_code_jc is
// multiplied by M and requantized to int8 at the value scale (acc scale * 127).
// On fallback, plain_sum[c] = sum_j v_code_jc is averaged instead.
std::vector<std::int8_t> apply_deferred(std::span<const std::int32_t> weighted_sum, const Normalizer &m,
                                        std::span<const std::int32_t> plain_sum = {});

struct SplitRowResult {
  std::vector<NumeratorTerm> terms;
  Normalizer normalizer;
  std::vector<std::int8_t> probability_codes; // NormalizeThenMatmul output
  std::vector<double> probabilities;          // term * M
};

// Whole-row evaluation computed directly from the tables (no streaming
// state); must agree bit-for-bit with pushing the row one element at a time.
SplitRowResult evaluate_split_softmax_row(std::span<const std::int8_t> z, const ExpLut &lut, const RecipLut &recip,
                                          FxpFormat denominator_format = kDefaultDenominatorFormat);

// Streaming evaluation of a full row via SplitSoftmaxState.
SplitRowResult stream_split_softmax_row(std::span<const std::int8_t> z, const ExpLut &lut, const RecipLut &recip,
                                        FxpFormat denominator_format = kDefaultDenominatorFormat,
                                        SoftmaxDiagnostics *diag = nullptr);

} // namespace cimsim
