// SPDX-License-Identifier: Apache-2.0
#pragma once

// Analytic worst-case error bounds for the fixed-point attention path,
// measured against real-valued softmax attention on the same int8 operands.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "cimsim/attention.hpp"

namespace cimsim {

struct SoftmaxErrorTerms {
  double term = 0.0;        // per-term error of a numerator code, in units of 1.0
  double denom_step = 0.0;  // per-term rounding of a denominator increment
  double recip = 0.0;       // relative error of the reciprocal lookup
};

SoftmaxErrorTerms softmax_error_terms(const ExpLut &exp, const RecipLut &recip, FxpFormat denominator);

// sum_j exp(s * (min(z_j, zqm) - zqm)) computed in double.
double ideal_denominator(std::span<const std::int8_t> z, const ExpLut &exp);

// L1 distance bound between the split-softmax probabilities and exact
// softmax over the dequantized codes (no score quantization).
double split_l1_bound(std::size_t n, double ideal_denom, const SoftmaxErrorTerms &t);

// L1 bound against softmax of the unquantized scores, including score
// quantization at `score_scale` and, for NormalizeThenMatmul, the int8
// probability codes. Never exceeds 2.
double probability_l1_bound(std::size_t n, double ideal_denom, double score_scale, SoftmaxFlow flow,
                            const SoftmaxErrorTerms &t);

// Per-row bound (real units) on |head output - exact attention output|.
// Rows are masked causally when `causal`.
std::vector<double> head_row_bounds(const HeadResult &r, const QuantTensor &v, const HeadContext &ctx,
                                    bool causal);

// Element bounds (n x d_model, real units) on the final projected output,
// given each head's per-row bounds.
std::vector<double> output_bounds(const std::vector<std::vector<double>> &head_rows, std::size_t d_head,
                                  const QuantTensor &wo, double concat_scale, double out_scale);

// Acceptance bound on the max abs probability error of one row.
double row_probability_bound(std::size_t n);

} // namespace cimsim
