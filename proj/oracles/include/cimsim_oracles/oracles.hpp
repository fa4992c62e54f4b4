// SPDX-License-Identifier: Apache-2.0
#pragma once

// Straightforward reference computations for tests. These intentionally
// share no code with the simulator: plain loops, wide integers and
// long double math with the default round-to-nearest-even mode.

#include <cstddef>
#include <cstdint>
#include <vector>

namespace oracle {

// Round half to even via the FPU's default rounding mode.
long double rne(long double x);

// Symmetric quantization: scale = max|x| / qmax (1 when all zero).
struct Quantized {
  std::vector<int> codes;
  double scale = 1.0;
};
Quantized quantize(const std::vector<double> &x, int bits = 8);

// out[i][j] = sum_k a[i][k] * b[j][k]; a is m x k, b is n x k, both row-major.
std::vector<std::int64_t> gemm_abt(const std::vector<int> &a, const std::vector<int> &b, std::size_t m,
                                   std::size_t n, std::size_t k);

// Fixed-point product of raw values with fraction bits fa, fb, rounded
// (half-to-even) to fout fraction bits and clamped to [lo, hi].
std::int64_t fixed_mul(std::int64_t a, int fa, std::int64_t b, int fb, int fout, std::int64_t lo, std::int64_t hi);

std::vector<double> softmax(const std::vector<double> &z);

// Real-valued multi-head attention on dequantized tensors.
//   x: n x d, w*: d x d (row-major, y = x W), heads split columns evenly.
struct AttentionResult {
  std::vector<double> out;                 // n x d
  std::vector<std::vector<double>> scores; // per head, nq x nk, already divided by sqrt(dh)
  std::vector<std::vector<double>> probs;  // per head, nq x nk
  std::vector<std::vector<double>> heads;  // per head, nq x dh
};
AttentionResult attention(const std::vector<double> &xq, const std::vector<double> &xkv, std::size_t nq,
                          std::size_t nk, std::size_t d, std::size_t h, const std::vector<double> &wq,
                          const std::vector<double> &wk, const std::vector<double> &wv,
                          const std::vector<double> &wo, bool causal);

// Single-head attention on real q (nq x dh), k and v (nk x dh); scores are
// divided by sqrt(dh). Masked probabilities are 0.
struct HeadAttention {
  std::vector<double> out;   // nq x dh
  std::vector<double> probs; // nq x nk
};
HeadAttention head_attention(const std::vector<double> &q, const std::vector<double> &k,
                             const std::vector<double> &v, std::size_t nq, std::size_t nk, std::size_t dh,
                             bool causal);

} // namespace oracle
