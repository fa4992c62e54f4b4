// SPDX-License-Identifier: Apache-2.0
#include "cimsim_oracles/oracles.hpp"

#include <algorithm>
#include <cmath>

namespace oracle {

long double rne(long double x) { return std::nearbyint(x); }

Quantized quantize(const std::vector<double> &x, int bits) {
  const int qmax = (1 << (bits - 1)) - 1;
  double m = 0.0;
  for (double v : x) m = std::max(m, std::fabs(v));
  Quantized q;
  q.scale = m == 0.0 ? 1.0 : m / qmax;
  for (double v : x) {
    long double c = m == 0.0 ? 0.0L : rne(static_cast<long double>(v) * qmax / m);
    c = std::clamp(c, static_cast<long double>(-qmax - 1), static_cast<long double>(qmax));
    q.codes.push_back(static_cast<int>(c));
  }
  return q;
}

std::vector<std::int64_t> gemm_abt(const std::vector<int> &a, const std::vector<int> &b, std::size_t m,
                                   std::size_t n, std::size_t k) {
  std::vector<std::int64_t> out(m * n, 0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      std::int64_t s = 0;
      for (std::size_t kk = 0; kk < k; ++kk) s += static_cast<std::int64_t>(a[i * k + kk]) * b[j * k + kk];
      out[i * n + j] = s;
    }
  return out;
}

std::int64_t fixed_mul(std::int64_t a, int fa, std::int64_t b, int fb, int fout, std::int64_t lo, std::int64_t hi) {
  const long double p = static_cast<long double>(a) * static_cast<long double>(b);
  const long double r = rne(std::ldexp(p, fout - fa - fb));
  return static_cast<std::int64_t>(std::clamp(r, static_cast<long double>(lo), static_cast<long double>(hi)));
}

std::vector<double> softmax(const std::vector<double> &z) {
  long double m = z.front();
  for (double v : z) m = std::max<long double>(m, v);
  long double s = 0.0L;
  std::vector<long double> e(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) s += e[i] = std::exp(static_cast<long double>(z[i]) - m);
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = static_cast<double>(e[i] / s);
  return out;
}

namespace {

std::vector<double> matmul(const std::vector<double> &x, const std::vector<double> &w, std::size_t n,
                           std::size_t d) {
  std::vector<double> y(n * d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      long double s = 0.0L;
      for (std::size_t k = 0; k < d; ++k) s += static_cast<long double>(x[i * d + k]) * w[k * d + j];
      y[i * d + j] = static_cast<double>(s);
    }
  return y;
}

} // namespace

AttentionResult attention(const std::vector<double> &xq, const std::vector<double> &xkv, std::size_t nq,
                          std::size_t nk, std::size_t d, std::size_t h, const std::vector<double> &wq,
                          const std::vector<double> &wk, const std::vector<double> &wv,
                          const std::vector<double> &wo, bool causal) {
  const std::size_t dh = d / h;
  const auto q = matmul(xq, wq, nq, d);
  const auto k = matmul(xkv, wk, nk, d);
  const auto v = matmul(xkv, wv, nk, d);
  AttentionResult r;
  std::vector<double> concat(nq * d, 0.0);
  for (std::size_t hd = 0; hd < h; ++hd) {
    std::vector<double> scores(nq * nk, 0.0), probs(nq * nk, 0.0), head(nq * dh, 0.0);
    for (std::size_t i = 0; i < nq; ++i) {
      std::vector<double> row;
      for (std::size_t j = 0; j < nk; ++j) {
        long double s = 0.0L;
        for (std::size_t c = 0; c < dh; ++c)
          s += static_cast<long double>(q[i * d + hd * dh + c]) * k[j * d + hd * dh + c];
        scores[i * nk + j] = static_cast<double>(s / std::sqrt(static_cast<long double>(dh)));
        if (!causal || j <= i) row.push_back(scores[i * nk + j]);
      }
      const auto p = softmax(row);
      for (std::size_t j = 0; j < p.size(); ++j) probs[i * nk + j] = p[j];
      for (std::size_t c = 0; c < dh; ++c) {
        long double s = 0.0L;
        for (std::size_t j = 0; j < p.size(); ++j) s += static_cast<long double>(p[j]) * v[j * d + hd * dh + c];
        head[i * dh + c] = static_cast<double>(s);
        concat[i * d + hd * dh + c] = head[i * dh + c];
      }
    }
    r.scores.push_back(std::move(scores));
    r.probs.push_back(std::move(probs));
    r.heads.push_back(std::move(head));
  }
  r.out = matmul(concat, wo, nq, d);
  return r;
}

HeadAttention head_attention(const std::vector<double> &q, const std::vector<double> &k,
                             const std::vector<double> &v, std::size_t nq, std::size_t nk, std::size_t dh,
                             bool causal) {
  HeadAttention r;
  r.out.assign(nq * dh, 0.0);
  r.probs.assign(nq * nk, 0.0);
  const long double root = std::sqrt(static_cast<long double>(dh));
  for (std::size_t i = 0; i < nq; ++i) {
    const std::size_t n = causal ? std::min(nk, i + 1) : nk;
    std::vector<double> row(n);
    for (std::size_t j = 0; j < n; ++j) {
      long double s = 0.0L;
      for (std::size_t c = 0; c < dh; ++c) s += static_cast<long double>(q[i * dh + c]) * k[j * dh + c];
      row[j] = static_cast<double>(s / root);
    }
    const auto p = softmax(row);
    for (std::size_t j = 0; j < n; ++j) r.probs[i * nk + j] = p[j];
    for (std::size_t c = 0; c < dh; ++c) {
      long double s = 0.0L;
      for (std::size_t j = 0; j < n; ++j) s += static_cast<long double>(p[j]) * v[j * dh + c];
      r.out[i * dh + c] = static_cast<double>(s);
    }
  }
  return r;
}

} // namespace oracle
