// SPDX-License-Identifier: Apache-2.0
#include "cimsim/error_budget.hpp"

#include <algorithm>
#include <cmath>

namespace cimsim {

SoftmaxErrorTerms softmax_error_terms(const ExpLut &exp, const RecipLut &recip, FxpFormat denominator) {
  SoftmaxErrorTerms t;
  const bool fixed_exp = !exp.mode().is_exact();
  t.term = 0.5 / kTermFullScale;
  if (fixed_exp) t.term += std::ldexp(1.0, -(exp.mode().format.fraction_bits + 1));
  if (fixed_exp) {
    t.denom_step = std::ldexp(1.0, -(denominator.fraction_bits + 1));
    t.recip = std::ldexp(1.0, -recip.index_bits());
    if (!recip.mode().is_exact()) t.recip += std::ldexp(1.0, -recip.mode().format.fraction_bits);
  }
  return t;
}

double ideal_denominator(std::span<const std::int8_t> z, const ExpLut &exp) {
  const int zqm = exp.z_quant_max();
  double d = 0.0;
  for (auto c : z) d += std::exp(exp.input_scale() * (std::min<int>(c, zqm) - zqm));
  return d;
}

double split_l1_bound(std::size_t n, double ideal_denom, const SoftmaxErrorTerms &t) {
  if (ideal_denom <= 0.0) return 2.0;
  const double dn = static_cast<double>(n);
  const double b = (2.0 * dn * t.term + dn * t.denom_step) / ideal_denom +
                   t.recip * (1.0 + dn * t.denom_step / ideal_denom);
  return std::min(2.0, b);
}

double probability_l1_bound(std::size_t n, double ideal_denom, double score_scale, SoftmaxFlow flow,
                            const SoftmaxErrorTerms &t) {
  double b = std::expm1(score_scale) + split_l1_bound(n, ideal_denom, t);
  if (flow == SoftmaxFlow::NormalizeThenMatmul) b += static_cast<double>(n) / (2.0 * kTermFullScale);
  return std::min(2.0, b);
}

std::vector<double> head_row_bounds(const HeadResult &r, const QuantTensor &v, const HeadContext &ctx,
                                    bool causal) {
  const std::size_t nq = r.out.rows(), nk = v.rows();
  const auto terms = softmax_error_terms(ctx.exp_lut, ctx.recip, ctx.denominator);
  std::vector<double> out(nq);
  for (std::size_t i = 0; i < nq; ++i) {
    const std::size_t n = causal ? std::min(nk, i + 1) : nk;
    int vmax = 0;
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t c = 0; c < v.cols(); ++c) vmax = std::max(vmax, std::abs(static_cast<int>(v.at(j, c))));
    const std::span<const std::int8_t> z(r.score_codes.data() + i * nk, n);
    const double l1 = probability_l1_bound(n, ideal_denominator(z, ctx.exp_lut), ctx.score_scale, ctx.flow, terms);
    out[i] = (vmax * l1 + 0.5) * v.scale;
  }
  return out;
}

std::vector<double> output_bounds(const std::vector<std::vector<double>> &head_rows, std::size_t d_head,
                                  const QuantTensor &wo, double concat_scale, double out_scale) {
  const std::size_t n = head_rows.empty() ? 0 : head_rows[0].size();
  const std::size_t d = wo.cols();
  std::vector<double> out(n * d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) {
      double b = 0.0;
      for (std::size_t k = 0; k < wo.rows(); ++k)
        b += (head_rows[k / d_head][i] + concat_scale / 2) * std::abs(wo.at(k, c) * wo.scale);
      out[i * d + c] = b + out_scale / 2;
    }
  return out;
}

double row_probability_bound(std::size_t n) { return static_cast<double>(n) / 254.0 + std::ldexp(1.0, -7); }

} // namespace cimsim
