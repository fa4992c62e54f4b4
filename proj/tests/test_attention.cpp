#include <algorithm>
#include <cmath>
#include <random>

#include "cimsim/attention.hpp"
#include "cimsim/error.hpp"
#include "cimsim/error_budget.hpp"
#include "cimsim_oracles/oracles.hpp"
#include "doctest.h"

using namespace cimsim;

namespace {

QuantTensor random_tensor(std::mt19937_64 &rng, std::size_t r, std::size_t c, double scale, int lo = -127,
                          int hi = 127) {
  std::uniform_int_distribution<int> d(lo, hi);
  QuantTensor t({r, c}, scale);
  for (auto &v : t.codes) v = static_cast<std::int8_t>(d(rng));
  return t;
}

HeadContext context_for(const QuantTensor &q, const QuantTensor &k, bool causal, SoftmaxFlow flow) {
  return make_head_context(q, k, causal, LutSettings{}, flow);
}

std::vector<std::size_t> random_topological_order(const Program &p, std::mt19937_64 &rng) {
  std::vector<std::size_t> pending(p.jobs.size());
  std::vector<std::vector<std::size_t>> users(p.jobs.size());
  for (const auto &j : p.jobs) {
    pending[j.id] = j.deps.size();
    for (auto d : j.deps) users[d].push_back(j.id);
  }
  std::vector<std::size_t> ready, order;
  for (std::size_t i = 0; i < pending.size(); ++i)
    if (pending[i] == 0) ready.push_back(i);
  while (!ready.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, ready.size() - 1);
    const auto k = pick(rng);
    const auto id = ready[k];
    ready.erase(ready.begin() + static_cast<std::ptrdiff_t>(k));
    order.push_back(id);
    for (auto u : users[id])
      if (--pending[u] == 0) ready.push_back(u);
  }
  return order;
}

struct Weights {
  AttentionWeights w;
  std::vector<double> wq, wk, wv, wo; // dequantized d x d for the oracle
};

Weights random_weights(std::mt19937_64 &rng, std::size_t d, std::size_t h) {
  const double s = 1.0 / (127.0 * std::sqrt(static_cast<double>(d)));
  const std::size_t dh = d / h;
  auto full_q = random_tensor(rng, d, d, s), full_k = random_tensor(rng, d, d, s), full_v = random_tensor(rng, d, d, s);
  Weights out;
  out.w.wo = random_tensor(rng, d, d, s);
  for (std::size_t i = 0; i < h; ++i) {
    HeadWeights hw{QuantTensor({d, dh}, s), QuantTensor({d, dh}, s), QuantTensor({d, dh}, s)};
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c < dh; ++c) {
        hw.wq.at(r, c) = full_q.at(r, i * dh + c);
        hw.wk.at(r, c) = full_k.at(r, i * dh + c);
        hw.wv.at(r, c) = full_v.at(r, i * dh + c);
      }
    out.w.heads.push_back(hw);
  }
  for (auto c : full_q.codes) out.wq.push_back(c * s);
  for (auto c : full_k.codes) out.wk.push_back(c * s);
  for (auto c : full_v.codes) out.wv.push_back(c * s);
  for (auto c : out.w.wo.codes) out.wo.push_back(c * s);
  return out;
}

const SoftmaxFlow kFlows[] = {SoftmaxFlow::NormalizeThenMatmul, SoftmaxFlow::DeferredNormalization};

} // namespace

TEST_CASE("a single token attends only to itself") {
  std::mt19937_64 rng(11);
  for (auto flow : kFlows) {
    for (std::size_t d : {16u, 64u, 100u}) {
      auto q = random_tensor(rng, 1, d, 0.01), k = random_tensor(rng, 1, d, 0.01), v = random_tensor(rng, 1, d, 0.02);
      CimMacro macro;
      auto ctx = context_for(q, k, false, flow);
      auto r = encoder_attention(q, k, v, ctx, false, macro);
      CHECK(r.out.codes == v.codes);
      CHECK(r.probabilities[0] == doctest::Approx(1.0).epsilon(0.01));

      KvCache cache(1, d);
      auto step = decoder_step(q, k, v, cache, 0, ctx, macro);
      CHECK(step.out.codes == v.codes);
    }
  }
}

TEST_CASE("zero queries give uniform attention over the values") {
  std::mt19937_64 rng(12);
  const std::size_t n = 40, d = 48;
  QuantTensor q({n, d}, 0.01);
  auto k = random_tensor(rng, n, d, 0.01), v = random_tensor(rng, n, d, 0.02);
  for (auto flow : kFlows) {
    CimMacro macro;
    auto r = encoder_attention(q, k, v, context_for(q, k, false, flow), false, macro);
    for (std::size_t c = 0; c < d; ++c) {
      double mean = 0;
      for (std::size_t j = 0; j < n; ++j) mean += v.at(j, c);
      mean /= n;
      for (std::size_t i = 0; i < n; ++i) {
        // p = rhe(127/n) codes make NormalizeThenMatmul off by a few percent.
        const double tol = flow == SoftmaxFlow::NormalizeThenMatmul ? 0.03 * 127 + 1 : 1.0;
        CHECK(std::abs(r.out.at(i, c) - mean) <= tol);
      }
    }
  }
}

std::vector<double> dequantized(const QuantTensor &t) {
  std::vector<double> out;
  for (auto c : t.codes) out.push_back(c * t.scale);
  return out;
}

TEST_CASE("head outputs stay within the analytic bound of exact attention") {
  std::mt19937_64 rng(13);
  for (auto flow : kFlows) {
    for (bool causal : {false, true}) {
      for (auto [n, d, qs] : {std::tuple{96u, 64u, 0.02}, std::tuple{16u, 8u, 0.1}, std::tuple{130u, 64u, 0.005}}) {
        auto q = random_tensor(rng, n, d, qs), k = random_tensor(rng, n, d, qs), v = random_tensor(rng, n, d, 0.05);
        CimMacro macro;
        auto ctx = context_for(q, k, causal, flow);
        auto r = encoder_attention(q, k, v, ctx, causal, macro);
        auto ref = oracle::head_attention(dequantized(q), dequantized(k), dequantized(v), n, n, d, causal);
        auto bounds = head_row_bounds(r, v, ctx, causal);
        std::size_t violations = 0;
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = causal ? i + 1 : n; j < n; ++j) CHECK(r.probabilities[i * n + j] == 0.0);
          for (std::size_t c = 0; c < d; ++c)
            violations += std::abs(r.out.at(i, c) * v.scale - ref.out[i * d + c]) > bounds[i];
        }
        CHECK(violations == 0);
      }
    }
  }
}

TEST_CASE("decoder steps reproduce the causal encoder bit for bit") {
  std::mt19937_64 rng(14);
  const std::size_t n = 70, d = 64, h = 2;
  auto x = random_tensor(rng, n, d, 1.0 / 127);
  auto w = random_weights(rng, d, h);
  for (auto flow : kFlows) {
    auto enc = multi_head_attention(x, x, w.w, AttentionKind::SelfEncoder, true, LutSettings{}, flow);
    auto dec = multi_head_attention(x, x, w.w, AttentionKind::SelfDecoder, true, LutSettings{}, flow);
    CHECK(enc.out.codes == dec.out.codes);
    CHECK(enc.out.scale == dec.out.scale);
    for (std::size_t i = 0; i < h; ++i) {
      CHECK(enc.heads[i].out.codes == dec.heads[i].out.codes);
      CHECK(enc.heads[i].score_codes == dec.heads[i].score_codes);
    }
  }
}

TEST_CASE("query-resident and key-resident mappings agree") {
  std::mt19937_64 rng(15);
  for (auto flow : kFlows) {
    for (auto [nq, nk, d] : {std::tuple{50u, 130u, 64u}, std::tuple{100u, 33u, 80u}}) {
      auto q = random_tensor(rng, nq, d, 0.02), k = random_tensor(rng, nk, d, 0.02), v = random_tensor(rng, nk, d, 0.03);
      auto ctx = context_for(q, k, false, flow);
      CimMacro m1, m2;
      auto a = encoder_attention(q, k, v, ctx, false, m1, Residency::QueryResident);
      auto b = encoder_attention(q, k, v, ctx, false, m2, Residency::KeyResident);
      CHECK(a.out.codes == b.out.codes);
      CHECK(a.raw_scores == b.raw_scores);
      CHECK(a.probabilities == b.probabilities);
    }
  }
}

TEST_CASE("split and non-split schedules and any valid order give identical bytes") {
  std::mt19937_64 rng(16);
  const std::size_t nq = 100, nk = 150, d = 72;
  auto q = random_tensor(rng, nq, d, 0.02), k = random_tensor(rng, nk, d, 0.02), v = random_tensor(rng, nk, d, 0.03);
  for (auto flow : kFlows) {
    for (auto res : {Residency::QueryResident, Residency::KeyResident}) {
      auto ctx = context_for(q, k, false, flow);
      std::optional<HeadResult> first;
      for (auto pipe : {Pipeline::SplitLut, Pipeline::NonSplitBaseline}) {
        A2aShape s{nq, nk, d, 0, false, flow, pipe, res};
        auto prog = build_a2a_program(s);
        for (int trial = 0; trial < 3; ++trial) {
          auto order = trial == 0 ? prog.natural_order() : random_topological_order(prog, rng);
          REQUIRE(order.size() == prog.jobs.size());
          CimMacro macro;
          auto r = execute_a2a(prog, order, s, q, k, v, ctx, macro);
          if (!first) first = r;
          CHECK(r.out.codes == first->out.codes);
          CHECK(r.probabilities == first->probabilities);
        }
      }
    }
  }
}

TEST_CASE("programs list dependencies before their users") {
  for (auto pipe : {Pipeline::SplitLut, Pipeline::NonSplitBaseline})
    for (auto res : {Residency::QueryResident, Residency::KeyResident}) {
      A2aShape s{130, 130, 96, 0, true, SoftmaxFlow::DeferredNormalization, pipe, res};
      auto prog = build_a2a_program(s);
      for (const auto &j : prog.jobs)
        for (auto dep : j.deps) CHECK(dep < j.id);
    }
}

TEST_CASE("split pipeline interleaves the next tile's QK with the current tile's A'V") {
  A2aShape s{96, 64, 64, 0, false, SoftmaxFlow::NormalizeThenMatmul, Pipeline::SplitLut, Residency::QueryResident};
  auto prog = build_a2a_program(s);
  std::vector<std::pair<JobKind, std::size_t>> cim; // kind, first row
  for (const auto &j : prog.jobs)
    if (j.resource == Resource::Cim) cim.emplace_back(j.kind, j.r0);
  std::vector<std::pair<JobKind, std::size_t>> want{{JobKind::QkQres, 0},  {JobKind::QkQres, 32}, {JobKind::Av, 0},
                                                    {JobKind::Av, 0},      {JobKind::QkQres, 64}, {JobKind::Av, 32},
                                                    {JobKind::Av, 32},     {JobKind::Av, 64},     {JobKind::Av, 64}};
  CHECK(cim == want);
}

TEST_CASE("consuming a score or probability before it exists is rejected") {
  std::mt19937_64 rng(17);
  const std::size_t n = 80, d = 64;
  auto q = random_tensor(rng, n, d, 0.02), k = random_tensor(rng, n, d, 0.02), v = random_tensor(rng, n, d, 0.03);
  for (auto flow : kFlows) {
    A2aShape s{n, n, d, 0, false, flow, Pipeline::SplitLut, Residency::QueryResident};
    auto prog = build_a2a_program(s);
    auto ctx = context_for(q, k, false, flow);
    auto first_of = [&](JobKind kind) {
      for (const auto &j : prog.jobs)
        if (j.kind == kind) return j.id;
      return prog.jobs.size();
    };
    // Run a push ahead of the QK jobs that feed it.
    auto order = prog.natural_order();
    auto push = first_of(JobKind::SmPush);
    std::rotate(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(push), order.begin() + static_cast<std::ptrdiff_t>(push) + 1);
    CimMacro m1;
    CHECK_THROWS_AS(execute_a2a(prog, order, s, q, k, v, ctx, m1), InvariantViolation);

    // A'V ahead of the softmax.
    order = prog.natural_order();
    auto av = first_of(JobKind::Av);
    std::rotate(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(av), order.begin() + static_cast<std::ptrdiff_t>(av) + 1);
    CimMacro m2;
    CHECK_THROWS_AS(execute_a2a(prog, order, s, q, k, v, ctx, m2), InvariantViolation);

    // Dropping the output jobs leaves the head unfinished.
    order = prog.natural_order();
    order.pop_back();
    CimMacro m3;
    CHECK_THROWS_AS(execute_a2a(prog, order, s, q, k, v, ctx, m3), InvariantViolation);
  }
}

TEST_CASE("pushes must arrive in ascending column order") {
  std::mt19937_64 rng(18);
  const std::size_t n = 32, nk = 192, d = 64;
  auto q = random_tensor(rng, n, d, 0.02), k = random_tensor(rng, nk, d, 0.02), v = random_tensor(rng, nk, d, 0.03);
  A2aShape s{n, nk, d, 0, false, SoftmaxFlow::DeferredNormalization, Pipeline::SplitLut, Residency::QueryResident};
  auto prog = build_a2a_program(s);
  std::vector<std::size_t> pushes;
  for (const auto &j : prog.jobs)
    if (j.kind == JobKind::SmPush) pushes.push_back(j.id);
  REQUIRE(pushes.size() == 3);
  auto order = prog.natural_order();
  std::iter_swap(std::find(order.begin(), order.end(), pushes[0]), std::find(order.begin(), order.end(), pushes[1]));
  CimMacro macro;
  CHECK_THROWS_AS(execute_a2a(prog, order, s, q, k, v, context_for(q, k, false, s.flow), macro), InvariantViolation);
}

TEST_CASE("permuting heads permutes head outputs") {
  std::mt19937_64 rng(19);
  const std::size_t n = 24, d = 64, h = 4;
  auto x = random_tensor(rng, n, d, 1.0 / 127);
  auto w = random_weights(rng, d, h);
  auto permuted = w.w;
  const std::size_t perm[] = {2, 0, 3, 1};
  for (std::size_t i = 0; i < h; ++i) permuted.heads[i] = w.w.heads[perm[i]];
  auto a = multi_head_attention(x, x, w.w, AttentionKind::SelfEncoder, false, LutSettings{}, SoftmaxFlow::NormalizeThenMatmul);
  auto b = multi_head_attention(x, x, permuted, AttentionKind::SelfEncoder, false, LutSettings{}, SoftmaxFlow::NormalizeThenMatmul);
  for (std::size_t i = 0; i < h; ++i) {
    CHECK(b.heads[i].out.codes == a.heads[perm[i]].out.codes);
    CHECK(b.heads[i].out.scale == a.heads[perm[i]].out.scale);
  }
  CHECK(a.concat.scale == b.concat.scale);
}

TEST_CASE("the KV cache only grows") {
  std::mt19937_64 rng(20);
  const std::size_t n = 12, d = 32;
  auto q = random_tensor(rng, n, d, 0.02), k = random_tensor(rng, n, d, 0.02), v = random_tensor(rng, n, d, 0.03);
  auto ctx = context_for(q, k, true, SoftmaxFlow::NormalizeThenMatmul);
  KvCache cache(1, d);
  CimMacro macro;
  std::vector<std::vector<std::int8_t>> keys;
  for (std::size_t t = 0; t < n; ++t) {
    auto row = [&](const QuantTensor &m) {
      return QuantTensor({1, d}, std::vector<std::int8_t>(m.row(t).begin(), m.row(t).end()), m.scale);
    };
    decoder_step(row(q), row(k), row(v), cache, 0, ctx, macro);
    keys.emplace_back(k.row(t).begin(), k.row(t).end());
    REQUIRE(cache.length(0) == t + 1);
    for (std::size_t j = 0; j <= t; ++j) CHECK(cache.key(0, j).codes == keys[j]);
  }
  CHECK_THROWS_AS(cache.append(0, QuantTensor({1, d + 1}, 1.0), QuantTensor({1, d + 1}, 1.0)), InvariantViolation);
}

TEST_CASE("multi-head output stays within the composed bound") {
  std::mt19937_64 rng(21);
  const std::size_t n = 64, d = 64, h = 2, dh = d / h;
  auto x = random_tensor(rng, n, d, 1.0 / 127);
  auto w = random_weights(rng, d, h);
  for (auto flow : kFlows) {
    auto r = multi_head_attention(x, x, w.w, AttentionKind::SelfEncoder, false, LutSettings{}, flow);
    std::vector<std::vector<double>> rows;
    std::vector<double> concat(n * d);
    for (std::size_t i = 0; i < h; ++i) {
      const auto &p = r.projected[i];
      rows.push_back(head_row_bounds(r.heads[i], p.v, r.contexts[i], false));
      auto ref = oracle::head_attention(dequantized(p.q), dequantized(p.k), dequantized(p.v), n, n, dh, false);
      for (std::size_t t = 0; t < n; ++t)
        for (std::size_t c = 0; c < dh; ++c) concat[t * d + i * dh + c] = ref.out[t * dh + c];
    }
    auto bounds = output_bounds(rows, dh, w.w.wo, r.concat.scale, r.out.scale);
    std::size_t violations = 0;
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t c = 0; c < d; ++c) {
        double ref = 0;
        for (std::size_t k = 0; k < d; ++k) ref += concat[t * d + k] * w.wo[k * d + c];
        violations += std::abs(r.out.at(t, c) * r.out.scale - ref) > bounds[t * d + c];
      }
    CHECK(violations == 0);
  }
}

TEST_CASE("cross attention checks head widths and handles unequal lengths") {
  std::mt19937_64 rng(22);
  auto q = random_tensor(rng, 10, 32, 0.02), k = random_tensor(rng, 37, 32, 0.02), v = random_tensor(rng, 37, 32, 0.03);
  CimMacro macro;
  auto r = encoder_decoder_attention(q, k, v, context_for(q, k, false, SoftmaxFlow::NormalizeThenMatmul), macro);
  CHECK(r.out.shape == Shape{10, 32});
  auto bad = random_tensor(rng, 37, 16, 0.02);
  CHECK_THROWS_AS(encoder_decoder_attention(q, bad, bad, context_for(q, q, false, SoftmaxFlow::NormalizeThenMatmul), macro),
                  InvariantViolation);
}

TEST_CASE("config validation names the field") {
  AttentionConfig c;
  c.d_model = 64;
  c.n_heads = 3;
  try {
    c.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError &e) {
    CHECK(e.field() == "$.h");
  }
  c.n_heads = 4;
  c.mode = AttentionMode::DecoderOnly;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.causal = true;
  CHECK_NOTHROW(c.validate());
}
