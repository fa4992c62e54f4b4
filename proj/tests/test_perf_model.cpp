#include <random>

#include "cimsim/error.hpp"
#include "cimsim/perf_model.hpp"
#include "doctest.h"

using namespace cimsim;

namespace {

AttentionConfig make_cfg(std::size_t n, std::size_t d, std::size_t h, AttentionMode mode = AttentionMode::EncoderOnly) {
  AttentionConfig c;
  c.n_tokens = n;
  c.d_model = d;
  c.n_heads = h;
  c.mode = mode;
  c.causal = mode == AttentionMode::DecoderOnly;
  c.n_enc = mode == AttentionMode::EncoderDecoder ? n + 7 : 0;
  return c;
}

std::vector<AttentionConfig> sample_configs() {
  std::vector<AttentionConfig> out;
  for (auto mode : {AttentionMode::EncoderOnly, AttentionMode::DecoderOnly, AttentionMode::EncoderDecoder})
    for (auto [n, d, h] : {std::tuple{1u, 64u, 1u}, std::tuple{37u, 64u, 2u}, std::tuple{130u, 128u, 2u}})
      out.push_back(make_cfg(n, d, h, mode));
  auto c = make_cfg(90, 96, 3);
  c.causal = true;
  c.flow = SoftmaxFlow::DeferredNormalization;
  out.push_back(c);
  return out;
}

QuantTensor random_tensor(std::mt19937_64 &rng, std::size_t r, std::size_t c, double scale) {
  QuantTensor t({r, c}, scale);
  for (auto &v : t.codes) v = static_cast<std::int8_t>(rng() >> 56);
  return t;
}

} // namespace

TEST_CASE("beats round up to whole 512-bit words") {
  CHECK(beats(0, 32) == 0);
  CHECK(beats(1, 32) == 1);
  CHECK(beats(16, 32) == 1);
  CHECK(beats(17, 32) == 2);
  CHECK(beats(64, 8) == 1);
  CHECK(beats(1024 * 1024, 32) == 65536);
}

TEST_CASE("a single token leaves nothing to overlap") {
  for (auto scope : {Scope::A2A, Scope::Full}) {
    auto r = compare_latency(1, 64, CostModel{}, scope);
    CHECK(r.split.total_latency_cycles == r.nonsplit.total_latency_cycles);
  }
}

TEST_CASE("split softmax shortens the N=1024, d_head=64 activation-to-activation latency by about a third") {
  auto r = compare_latency(1024, 64, CostModel{});
  CHECK(r.split.total_latency_cycles <= 0.70 * r.nonsplit.total_latency_cycles);
  CHECK(r.reduction == doctest::Approx(0.333).epsilon(0.05));
  CHECK(r.reduction <= r.softmax_share);
  CHECK(r.sensitivity.size() == 12);
  CHECK(r.sensitivity_ok());
}

TEST_CASE("a2a cycles grow quadratically in N") {
  for (auto pipe : {Pipeline::SplitLut, Pipeline::NonSplitBaseline}) {
    const auto a = schedule_attention(make_cfg(256, 64, 1), CostModel{}, pipe, Scope::A2A);
    const auto b = schedule_attention(make_cfg(512, 64, 1), CostModel{}, pipe, Scope::A2A);
    const double ratio = static_cast<double>(b.total_latency_cycles) / a.total_latency_cycles;
    CHECK(ratio > 3.5);
    CHECK(ratio < 4.5);
  }
}

TEST_CASE("total latency lies between the longest stage and the sum of stages") {
  for (const auto &cfg : sample_configs())
    for (auto pipe : {Pipeline::SplitLut, Pipeline::NonSplitBaseline})
      for (auto scope : {Scope::A2A, Scope::Full}) {
        auto r = schedule_attention(cfg, CostModel{}, pipe, scope);
        CHECK(r.total_latency_cycles >= r.max_stage());
        CHECK(r.total_latency_cycles <= r.stage_sum());
        CHECK(r.pipeline_overlap_cycles == r.stage_sum() - r.total_latency_cycles);
        for (double u : r.partition_utilization) {
          CHECK(u >= 0.0);
          CHECK(u <= 1.0);
        }
      }
}

TEST_CASE("raising any cost never shortens the schedule") {
  const char *fields[] = {"cycles_per_matvec",  "write_beats_per_row", "softmax_lut_read",
                          "nonsplit_softmax_read_passes", "nonsplit_input_width", "quantize_cycles"};
  for (const auto &cfg : sample_configs())
    for (auto pipe : {Pipeline::SplitLut, Pipeline::NonSplitBaseline}) {
      const auto base = schedule_attention(cfg, CostModel{}, pipe);
      for (const char *f : fields) {
        auto j = CostModel{}.to_json();
        j[f] = j[f].get<std::uint64_t>() + 3;
        const auto more = schedule_attention(cfg, CostModel::from_json(j, CostModel{}), pipe);
        CHECK(more.total_latency_cycles >= base.total_latency_cycles);
      }
    }
}

TEST_CASE("schedules respect dependencies, resources and bank exclusivity") {
  for (const auto &cfg : sample_configs())
    for (auto pipe : {Pipeline::SplitLut, Pipeline::NonSplitBaseline}) {
      const auto prog = build_attention_program(cfg, pipe, Scope::Full);
      const auto s = schedule_program(prog, CostModel{});
      auto problem = check_schedule(prog, s);
      CHECK_MESSAGE(!problem, problem.value_or(""));
    }
}

TEST_CASE("a schedule that starts a job early is caught") {
  const auto prog = build_attention_program(make_cfg(64, 64, 1), Pipeline::SplitLut, Scope::A2A);
  auto s = schedule_program(prog, CostModel{});
  std::size_t av = 0;
  for (const auto &j : prog.jobs)
    if (j.kind == JobKind::Av) av = j.id;
  s.start[av] = 0;
  CHECK(check_schedule(prog, s).has_value());
}

TEST_CASE("executing jobs in scheduled start order yields the same bytes") {
  std::mt19937_64 rng(5);
  const std::size_t n = 100, d = 64;
  auto q = random_tensor(rng, n, d, 0.01), k = random_tensor(rng, n, d, 0.01), v = random_tensor(rng, n, d, 0.02);
  for (auto flow : {SoftmaxFlow::NormalizeThenMatmul, SoftmaxFlow::DeferredNormalization})
    for (auto res : {Residency::QueryResident, Residency::KeyResident}) {
      auto ctx = make_head_context(q, k, false, LutSettings{}, flow);
      A2aShape shape{n, n, d, 0, false, flow, Pipeline::SplitLut, res};
      const auto prog = build_a2a_program(shape);
      const auto s = schedule_program(prog, CostModel{});
      CimMacro m1, m2;
      auto natural = execute_a2a(prog, prog.natural_order(), shape, q, k, v, ctx, m1);
      auto timed = execute_a2a(prog, start_order(s), shape, q, k, v, ctx, m2);
      CHECK(natural.out.codes == timed.out.codes);
    }
}

TEST_CASE("split and non-split reports differ") {
  auto cfg = make_cfg(128, 64, 2);
  auto a = schedule_attention(cfg, CostModel{}, Pipeline::SplitLut);
  auto b = schedule_attention(cfg, CostModel{}, Pipeline::NonSplitBaseline);
  CHECK(a.to_json() != b.to_json());
  CHECK(a.total_latency_cycles < b.total_latency_cycles);
}

TEST_CASE("op counts follow the closed forms") {
  auto cfg = make_cfg(1024, 64, 1);
  auto o = count_ops(cfg);
  CHECK(o.qk_mults == 67108864ull);
  CHECK(o.av_mults == 67108864ull);
  const std::uint64_t n = 1024, d = 64;
  CHECK(o.dense_ops() == 2 * (3 * n * d * d + 2 * n * n * d + n * d * d));
  CHECK(o.exp_lut_reads == n * n);
  CHECK(o.recip_lut_reads == n);
  CHECK(o.effective_ops({}) == doctest::Approx(static_cast<double>(o.dense_ops())));
  CHECK(o.effective_ops({0.5, 0.0}) == doctest::Approx(o.activation_ops() * 0.5 + o.weight_ops()));
}

TEST_CASE("efficiency proxy tracks sparsity linearly") {
  auto o = count_ops(make_cfg(256, 64, 2));
  EnergyCosts no_lut{1.0, 1.0, 0.0};
  auto hi = efficiency_proxy(o, {0.875, 0.875}, 1000, no_lut);
  auto lo = efficiency_proxy(o, {0.5, 0.5}, 1000, no_lut);
  CHECK(hi.ops_per_proxy_energy / lo.ops_per_proxy_energy == doctest::Approx(4.0));
  CHECK(hi.ops_per_cycle == lo.ops_per_cycle);

  auto more_lut = o;
  more_lut.exp_lut_reads *= 10;
  CHECK(efficiency_proxy(more_lut, {0.5, 0.5}, 1000, no_lut).ops_per_proxy_energy ==
        doctest::Approx(lo.ops_per_proxy_energy));

  double prev = 0;
  for (double s : {0.0, 0.25, 0.5, 0.75}) {
    auto p = efficiency_proxy(o, {s, s}, 1000, EnergyCosts{});
    CHECK(p.ops_per_proxy_energy > prev);
    prev = p.ops_per_proxy_energy;
  }
  CHECK_THROWS_AS(efficiency_proxy(o, {1.5, 0.0}, 1, EnergyCosts{}), ConfigError);
}

TEST_CASE("cost model overrides are validated") {
  CHECK_THROWS_AS(CostModel::from_json({{"cycles_per_matvec", 0}}, CostModel{}), ConfigError);
  CHECK_THROWS_AS(CostModel::from_json({{"bogus", 1}}, CostModel{}), ConfigError);
  CHECK_THROWS_AS(CostModel::from_json({{"quantize_cycles", -2}}, CostModel{}), ConfigError);
  auto c = CostModel::from_json({{"nonsplit_input_width", 16}}, CostModel{});
  CHECK(c.nonsplit_input_width == 16);
  CHECK(c.cycles_per_matvec == 8);
  auto again = CostModel::from_json(c.to_json(), CostModel{});
  CHECK(again.to_json() == c.to_json());
}
