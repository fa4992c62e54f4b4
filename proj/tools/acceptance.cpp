// SPDX-License-Identifier: Apache-2.0
// Acceptance gate: one PASS/FAIL line per criterion, exit status 0 only when
// all pass. Lines starting with two spaces are informational.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <unistd.h>

#include "cimsim/attention.hpp"
#include "cimsim/cim_core.hpp"
#include "cimsim/error_budget.hpp"
#include "cimsim/harness.hpp"
#include "cimsim/perf_model.hpp"
#include "cimsim/softmax.hpp"
#include "cimsim_oracles/oracles.hpp"

using namespace cimsim;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Score scale for the fixed-mode budget. Per-head calibration on generated
// workloads lands between 0.003 and 0.0055; this is about twice that.
constexpr double kFixedBudgetScale = 0.01;

struct Outcome {
  Outcome() = default;
  Outcome(bool p, std::string d) : pass(p), detail(std::move(d)) {}

  bool pass = false;
  std::string detail;
  std::vector<std::string> notes;
};

std::int8_t rand_code(std::mt19937_64 &rng) { return static_cast<std::int8_t>(static_cast<std::uint8_t>(rng() >> 56)); }

std::string slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Files present in either directory whose bytes differ (or that exist in only one).
std::vector<std::string> diff_dirs(const fs::path &a, const fs::path &b, const std::string &ext = "") {
  std::set<std::string> names;
  for (const auto &d : {a, b})
    for (const auto &e : fs::directory_iterator(d))
      if (ext.empty() || e.path().extension() == ext) names.insert(e.path().filename().string());
  std::vector<std::string> bad;
  for (const auto &n : names)
    if (!fs::exists(a / n) || !fs::exists(b / n) || slurp(a / n) != slurp(b / n)) bad.push_back(n);
  return bad;
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

Outcome mac_exactness() {
  std::mt19937_64 rng(101);
  CimMacro macro;
  std::uint64_t pairs = 0, mismatches = 0;

  // Random pairs, 64 lanes per matvec on a single partition.
  while (pairs < 100000) {
    std::vector<std::int8_t> w(kLanes), a(kLanes);
    for (auto &v : w) v = rand_code(rng);
    for (auto &v : a) v = rand_code(rng);
    macro.write_weights(0, 0, w);
    if (macro.partition(0).slots_filled() == kAccSlots) macro.cycle_output(0);
    const auto got = macro.matvec_int8(0, 0, a);
    const auto want = oracle::gemm_abt(std::vector<int>(a.begin(), a.end()), std::vector<int>(w.begin(), w.end()), 1,
                                       1, kLanes)[0];
    mismatches += got != want;
    pairs += kLanes;
  }

  // Tiled products of assorted shapes.
  macro = CimMacro{};
  std::uint64_t tiled_pairs = 0;
  for (auto [m, r, k] : {std::tuple{64u, 32u, 64u}, std::tuple{70u, 45u, 130u}, std::tuple{1u, 100u, 200u},
                         std::tuple{129u, 33u, 65u}, std::tuple{200u, 64u, 96u}}) {
    QuantTensor streamed({m, k}, 1.0), stored({r, k}, 1.0);
    for (auto &v : streamed.codes) v = rand_code(rng);
    for (auto &v : stored.codes) v = rand_code(rng);
    const auto out = tiled_matmul(macro, plan_tiled_matmul(r, m, k), stored, streamed);
    const auto want = oracle::gemm_abt(std::vector<int>(streamed.codes.begin(), streamed.codes.end()),
                                       std::vector<int>(stored.codes.begin(), stored.codes.end()), m, r, k);
    for (std::size_t i = 0; i < want.size(); ++i) mismatches += out.values[i] != want[i];
    tiled_pairs += std::uint64_t{m} * r * k;
  }

  // Every (weight, activation) combination on one lane.
  std::uint64_t sweep = 0;
  for (int w = -128; w <= 127; ++w) {
    macro.write_weights(0, w & 1, std::vector<std::int8_t>{static_cast<std::int8_t>(w)});
    for (int a = -128; a <= 127; ++a) {
      if (macro.partition(0).slots_filled() == kAccSlots) macro.cycle_output(0);
      const auto got = macro.matvec_int8(0, w & 1, std::vector<std::int8_t>{static_cast<std::int8_t>(a)});
      mismatches += got != oracle::gemm_abt({a}, {w}, 1, 1, 1)[0];
      ++sweep;
    }
  }
  return {mismatches == 0 && sweep == 65536,
          std::to_string(pairs) + " random pairs, " + std::to_string(tiled_pairs) + " tiled MACs, " +
              std::to_string(sweep) + " exhaustive; mismatches " + std::to_string(mismatches)};
}

Outcome nibble_roundtrip() {
  CimMacro macro;
  int bad = 0;
  for (int w = -128; w <= 127; ++w) {
    const auto code = static_cast<std::int8_t>(w);
    const auto n = split_weight(code);
    bad += join_weight(n) != code || n.msb < -8 || n.msb > 7 || n.lsb > 15 || (n.msb * 16 + n.lsb) != w;
    const std::size_t p = static_cast<std::size_t>(w + 128) % kPartitions;
    const int bank = (w + 128) / kPartitions % 2;
    macro.write_weights(p, bank, std::vector<std::int8_t>(kLanes, code));
    for (std::size_t lane = 0; lane < kLanes; ++lane) bad += macro.read_weight(p, bank, lane) != code;
  }
  return {bad == 0, "256 weights through MSB/LSB storage; mismatches " + std::to_string(bad)};
}

// Rows of random length in [1, 1024] pooled into one evaluation.
SoftmaxEval pooled_rows(std::size_t rows, std::uint64_t seed, const LutEntryMode &mode,
                        const std::function<double(std::mt19937_64 &)> &scale) {
  std::mt19937_64 rng(seed);
  SoftmaxEval acc;
  for (std::size_t i = 0; i < rows; ++i) {
    const std::size_t n = 1 + rng() % 1024;
    const double s = scale(rng);
    accumulate(acc, evaluate_softmax(n, s, mode, rng(), 1));
  }
  return acc;
}

Outcome exact_softmax() {
  // Scales log-uniform over [1e-3, 1e-1].
  const auto ev = pooled_rows(10000, 303, LutEntryMode::exact(), [](std::mt19937_64 &rng) {
    return std::pow(10.0, -3.0 + 2.0 * std::uniform_real_distribution<double>(0, 1)(rng));
  });
  return {ev.rows == 10000 && ev.max_abs_error <= 1e-9,
          std::to_string(ev.rows) + " rows, max abs error " + fmt(ev.max_abs_error) + " (limit 1e-9)"};
}

Outcome fixed_budget() {
  const auto fixed = LutEntryMode::fixed(kDefaultExpLutFormat);
  auto at = [&](double s, std::size_t rows) {
    return pooled_rows(rows, 404, fixed, [s](std::mt19937_64 &) { return s; });
  };
  const auto ev = at(kFixedBudgetScale, 10000);
  Outcome o;
  o.pass = ev.violations == 0 && ev.row_sum_max_deviation <= 0.05 && ev.argmax_rate() >= 0.99;
  o.detail = "s=" + fmt(kFixedBudgetScale) + ", " + std::to_string(ev.rows) + " rows: budget violations " +
             std::to_string(ev.violations) + ", max abs error " + fmt(ev.max_abs_error) + ", row-sum deviation " +
             fmt(ev.row_sum_max_deviation) + ", argmax " + std::to_string(ev.argmax_agree) + "/" +
             std::to_string(ev.argmax_rows);

  // Informational: larger scales, and every length-2 row. Short rows whose
  // maximum sits far below z_quant_max can exceed the budget.
  for (double s : {0.02, 0.05}) {
    const auto e = at(s, 2000);
    o.notes.push_back("info s=" + fmt(s) + ", " + std::to_string(e.rows) + " rows: budget violations " +
                      std::to_string(e.violations) + ", max abs error " + fmt(e.max_abs_error) + ", argmax " +
                      std::to_string(e.argmax_agree) + "/" + std::to_string(e.argmax_rows));
  }
  for (double s : {0.005, kFixedBudgetScale}) {
    const auto lut = ExpLut::build(s, fixed);
    const auto recip = RecipLut::build();
    const double bound = row_probability_bound(2);
    int bad = 0;
    for (int a = -128; a <= 127; ++a)
      for (int b = -128; b <= 127; ++b) {
        const std::vector<std::int8_t> z{static_cast<std::int8_t>(a), static_cast<std::int8_t>(b)};
        const auto r = stream_split_softmax_row(z, lut, recip);
        const auto ref = oracle::softmax({a * s, b * s});
        double err = 0;
        for (int i = 0; i < 2; ++i)
          err = std::max({err, std::abs(r.probabilities[i] - ref[i]), std::abs(r.probability_codes[i] / 127.0 - ref[i])});
        bad += err > bound;
      }
    o.notes.push_back("info s=" + fmt(s) + ", all 65536 rows of length 2: budget violations " + std::to_string(bad));
  }
  return o;
}

Outcome latency() {
  const auto r = compare_latency(1024, 64, CostModel{});
  std::size_t worst_point = 0;
  double worst_margin = 1.0;
  for (std::size_t i = 0; i < r.sensitivity.size(); ++i) {
    const auto &p = r.sensitivity[i];
    if (p.softmax_share - p.reduction < worst_margin) {
      worst_margin = p.softmax_share - p.reduction;
      worst_point = i;
    }
  }
  Outcome o;
  o.pass = std::abs(r.reduction - 0.33) <= 0.05 && r.sensitivity_ok();
  o.detail = "reduction " + fmt(100 * r.reduction) + "% (split " + std::to_string(r.split.total_latency_cycles) +
             " vs non-split " + std::to_string(r.nonsplit.total_latency_cycles) + " cycles), softmax share " +
             fmt(100 * r.softmax_share) + "%, " + std::to_string(r.sensitivity.size()) +
             " sensitivity points, smallest share-minus-saving " + fmt(worst_margin);
  if (!r.sensitivity.empty()) o.notes.push_back("info tightest sensitivity point: " + r.sensitivity[worst_point].field + " x" + fmt(r.sensitivity[worst_point].factor));
  return o;
}

struct RandomWorkload {
  SimConfig cfg;
  Workload w;
};

RandomWorkload random_workload(std::mt19937_64 &rng, std::size_t max_n, std::size_t max_h) {
  RandomWorkload r;
  const std::size_t h = 1 + rng() % max_h;
  const std::size_t dh = std::size_t{4} << (rng() % 4);
  r.cfg.attn.n_tokens = 1 + rng() % max_n;
  r.cfg.attn.n_heads = h;
  r.cfg.attn.d_model = h * dh;
  r.cfg.attn.flow = rng() % 2 ? SoftmaxFlow::DeferredNormalization : SoftmaxFlow::NormalizeThenMatmul;
  r.cfg.seed = rng();
  r.w = generate_workload(r.cfg);
  return r;
}

Outcome decoder_equivalence() {
  std::mt19937_64 rng(606);
  int mismatches = 0;
  std::size_t tokens = 0;
  for (int i = 0; i < 50; ++i) {
    const auto rw = random_workload(rng, 64, 4);
    const auto &a = rw.cfg.attn;
    const auto w = split_heads(rw.w, a.n_heads);
    const auto dec = multi_head_attention(rw.w.x, rw.w.x, w, AttentionKind::SelfDecoder, true, rw.cfg.luts, a.flow);
    const auto enc = multi_head_attention(rw.w.x, rw.w.x, w, AttentionKind::SelfEncoder, true, rw.cfg.luts, a.flow);
    bool same = dec.out.codes == enc.out.codes && dec.out.scale == enc.out.scale &&
                dec.out_acc.values == enc.out_acc.values;
    for (std::size_t h = 0; h < a.n_heads; ++h)
      same = same && dec.heads[h].out.codes == enc.heads[h].out.codes &&
             dec.heads[h].score_codes == enc.heads[h].score_codes;
    mismatches += !same;
    tokens += a.n_tokens;
  }
  return {mismatches == 0, "50 workloads (" + std::to_string(tokens) + " decoded tokens), mismatching " +
                               std::to_string(mismatches)};
}

Outcome timing_value_separation(const fs::path &tmp) {
  std::mt19937_64 rng(707);
  int value_diffs = 0, same_reports = 0, same_totals = 0;
  const AttentionMode modes[] = {AttentionMode::EncoderOnly, AttentionMode::DecoderOnly,
                                 AttentionMode::EncoderDecoder};
  auto timing = [](json report) {
    report.erase("pipeline");
    return report;
  };
  for (int i = 0; i < 20; ++i) {
    auto rw = random_workload(rng, 64, 4);
    auto cfg = rw.cfg;
    cfg.attn.mode = modes[i % 3];
    cfg.attn.causal = cfg.attn.mode == AttentionMode::DecoderOnly;
    // Rows of 16 keys or fewer fit one softmax beat, where both schedules
    // cost the same.
    cfg.attn.n_tokens = 17 + rng() % 48;
    cfg.attn.n_enc = cfg.attn.mode == AttentionMode::EncoderDecoder ? 17 + rng() % 48 : 0;
    cfg.pipeline = Pipeline::SplitLut;
    const auto a = tmp / ("sep_split_" + std::to_string(i)), b = tmp / ("sep_nonsplit_" + std::to_string(i));
    const auto ra = run_simulation(cfg, a, false);
    cfg.pipeline = Pipeline::NonSplitBaseline;
    const auto rb = run_simulation(cfg, b, false);
    value_diffs += !diff_dirs(a, b, ".cimt").empty();
    same_reports += timing(ra.cycle_report["schedule"]) == timing(rb.cycle_report["schedule"]);
    same_totals += ra.cycle_report["schedule"]["total_latency_cycles"] ==
                   rb.cycle_report["schedule"]["total_latency_cycles"];
  }
  Outcome o{value_diffs == 0 && same_reports == 0,
            "20 workloads: bundles with differing tensors " + std::to_string(value_diffs) +
                ", identical cycle reports " + std::to_string(same_reports)};
  o.notes.push_back("info pairs with equal total latency " + std::to_string(same_totals) +
                    " (decoder steps are bound by K/V reloads through the write port)");
  return o;
}

Outcome sparsity_accounting() {
  AttentionConfig cfg;
  cfg.n_tokens = 1024;
  cfg.d_model = 64;
  cfg.n_heads = 1;
  const auto ops = count_ops(cfg);
  const auto cycles = schedule_attention(cfg, CostModel{}, Pipeline::SplitLut, Scope::Full).total_latency_cycles;
  bool exact = true;
  std::vector<double> eff;
  std::ostringstream ratios;
  for (double s : {0.5, 0.75, 0.875}) {
    const SparsityProfile act{s, 0.0}, both{s, 0.5};
    const double a = ops.effective_ops(act) - static_cast<double>(ops.weight_ops());
    const double wgt = ops.effective_ops(both) - a;
    exact = exact && a == static_cast<double>(ops.activation_ops()) * (1.0 - s) &&
            wgt == static_cast<double>(ops.weight_ops()) * 0.5;
    ratios << " " << a / static_cast<double>(ops.activation_ops());
    eff.push_back(efficiency_proxy(ops, both, cycles, EnergyCosts{}).ops_per_proxy_energy);
  }
  const bool ordered = eff[2] > eff[1] && eff[1] > eff[0];
  return {exact && ordered, "activation effective/dense ratios" + ratios.str() +
                                ", weight 0.5; proxy efficiency 50%/75%/87.5% = " + fmt(eff[0]) + "/" +
                                fmt(eff[1]) + "/" + fmt(eff[2])};
}

Outcome reproducibility(const fs::path &tmp) {
  int diffs = 0;
  int runs = 0;
  const json configs[] = {
      {{"mode", "encoder"}, {"N", 70}, {"d_model", 64}, {"h", 2}, {"seed", 5}},
      {{"mode", "decoder"}, {"N", 40}, {"d_model", 48}, {"h", 3}, {"flow", "deferred"}, {"seed", 6}},
      {{"mode", "encoder_decoder"}, {"N", 24}, {"n_enc", 50}, {"d_model", 32}, {"h", 2}, {"seed", 7}},
  };
  for (const auto &j : configs) {
    const auto cfg = parse_config(j);
    const auto a = tmp / ("repro_a" + std::to_string(runs)), b = tmp / ("repro_b" + std::to_string(runs));
    run_simulation(cfg, a, true);
    run_simulation(cfg, b, true);
    diffs += !diff_dirs(a, b).empty();
    ++runs;
  }
  const json base{{"mode", "encoder"}, {"N", 64}, {"d_model", 64}, {"h", 2}};
  for (const char *vary : {"N=16,128,512", "sparsity.activation=0.5,0.75,0.875", "pipeline=split,nonsplit"}) {
    diffs += run_sweep(base, vary, 1) != run_sweep(base, vary, 4);
    ++runs;
  }
  return {diffs == 0, std::to_string(runs) + " repeated invocations (3 runs, 3 sweeps), differing " +
                          std::to_string(diffs)};
}

} // namespace

int main() {
  const fs::path tmp = fs::temp_directory_path() / ("cimsim_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(tmp);

  struct Criterion {
    const char *name;
    double limit_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {"bit-serial MAC exactness", 60, mac_exactness},
      {"nibble round-trip", 1, nibble_roundtrip},
      {"split softmax, exact mode", 60, exact_softmax},
      {"fixed-mode softmax budget", 120, fixed_budget},
      {"latency reduction", 10, latency},
      {"decoder equals causal encoder", 120, decoder_equivalence},
      {"timing/value separation", 60, [&] { return timing_value_separation(tmp); }},
      {"sparsity accounting", 1, sparsity_accounting},
      {"reproducibility", 300, [&] { return reproducibility(tmp); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto &c = criteria[i];
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception &e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs < c.limit_s;
    const bool pass = o.pass && in_time;
    failed += !pass;
    std::cout << (pass ? "PASS" : "FAIL") << " " << i + 1 << " " << c.name << ": " << o.detail << " ["
              << fmt(secs, 3) << " s, limit " << c.limit_s << " s" << (in_time ? "" : ", TOO SLOW") << "]\n";
    for (const auto &n : o.notes) std::cout << "  " << n << "\n";
    std::cout.flush();
  }
  fs::remove_all(tmp);
  std::cout << (failed ? "FAILED " : "ALL PASSED ") << criteria.size() - failed << "/" << criteria.size() << "\n";
  return failed ? 1 : 0;
}
