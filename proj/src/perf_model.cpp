// SPDX-License-Identifier: Apache-2.0
#include "cimsim/perf_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cimsim/error.hpp"

namespace cimsim {

using nlohmann::json;

namespace {

constexpr std::uint64_t kTermBits = 8;

const char *const kCostFields[] = {"cycles_per_matvec",  "write_beats_per_row", "softmax_lut_read",
                                   "nonsplit_softmax_read_passes", "nonsplit_input_width", "quantize_cycles"};

std::uint64_t &cost_field(CostModel &c, const std::string &name) {
  if (name == "cycles_per_matvec") return c.cycles_per_matvec;
  if (name == "write_beats_per_row") return c.write_beats_per_row;
  if (name == "softmax_lut_read") return c.softmax_lut_read;
  if (name == "nonsplit_softmax_read_passes") return c.nonsplit_softmax_read_passes;
  if (name == "nonsplit_input_width") return c.nonsplit_input_width;
  if (name == "quantize_cycles") return c.quantize_cycles;
  throw ConfigError("$.costs." + name, "unknown cost entry");
}

std::size_t resident_count(const Job &j) {
  switch (j.kind) {
  case JobKind::QkQres:
  case JobKind::QkKres:
  case JobKind::Av: return j.units;
  case JobKind::Matmul: return j.c1 - j.c0;
  default: return 0;
  }
}

} // namespace

void CostModel::validate() const {
  CostModel copy = *this;
  for (const char *f : kCostFields)
    if (cost_field(copy, f) < 1) throw ConfigError(std::string("$.costs.") + f, "must be at least 1 cycle");
  if (!(frequency_mhz > 0.0)) throw ConfigError("$.costs.frequency_mhz", "must be positive");
}

json CostModel::to_json() const {
  json j;
  CostModel copy = *this;
  for (const char *f : kCostFields) j[f] = cost_field(copy, f);
  j["frequency_mhz"] = frequency_mhz;
  return j;
}

CostModel CostModel::from_json(const json &j, const CostModel &base) {
  if (!j.is_object()) throw ConfigError("$.costs", "must be an object");
  CostModel c = base;
  for (const auto &[key, value] : j.items()) {
    if (key == "frequency_mhz") {
      if (!value.is_number()) throw ConfigError("$.costs.frequency_mhz", "must be a number");
      c.frequency_mhz = value.get<double>();
      continue;
    }
    auto &field = cost_field(c, key);
    if (!value.is_number_integer() || value.get<std::int64_t>() < 1)
      throw ConfigError("$.costs." + key, "must be a positive integer");
    field = value.get<std::uint64_t>();
  }
  c.validate();
  return c;
}

std::uint64_t beats(std::uint64_t count, std::uint64_t width) {
  return (count * width + kSoftmaxDatapathBits - 1) / kSoftmaxDatapathBits;
}

std::uint64_t job_cycles(const Job &j, const CostModel &c) {
  const std::uint64_t rows = j.r1 - j.r0, cols = j.c1 - j.c0;
  std::uint64_t t = 0;
  switch (j.kind) {
  case JobKind::QkQres: t = cols * c.cycles_per_matvec; break;
  case JobKind::QkKres:
  case JobKind::Av: t = rows * c.cycles_per_matvec; break;
  case JobKind::Matmul: t = j.units * c.cycles_per_matvec; break;
  case JobKind::Load: t = j.units * c.write_beats_per_row; break;
  case JobKind::SmPush:
    t = beats(rows * cols, kScoreBits) * c.quantize_cycles + beats(rows * cols, kTermBits) * c.softmax_lut_read;
    break;
  case JobKind::SmFinal: t = rows * c.softmax_lut_read; break;
  case JobKind::SmNorm: t = rows * beats(cols, kTermBits) * c.quantize_cycles; break;
  case JobKind::SmAll:
    t = c.nonsplit_softmax_read_passes * beats(rows * cols, c.nonsplit_input_width) * c.softmax_lut_read +
        beats(rows * cols, kScoreBits) * c.quantize_cycles;
    break;
  case JobKind::Out: t = beats(rows * j.units, kScoreBits) * c.quantize_cycles; break;
  }
  return std::max<std::uint64_t>(t, 1);
}

// ---------------------------------------------------------------------------
// op counts

void SparsityProfile::validate() const {
  if (!(activation >= 0.0 && activation <= 1.0)) throw ConfigError("$.sparsity.activation", "must be in [0, 1]");
  if (!(weight >= 0.0 && weight <= 1.0)) throw ConfigError("$.sparsity.weight", "must be in [0, 1]");
}

std::uint64_t OpCounts::activation_ops() const { return 2 * (qk_mults + av_mults); }
std::uint64_t OpCounts::weight_ops() const { return 2 * (projection_mults + concat_mults); }
std::uint64_t OpCounts::dense_ops() const { return activation_ops() + weight_ops(); }

double OpCounts::effective_ops(const SparsityProfile &s) const {
  return static_cast<double>(activation_ops()) * (1.0 - s.activation) +
         static_cast<double>(weight_ops()) * (1.0 - s.weight);
}

json OpCounts::to_json(const SparsityProfile &s) const {
  return json{{"projection_multiplies", projection_mults},
              {"qkT_multiplies", qk_mults},
              {"aV_multiplies", av_mults},
              {"concat_multiplies", concat_mults},
              {"multiplies", projection_mults + qk_mults + av_mults + concat_mults},
              {"adds", projection_mults + qk_mults + av_mults + concat_mults},
              {"dense_ops", dense_ops()},
              {"effective_ops", effective_ops(s)},
              {"lut_reads", lut_reads()},
              {"exp_lut_reads", exp_lut_reads},
              {"recip_lut_reads", recip_lut_reads}};
}

namespace {

void add_self(OpCounts &o, std::uint64_t n, std::uint64_t d, std::uint64_t h, bool causal, bool decoder) {
  const std::uint64_t pairs = decoder ? n * (n + 1) / 2 : n * n;
  const std::uint64_t pushed = causal ? n * (n + 1) / 2 : n * n;
  o.projection_mults += 3 * n * d * d;
  o.qk_mults += pairs * d;
  o.av_mults += pairs * d;
  o.concat_mults += n * d * d;
  o.exp_lut_reads += pushed * h;
  o.recip_lut_reads += n * h;
}

} // namespace

OpCounts count_ops(const AttentionConfig &cfg) {
  cfg.validate();
  OpCounts o;
  const std::uint64_t n = cfg.n_tokens, d = cfg.d_model, h = cfg.n_heads;
  switch (cfg.mode) {
  case AttentionMode::EncoderOnly: add_self(o, n, d, h, cfg.causal, false); break;
  case AttentionMode::DecoderOnly: add_self(o, n, d, h, true, true); break;
  case AttentionMode::EncoderDecoder: {
    const std::uint64_t ne = cfg.n_enc;
    add_self(o, ne, d, h, false, false);
    add_self(o, n, d, h, true, true);
    o.projection_mults += n * d * d + 2 * ne * d * d;
    o.qk_mults += n * ne * d;
    o.av_mults += n * ne * d;
    o.concat_mults += n * d * d;
    o.exp_lut_reads += n * ne * h;
    o.recip_lut_reads += n * h;
    break;
  }
  }
  return o;
}

EfficiencyProxy efficiency_proxy(const OpCounts &ops, const SparsityProfile &s, std::uint64_t cycles,
                                 const EnergyCosts &e) {
  s.validate();
  if (e.mult < 0 || e.add < 0 || e.lut_read < 0) throw ConfigError("$.energy", "costs must be non-negative");
  const double mults = static_cast<double>(ops.qk_mults + ops.av_mults) * (1.0 - s.activation) +
                       static_cast<double>(ops.projection_mults + ops.concat_mults) * (1.0 - s.weight);
  const double energy = mults * (e.mult + e.add) + static_cast<double>(ops.lut_reads()) * e.lut_read;
  const double dense = static_cast<double>(ops.dense_ops());
  EfficiencyProxy p;
  p.ops_per_cycle = cycles ? dense / static_cast<double>(cycles) : 0.0;
  p.ops_per_proxy_energy = energy > 0 ? dense / energy : 0.0;
  return p;
}

// ---------------------------------------------------------------------------
// scheduling

std::string to_string(Scope s) { return s == Scope::A2A ? "a2a" : "full"; }

Schedule schedule_program(const Program &prog, const CostModel &c) {
  Schedule s;
  s.start.resize(prog.jobs.size());
  s.end.resize(prog.jobs.size());
  std::array<std::uint64_t, 3> free{};
  for (const auto &j : prog.jobs) {
    auto &res = free[static_cast<std::size_t>(j.resource)];
    std::uint64_t t = res;
    for (auto d : j.deps) {
      if (d >= j.id) throw InvariantViolation("job " + std::to_string(j.id) + " depends on a later job");
      t = std::max(t, s.end[d]);
    }
    s.start[j.id] = t;
    s.end[j.id] = res = t + job_cycles(j, c);
    s.total = std::max(s.total, s.end[j.id]);
  }
  return s;
}

std::optional<std::string> check_schedule(const Program &prog, const Schedule &s) {
  if (s.start.size() != prog.jobs.size()) return "schedule size does not match the program";
  for (const auto &j : prog.jobs)
    for (auto d : j.deps)
      if (s.end[d] > s.start[j.id])
        return "job " + std::to_string(j.id) + " (" + to_string(j.kind) + ") starts at " +
               std::to_string(s.start[j.id]) + " before job " + std::to_string(d) + " ends at " +
               std::to_string(s.end[d]);
  std::array<std::vector<std::size_t>, 3> by_res;
  std::array<std::vector<std::size_t>, 2> loads, computes;
  for (const auto &j : prog.jobs) {
    by_res[static_cast<std::size_t>(j.resource)].push_back(j.id);
    if (j.kind == JobKind::Load) loads[j.bank].push_back(j.id);
    else if (j.resource == Resource::Cim) computes[j.bank].push_back(j.id);
  }
  for (std::size_t r = 0; r < 3; ++r) {
    auto &ids = by_res[r];
    std::sort(ids.begin(), ids.end(), [&](auto a, auto b) { return s.start[a] < s.start[b]; });
    for (std::size_t i = 1; i < ids.size(); ++i)
      if (s.start[ids[i]] < s.end[ids[i - 1]])
        return to_string(static_cast<Resource>(r)) + " runs jobs " + std::to_string(ids[i - 1]) + " and " +
               std::to_string(ids[i]) + " at once";
  }
  for (int b = 0; b < 2; ++b) {
    auto &c = computes[b];
    std::sort(c.begin(), c.end(), [&](auto x, auto y) { return s.start[x] < s.start[y]; });
    for (auto l : loads[b]) {
      auto it = std::lower_bound(c.begin(), c.end(), s.end[l], [&](auto id, auto t) { return s.start[id] < t; });
      if (it != c.begin() && s.end[*std::prev(it)] > s.start[l])
        return "bank " + std::to_string(b) + " written by job " + std::to_string(l) + " while job " +
               std::to_string(*std::prev(it)) + " reads it";
    }
  }
  return std::nullopt;
}

std::vector<std::size_t> start_order(const Schedule &s) {
  std::vector<std::size_t> o(s.start.size());
  std::iota(o.begin(), o.end(), 0);
  std::stable_sort(o.begin(), o.end(), [&](auto a, auto b) { return s.start[a] < s.start[b]; });
  return o;
}

// ---------------------------------------------------------------------------
// programs for whole attention layers

namespace {

struct Block {
  std::size_t q_rows, kv_rows; // tokens projected this block
  A2aShape shape;
  std::size_t step = 0;
};

std::vector<std::size_t> append_heads(Program &prog, BankCursor &banks, const AttentionConfig &cfg, const Block &b,
                                      Scope scope, const std::vector<std::size_t> &entry) {
  const std::size_t dh = cfg.d_head();
  std::vector<std::size_t> outs;
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    std::vector<std::size_t> head_entry = entry;
    if (scope == Scope::Full) {
      std::vector<std::size_t> ids;
      for (int m = 0; m < 3; ++m) {
        const auto plan = plan_tiled_matmul(dh, m == 0 ? b.q_rows : b.kv_rows, cfg.d_model);
        auto add = append_matmul_jobs(prog, plan, Stage::WeightProjection, h, entry, banks);
        ids.insert(ids.end(), add.begin(), add.end());
      }
      head_entry = {ids.back()};
    }
    auto o = append_a2a_jobs(prog, b.shape, h, b.step, head_entry, banks);
    outs.insert(outs.end(), o.begin(), o.end());
  }
  if (scope == Scope::Full) {
    const auto plan = plan_tiled_matmul(cfg.d_model, b.q_rows, cfg.d_model);
    auto ids = append_matmul_jobs(prog, plan, Stage::Concat, 0, outs, banks);
    return {ids.back()};
  }
  return outs;
}

std::vector<std::size_t> append_decoder(Program &prog, BankCursor &banks, const AttentionConfig &cfg,
                                        Pipeline pipeline, Scope scope, std::vector<std::size_t> entry) {
  for (std::size_t n = 0; n < cfg.n_tokens; ++n) {
    Block b{1, 1, {1, n + 1, cfg.d_head(), n, true, cfg.flow, pipeline, Residency::KeyResident}, n};
    entry = append_heads(prog, banks, cfg, b, scope, entry);
  }
  return entry;
}

} // namespace

Program build_attention_program(const AttentionConfig &cfg, Pipeline pipeline, Scope scope) {
  cfg.validate();
  Program prog;
  BankCursor banks;
  const std::size_t n = cfg.n_tokens, dh = cfg.d_head();
  switch (cfg.mode) {
  case AttentionMode::EncoderOnly: {
    Block b{n, n, {n, n, dh, 0, cfg.causal, cfg.flow, pipeline, Residency::QueryResident}, 0};
    append_heads(prog, banks, cfg, b, scope, {});
    break;
  }
  case AttentionMode::DecoderOnly: append_decoder(prog, banks, cfg, pipeline, scope, {}); break;
  case AttentionMode::EncoderDecoder: {
    const std::size_t ne = cfg.n_enc;
    Block enc{ne, ne, {ne, ne, dh, 0, false, cfg.flow, pipeline, Residency::QueryResident}, 0};
    auto enc_out = append_heads(prog, banks, cfg, enc, scope, {});
    auto dec_out = append_decoder(prog, banks, cfg, pipeline, scope, {});
    enc_out.insert(enc_out.end(), dec_out.begin(), dec_out.end());
    Block cross{n, ne, {n, ne, dh, 0, false, cfg.flow, pipeline, Residency::KeyResident}, 0};
    append_heads(prog, banks, cfg, cross, scope, enc_out);
    break;
  }
  }
  return prog;
}

std::uint64_t CycleReport::stage_sum() const {
  return std::accumulate(stage_cycles.begin(), stage_cycles.end(), std::uint64_t{0});
}

std::uint64_t CycleReport::max_stage() const { return *std::max_element(stage_cycles.begin(), stage_cycles.end()); }

json CycleReport::to_json() const {
  json stages, busy;
  for (std::size_t i = 0; i < kStageCount; ++i) stages[to_string(static_cast<Stage>(i))] = stage_cycles[i];
  for (std::size_t i = 0; i < 3; ++i) busy[to_string(static_cast<Resource>(i))] = resource_busy[i];
  return json{{"pipeline", to_string(pipeline)},
              {"scope", to_string(scope)},
              {"stage_cycles", stages},
              {"resource_busy_cycles", busy},
              {"total_latency_cycles", total_latency_cycles},
              {"pipeline_overlap_cycles", pipeline_overlap_cycles},
              {"latency_us", latency_us()},
              {"partition_utilization", partition_utilization},
              {"op_counts", ops.to_json()},
              {"cost_model", costs.to_json()}};
}

CycleReport report_for(const Program &prog, const Schedule &s, const AttentionConfig &cfg, Pipeline pipeline,
                       Scope scope, const CostModel &c) {
  CycleReport r;
  r.pipeline = pipeline;
  r.scope = scope;
  r.costs = c;
  r.ops = count_ops(cfg);
  r.total_latency_cycles = s.total;
  std::vector<std::uint64_t> part_busy(kPartitions, 0);
  for (const auto &j : prog.jobs) {
    const auto t = s.end[j.id] - s.start[j.id];
    r.stage_cycles[static_cast<std::size_t>(j.stage)] += t;
    r.resource_busy[static_cast<std::size_t>(j.resource)] += t;
    for (std::size_t p = 0; p < std::min(resident_count(j), kPartitions); ++p) part_busy[p] += t;
  }
  r.pipeline_overlap_cycles = r.stage_sum() - r.total_latency_cycles;
  for (auto b : part_busy) r.partition_utilization.push_back(s.total ? static_cast<double>(b) / s.total : 0.0);
  return r;
}

CycleReport schedule_attention(const AttentionConfig &cfg, const CostModel &c, Pipeline pipeline, Scope scope) {
  c.validate();
  const auto prog = build_attention_program(cfg, pipeline, scope);
  return report_for(prog, schedule_program(prog, c), cfg, pipeline, scope, c);
}

// ---------------------------------------------------------------------------
// split vs non-split

bool LatencyComparison::sensitivity_ok() const {
  return std::all_of(sensitivity.begin(), sensitivity.end(), [](const auto &p) { return p.within_share(); });
}

json LatencyComparison::to_json() const {
  json sens = json::array();
  for (const auto &p : sensitivity)
    sens.push_back({{"field", p.field},
                    {"factor", p.factor},
                    {"split_cycles", p.split_cycles},
                    {"nonsplit_cycles", p.nonsplit_cycles},
                    {"reduction", p.reduction},
                    {"softmax_share", p.softmax_share},
                    {"saving_within_softmax_share", p.within_share()}});
  return json{{"split", split.to_json()},
              {"nonsplit", nonsplit.to_json()},
              {"reduction", reduction},
              {"nonsplit_softmax_share", softmax_share},
              {"sensitivity", sens},
              {"sensitivity_ok", sensitivity_ok()}};
}

namespace {

SensitivityPoint point(const AttentionConfig &cfg, const CostModel &c, Scope scope) {
  SensitivityPoint p;
  const auto s = schedule_attention(cfg, c, Pipeline::SplitLut, scope);
  const auto ns = schedule_attention(cfg, c, Pipeline::NonSplitBaseline, scope);
  p.split_cycles = s.total_latency_cycles;
  p.nonsplit_cycles = ns.total_latency_cycles;
  p.reduction = 1.0 - static_cast<double>(p.split_cycles) / static_cast<double>(p.nonsplit_cycles);
  p.softmax_share = static_cast<double>(ns.stage(Stage::Softmax)) / static_cast<double>(p.nonsplit_cycles);
  return p;
}

} // namespace

LatencyComparison compare_latency(std::size_t n, std::size_t d_head, const CostModel &c, Scope scope) {
  AttentionConfig cfg;
  cfg.n_tokens = n;
  cfg.d_model = d_head;
  cfg.n_heads = 1;
  LatencyComparison r;
  r.split = schedule_attention(cfg, c, Pipeline::SplitLut, scope);
  r.nonsplit = schedule_attention(cfg, c, Pipeline::NonSplitBaseline, scope);
  r.reduction = 1.0 - static_cast<double>(r.split.total_latency_cycles) /
                          static_cast<double>(r.nonsplit.total_latency_cycles);
  r.softmax_share = static_cast<double>(r.nonsplit.stage(Stage::Softmax)) /
                    static_cast<double>(r.nonsplit.total_latency_cycles);
  for (const char *f : kCostFields)
    for (double factor : {0.5, 2.0}) {
      CostModel m = c;
      auto &v = cost_field(m, f);
      v = std::max<std::uint64_t>(1, static_cast<std::uint64_t>(std::llround(static_cast<double>(v) * factor)));
      auto p = point(cfg, m, scope);
      p.field = f;
      p.factor = factor;
      r.sensitivity.push_back(p);
    }
  return r;
}

} // namespace cimsim
