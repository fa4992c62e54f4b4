// SPDX-License-Identifier: Apache-2.0
#include "cimsim/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cimsim/error.hpp"

namespace cimsim {

namespace {

constexpr std::size_t kQueryTile = kPartitions; // query rows resident per QK step
constexpr std::size_t kKeyBlock = kAccSlots;    // keys streamed per QK step
constexpr std::size_t kKeyTile = kPartitions;   // keys resident per QK step (K resident)
constexpr std::size_t kQueryBlock = kAccSlots;  // queries streamed per QK step (K resident)
constexpr std::size_t kTokenChunk = kLanes;     // tokens per A'V step
constexpr std::size_t kValueGroup = kPartitions;

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

QuantTensor transpose(const QuantTensor &t) {
  QuantTensor out({t.cols(), t.rows()}, t.scale);
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) out.at(c, r) = t.at(r, c);
  return out;
}

QuantTensor row_tensor(const QuantTensor &t, std::size_t r) {
  auto row = t.row(r);
  return QuantTensor({1, t.cols()}, std::vector<std::int8_t>(row.begin(), row.end()), t.scale);
}

void require_2d(const QuantTensor &t, const char *name) {
  if (t.shape.size() != 2) throw InvariantViolation(std::string(name) + " must be 2-D, got " + shape_string(t.shape));
}

std::int8_t output_code(std::int64_t acc) {
  // NormalizeThenMatmul: acc is sum_j p_j v_j at scale sv/127.
  return saturate_int8(div_round_half_even(acc, kTermFullScale));
}

} // namespace

// ---------------------------------------------------------------------------
// names and config

std::string to_string(AttentionMode m) {
  switch (m) {
  case AttentionMode::EncoderOnly: return "encoder";
  case AttentionMode::DecoderOnly: return "decoder";
  case AttentionMode::EncoderDecoder: return "encoder_decoder";
  }
  return "?";
}

std::string to_string(Pipeline p) { return p == Pipeline::SplitLut ? "split" : "nonsplit"; }

std::optional<AttentionMode> parse_mode(const std::string &s) {
  if (s == "encoder" || s == "encoder_only") return AttentionMode::EncoderOnly;
  if (s == "decoder" || s == "decoder_only") return AttentionMode::DecoderOnly;
  if (s == "encoder_decoder") return AttentionMode::EncoderDecoder;
  return std::nullopt;
}

std::optional<Pipeline> parse_pipeline(const std::string &s) {
  if (s == "split" || s == "split_lut") return Pipeline::SplitLut;
  if (s == "nonsplit" || s == "non_split" || s == "nonsplit_baseline") return Pipeline::NonSplitBaseline;
  return std::nullopt;
}

void AttentionConfig::validate() const {
  if (n_tokens < 1 || n_tokens > 4096) throw ConfigError("$.N", "must be in [1, 4096]");
  if (d_model < 1) throw ConfigError("$.d_model", "must be positive");
  if (n_heads < 1) throw ConfigError("$.h", "must be positive");
  if (d_model % n_heads != 0)
    throw ConfigError("$.h", "d_model " + std::to_string(d_model) + " is not divisible by h " + std::to_string(n_heads));
  if (mode == AttentionMode::DecoderOnly && !causal) throw ConfigError("$.causal", "decoder mode is always causal");
  if (mode == AttentionMode::EncoderDecoder && (n_enc < 1 || n_enc > 4096))
    throw ConfigError("$.n_enc", "encoder_decoder mode needs n_enc in [1, 4096]");
}

std::string to_string(JobKind k) {
  switch (k) {
  case JobKind::QkQres: return "qk_qres";
  case JobKind::QkKres: return "qk_kres";
  case JobKind::SmPush: return "sm_push";
  case JobKind::SmFinal: return "sm_final";
  case JobKind::SmNorm: return "sm_norm";
  case JobKind::SmAll: return "sm_all";
  case JobKind::Av: return "av";
  case JobKind::Out: return "out";
  case JobKind::Load: return "load";
  case JobKind::Matmul: return "matmul";
  }
  return "?";
}

std::string to_string(Resource r) {
  switch (r) {
  case Resource::Cim: return "cim";
  case Resource::SoftmaxUnit: return "softmax_unit";
  case Resource::WritePort: return "write_port";
  }
  return "?";
}

std::string to_string(Stage s) {
  switch (s) {
  case Stage::WeightProjection: return "weight_projection";
  case Stage::QkT: return "qkT";
  case Stage::Softmax: return "softmax";
  case Stage::AV: return "aV";
  case Stage::Concat: return "concat";
  case Stage::WeightLoad: return "weight_load";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// calibration

std::int64_t score_abs_max(const QuantTensor &q, const QuantTensor &k, bool causal) {
  require_2d(q, "Q");
  require_2d(k, "K");
  if (q.cols() != k.cols()) throw InvariantViolation("Q and K head widths differ");
  std::int64_t m = 0;
  for (std::size_t i = 0; i < q.rows(); ++i)
    for (std::size_t j = 0; j < k.rows(); ++j) {
      if (causal && j > i) break;
      std::int64_t s = 0;
      for (std::size_t c = 0; c < q.cols(); ++c) s += static_cast<std::int64_t>(q.at(i, c)) * k.at(j, c);
      m = std::max(m, s < 0 ? -s : s);
    }
  return m;
}

std::int8_t score_code(std::int64_t s, std::int64_t score_max) {
  if (score_max == 0) return 0;
  return saturate_int8(div_round_half_even(static_cast<__int128>(s) * 127, score_max));
}

HeadContext make_head_context(const QuantTensor &q, const QuantTensor &k, bool causal, const LutSettings &luts,
                              SoftmaxFlow flow) {
  HeadContext ctx;
  ctx.score_max = score_abs_max(q, k, causal);
  const double d = static_cast<double>(q.cols());
  ctx.score_scale =
      ctx.score_max == 0 ? 1.0 : static_cast<double>(ctx.score_max) * q.scale * k.scale / (std::sqrt(d) * 127.0);
  ctx.exp_lut = ExpLut::build(ctx.score_scale, luts.exp_mode, luts.z_quant_max);
  ctx.recip = RecipLut::build(luts.recip_index_bits, luts.recip_mode);
  ctx.denominator = luts.denominator;
  ctx.flow = flow;
  return ctx;
}

// ---------------------------------------------------------------------------
// programs

Job &Program::add(Job j, std::vector<std::size_t> deps) {
  j.id = jobs.size();
  j.deps = std::move(deps);
  jobs.push_back(std::move(j));
  return jobs.back();
}

std::vector<std::size_t> Program::natural_order() const {
  std::vector<std::size_t> o(jobs.size());
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = i;
  return o;
}

namespace {

std::size_t add_load(Program &prog, BankCursor &banks, std::size_t head, std::size_t step, std::size_t units,
                     const std::vector<std::size_t> &entry_deps) {
  Job j;
  j.kind = JobKind::Load;
  j.resource = Resource::WritePort;
  j.stage = Stage::WeightLoad;
  j.head = head;
  j.step = step;
  j.units = units;
  j.bank = banks.next;
  auto deps = entry_deps;
  if (banks.last_user[banks.next]) deps.push_back(*banks.last_user[banks.next]);
  return prog.add(j, std::move(deps)).id;
}

std::size_t add_compute(Program &prog, BankCursor &banks, Job j, std::vector<std::size_t> deps) {
  j.resource = Resource::Cim;
  j.bank = banks.next;
  const auto id = prog.add(j, std::move(deps)).id;
  banks.last_user[banks.next] = id;
  return id;
}

Job softmax_job(JobKind kind, std::size_t head, std::size_t step, std::size_t r0, std::size_t r1, std::size_t c0,
                std::size_t c1) {
  Job j;
  j.kind = kind;
  j.resource = Resource::SoftmaxUnit;
  j.stage = Stage::Softmax;
  j.head = head;
  j.step = step;
  j.r0 = r0;
  j.r1 = r1;
  j.c0 = c0;
  j.c1 = c1;
  return j;
}

struct RowUnit {
  std::size_t r0, r1;
  std::vector<std::size_t> qk_done; // per push unit, last-chunk QK ids
  std::vector<std::size_t> pushes;  // split only
  std::optional<std::size_t> final_id, norm_id;
};

} // namespace

std::vector<std::size_t> append_a2a_jobs(Program &prog, const A2aShape &s, std::size_t head, std::size_t step,
                                         const std::vector<std::size_t> &entry_deps, BankCursor &banks) {
  if (s.nq == 0 || s.nk == 0 || s.d_head == 0) throw InvariantViolation("a2a program: empty shape");
  const bool qres = s.residency == Residency::QueryResident;
  const bool split = s.pipeline == Pipeline::SplitLut;
  const bool deferred = s.flow == SoftmaxFlow::DeferredNormalization;
  const std::size_t row_unit = qres ? kQueryTile : kQueryBlock;
  const std::size_t col_unit = qres ? kKeyBlock : kKeyTile;
  const std::size_t chunks = ceil_div(s.d_head, kLanes);
  const std::size_t col_units = ceil_div(s.nk, col_unit);
  const std::size_t token_chunks = ceil_div(s.nk, kTokenChunk);
  const std::size_t groups = ceil_div(s.d_head, kValueGroup);
  const std::size_t R = s.row_offset;

  std::vector<RowUnit> units;
  for (std::size_t r = 0; r < s.nq; r += row_unit) units.push_back({R + r, R + std::min(s.nq, r + row_unit), {}, {}, {}, {}});

  auto emit_qk = [&](RowUnit &u) {
    std::vector<std::optional<std::size_t>> prev(col_units);
    auto qk_job = [&](std::size_t b, std::size_t c) {
      Job j;
      j.kind = qres ? JobKind::QkQres : JobKind::QkKres;
      j.stage = Stage::QkT;
      j.head = head;
      j.step = step;
      j.r0 = u.r0;
      j.r1 = u.r1;
      j.c0 = b * col_unit;
      j.c1 = std::min(s.nk, j.c0 + col_unit);
      j.chunk = c;
      j.units = qres ? u.r1 - u.r0 : j.c1 - j.c0;
      return j;
    };
    u.qk_done.assign(col_units, 0);
    if (qres) {
      // The query tile stays resident for a whole chunk while key blocks stream.
      for (std::size_t c = 0; c < chunks; ++c) {
        const auto load = add_load(prog, banks, head, step, u.r1 - u.r0, entry_deps);
        for (std::size_t b = 0; b < col_units; ++b) {
          std::vector<std::size_t> deps{load};
          if (prev[b]) deps.push_back(*prev[b]);
          prev[b] = add_compute(prog, banks, qk_job(b, c), deps);
          if (c + 1 == chunks) u.qk_done[b] = *prev[b];
        }
        banks.next ^= 1;
      }
      if (split)
        for (std::size_t b = 0; b < col_units; ++b) {
          std::vector<std::size_t> deps{u.qk_done[b]};
          if (!u.pushes.empty()) deps.push_back(u.pushes.back());
          const auto c0 = b * col_unit;
          u.pushes.push_back(
              prog.add(softmax_job(JobKind::SmPush, head, step, u.r0, u.r1, c0, std::min(s.nk, c0 + col_unit)), deps).id);
        }
    } else {
      // Key tiles are resident; the query block streams once per tile and
      // each finished tile is pushed right away.
      for (std::size_t b = 0; b < col_units; ++b) {
        for (std::size_t c = 0; c < chunks; ++c) {
          const auto load = add_load(prog, banks, head, step, std::min(s.nk, (b + 1) * col_unit) - b * col_unit,
                                     entry_deps);
          std::vector<std::size_t> deps{load};
          if (prev[b]) deps.push_back(*prev[b]);
          prev[b] = add_compute(prog, banks, qk_job(b, c), deps);
          banks.next ^= 1;
        }
        u.qk_done[b] = *prev[b];
        if (split) {
          std::vector<std::size_t> deps{u.qk_done[b]};
          if (!u.pushes.empty()) deps.push_back(u.pushes.back());
          const auto c0 = b * col_unit;
          u.pushes.push_back(
              prog.add(softmax_job(JobKind::SmPush, head, step, u.r0, u.r1, c0, std::min(s.nk, c0 + col_unit)), deps).id);
        }
      }
    }
    if (split) {
      u.final_id = prog.add(softmax_job(JobKind::SmFinal, head, step, u.r0, u.r1, 0, s.nk), {u.pushes.back()}).id;
      if (!deferred) u.norm_id = prog.add(softmax_job(JobKind::SmNorm, head, step, u.r0, u.r1, 0, s.nk), {*u.final_id}).id;
    }
  };

  std::optional<std::size_t> sm_all;
  std::vector<std::size_t> outs;
  auto emit_av = [&](RowUnit &u) {
    std::vector<std::size_t> avs;
    for (std::size_t t = 0; t < token_chunks; ++t) {
      const std::size_t c0 = t * kTokenChunk, c1 = std::min(s.nk, c0 + kTokenChunk);
      std::size_t gate;
      if (!split) gate = *sm_all;
      else if (!deferred) gate = *u.norm_id;
      else gate = u.pushes[(c1 - 1) / col_unit];
      for (std::size_t g = 0; g < groups; ++g) {
        const std::size_t cols = std::min(s.d_head, (g + 1) * kValueGroup) - g * kValueGroup;
        const auto load = add_load(prog, banks, head, step, cols, entry_deps);
        Job j;
        j.kind = JobKind::Av;
        j.stage = Stage::AV;
        j.head = head;
        j.step = step;
        j.r0 = u.r0;
        j.r1 = u.r1;
        j.c0 = c0;
        j.c1 = c1;
        j.chunk = t;
        j.group = g;
        j.units = cols;
        avs.push_back(add_compute(prog, banks, j, {load, gate}));
        banks.next ^= 1;
      }
    }
    auto deps = avs;
    if (!split) deps.push_back(*sm_all);
    else if (deferred) deps.push_back(*u.final_id);
    auto out = softmax_job(JobKind::Out, head, step, u.r0, u.r1, 0, s.nk);
    out.units = s.d_head;
    outs.push_back(prog.add(out, deps).id);
  };

  if (split) {
    // Software pipelining by one row unit: QK(t+1) runs on the CIM while
    // the softmax unit finishes row unit t.
    emit_qk(units[0]);
    for (std::size_t t = 1; t < units.size(); ++t) {
      emit_qk(units[t]);
      emit_av(units[t - 1]);
    }
    emit_av(units.back());
  } else {
    std::vector<std::size_t> all_qk;
    for (auto &u : units) {
      emit_qk(u);
      all_qk.insert(all_qk.end(), u.qk_done.begin(), u.qk_done.end());
    }
    sm_all = prog.add(softmax_job(JobKind::SmAll, head, step, R, R + s.nq, 0, s.nk), all_qk).id;
    for (auto &u : units) emit_av(u);
  }
  return outs;
}

std::vector<std::size_t> append_matmul_jobs(Program &prog, const MappingPlan &plan, Stage stage, std::size_t head,
                                            const std::vector<std::size_t> &entry_deps, BankCursor &banks) {
  std::vector<std::size_t> ids;
  for (const auto &st : plan.steps) {
    const auto load = add_load(prog, banks, head, 0, st.row_count, entry_deps);
    Job j;
    j.kind = JobKind::Matmul;
    j.stage = stage;
    j.head = head;
    j.units = st.block_count;
    j.r0 = st.block_begin;
    j.r1 = st.block_begin + st.block_count;
    j.c0 = st.row_begin;
    j.c1 = st.row_begin + st.row_count;
    j.chunk = st.chunk;
    auto deps = entry_deps;
    deps.push_back(load);
    ids.push_back(add_compute(prog, banks, j, deps));
    banks.next ^= 1;
  }
  return ids;
}

Program build_a2a_program(const A2aShape &shape) {
  Program prog;
  BankCursor banks;
  append_a2a_jobs(prog, shape, 0, 0, {}, banks);
  return prog;
}

// ---------------------------------------------------------------------------
// executor

namespace {

class A2aExecutor {
public:
  A2aExecutor(const A2aShape &s, const QuantTensor &q, const QuantTensor &k, const QuantTensor &v,
              const HeadContext &ctx, CimMacro &macro)
      : s_(s), q_(q), k_(k), v_(v), vt_(transpose(v)), ctx_(ctx), macro_(macro), nq_(s.nq), nk_(s.nk),
        d_(s.d_head), chunks_(ceil_div(s.d_head, kLanes)), acc_(nq_ * nk_, 0), chunk_count_(nq_ * nk_, 0),
        z_(nq_ * nk_, 0), terms_(nq_ * nk_), a_(nq_ * nk_, 0), pushed_(nq_, 0), normalized_(nq_, false),
        out_acc_(nq_ * d_, 0), av_done_(nq_, 0), out_done_(nq_, false), out_codes_(nq_ * d_, 0) {
    states_.reserve(nq_);
    for (std::size_t i = 0; i < nq_; ++i) states_.emplace_back(ctx.flow, ctx.denominator);
    normalizers_.resize(nq_);
  }

  void run(const Job &j) {
    switch (j.kind) {
    case JobKind::QkQres: qk(j, true); break;
    case JobKind::QkKres: qk(j, false); break;
    case JobKind::SmPush: push(j.r0, j.r1, j.c0, j.c1); break;
    case JobKind::SmFinal: finalize(j.r0, j.r1); break;
    case JobKind::SmNorm: normalize(j.r0, j.r1); break;
    case JobKind::SmAll:
      push(j.r0, j.r1, j.c0, j.c1);
      finalize(j.r0, j.r1);
      if (ctx_.flow == SoftmaxFlow::NormalizeThenMatmul) normalize(j.r0, j.r1);
      break;
    case JobKind::Av: av(j); break;
    case JobKind::Out: out(j.r0, j.r1); break;
    case JobKind::Load:
    case JobKind::Matmul: break;
    }
  }

  HeadResult result() {
    for (std::size_t i = 0; i < nq_; ++i)
      if (!out_done_[i]) throw InvariantViolation("program finished without producing output row " + std::to_string(i));
    HeadResult r;
    r.out = QuantTensor({nq_, d_}, std::move(out_codes_), v_.scale);
    r.score_codes = z_;
    r.probabilities.assign(nq_ * nk_, 0.0);
    r.raw_scores.resize(nq_ * nk_);
    for (std::size_t i = 0; i < nq_; ++i)
      for (std::size_t j = 0; j < nk_; ++j) {
        r.raw_scores[i * nk_ + j] = static_cast<std::int32_t>(acc_[i * nk_ + j]);
        if (masked(i, j)) r.score_codes[i * nk_ + j] = 0;
        else r.probabilities[i * nk_ + j] = effective_probability(terms_[i * nk_ + j], *normalizers_[i]);
      }
    r.fallback_rows = diag_.fallback_rows;
    return r;
  }

private:
  bool masked(std::size_t i, std::size_t j) const { return s_.causal && j > i + s_.row_offset; }
  std::size_t local_row(std::size_t r) const {
    if (r < s_.row_offset || r - s_.row_offset >= nq_) throw InvariantViolation("job row outside the head");
    return r - s_.row_offset;
  }
  void check_cols(std::size_t c0, std::size_t c1) const {
    if (c0 >= c1 || c1 > nk_) throw InvariantViolation("job columns outside the head");
  }

  void qk(const Job &j, bool qres) {
    check_cols(j.c0, j.c1);
    const std::size_t i0 = local_row(j.r0), i1 = local_row(j.r1 - 1) + 1;
    const std::size_t l0 = j.chunk * kLanes, ln = std::min(d_, l0 + kLanes) - l0;
    if (j.chunk >= chunks_) throw InvariantViolation("QK chunk out of range");
    std::vector<std::span<const std::int8_t>> resident, streamed;
    if (qres) {
      for (std::size_t i = i0; i < i1; ++i) resident.push_back(q_.row(i).subspan(l0, ln));
      for (std::size_t c = j.c0; c < j.c1; ++c) streamed.push_back(k_.row(c).subspan(l0, ln));
    } else {
      for (std::size_t c = j.c0; c < j.c1; ++c) resident.push_back(k_.row(c).subspan(l0, ln));
      for (std::size_t i = i0; i < i1; ++i) streamed.push_back(q_.row(i).subspan(l0, ln));
    }
    const auto part = run_step(macro_, j.bank, resident, streamed);
    const std::size_t R = resident.size();
    for (std::size_t i = i0; i < i1; ++i)
      for (std::size_t c = j.c0; c < j.c1; ++c) {
        const std::size_t e = i * nk_ + c;
        acc_[e] += qres ? part[(c - j.c0) * R + (i - i0)] : part[(i - i0) * R + (c - j.c0)];
        if (++chunk_count_[e] > chunks_) throw InvariantViolation("score chunk accumulated twice");
        if (chunk_count_[e] == chunks_) z_[e] = score_code(acc_[e], ctx_.score_max);
      }
  }

  void push(std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
    check_cols(c0, c1);
    for (std::size_t i = local_row(r0); i <= local_row(r1 - 1); ++i) {
      if (pushed_[i] != c0)
        throw InvariantViolation("row " + std::to_string(i) + ": push of column " + std::to_string(c0) +
                                 " out of order (next expected " + std::to_string(pushed_[i]) + ")");
      for (std::size_t c = c0; c < c1; ++c) {
        const std::size_t e = i * nk_ + c;
        if (chunk_count_[e] != chunks_)
          throw InvariantViolation("score (" + std::to_string(i) + "," + std::to_string(c) + ") consumed before produced");
        if (masked(i, c)) continue;
        terms_[e] = states_[i].push(z_[e], ctx_.exp_lut);
        if (ctx_.flow == SoftmaxFlow::DeferredNormalization) a_[e] = terms_[e].code;
      }
      pushed_[i] = c1;
    }
  }

  void finalize(std::size_t r0, std::size_t r1) {
    for (std::size_t i = local_row(r0); i <= local_row(r1 - 1); ++i) {
      if (pushed_[i] != nk_) throw InvariantViolation("row " + std::to_string(i) + " finalized before all scores were pushed");
      normalizers_[i] = states_[i].finalize(ctx_.recip, &diag_);
    }
  }

  void normalize(std::size_t r0, std::size_t r1) {
    for (std::size_t i = local_row(r0); i <= local_row(r1 - 1); ++i) {
      if (!normalizers_[i]) throw InvariantViolation("row " + std::to_string(i) + " normalized before finalize");
      for (std::size_t c = 0; c < nk_; ++c)
        if (!masked(i, c)) a_[i * nk_ + c] = normalize_term(terms_[i * nk_ + c], *normalizers_[i]);
      normalized_[i] = true;
    }
  }

  void av(const Job &j) {
    check_cols(j.c0, j.c1);
    const std::size_t i0 = local_row(j.r0), i1 = local_row(j.r1 - 1) + 1;
    const std::size_t g0 = j.group * kValueGroup, g1 = std::min(d_, g0 + kValueGroup);
    if (g0 >= d_) throw InvariantViolation("A'V group out of range");
    for (std::size_t i = i0; i < i1; ++i) {
      const bool ready = ctx_.flow == SoftmaxFlow::NormalizeThenMatmul ? normalized_[i] : pushed_[i] >= j.c1;
      if (!ready) throw InvariantViolation("A'V on row " + std::to_string(i) + " before its probabilities exist");
    }
    std::vector<std::span<const std::int8_t>> resident, streamed;
    for (std::size_t c = g0; c < g1; ++c) resident.push_back(vt_.row(c).subspan(j.c0, j.c1 - j.c0));
    for (std::size_t i = i0; i < i1; ++i)
      streamed.push_back(std::span<const std::int8_t>(a_).subspan(i * nk_ + j.c0, j.c1 - j.c0));
    const auto part = run_step(macro_, j.bank, resident, streamed);
    const std::size_t R = resident.size();
    for (std::size_t i = i0; i < i1; ++i) {
      for (std::size_t c = g0; c < g1; ++c) out_acc_[i * d_ + c] += part[(i - i0) * R + (c - g0)];
      ++av_done_[i];
    }
  }

  void out(std::size_t r0, std::size_t r1) {
    const std::size_t expected = ceil_div(nk_, kTokenChunk) * ceil_div(d_, kValueGroup);
    for (std::size_t i = local_row(r0); i <= local_row(r1 - 1); ++i) {
      if (av_done_[i] != expected) throw InvariantViolation("output row " + std::to_string(i) + " before A'V finished");
      if (ctx_.flow == SoftmaxFlow::NormalizeThenMatmul) {
        for (std::size_t c = 0; c < d_; ++c) out_codes_[i * d_ + c] = output_code(out_acc_[i * d_ + c]);
      } else {
        if (!normalizers_[i]) throw InvariantViolation("deferred output row " + std::to_string(i) + " before finalize");
        std::vector<std::int32_t> weighted(d_), plain;
        for (std::size_t c = 0; c < d_; ++c) weighted[c] = static_cast<std::int32_t>(out_acc_[i * d_ + c]);
        if (normalizers_[i]->fallback) {
          plain.assign(d_, 0);
          for (std::size_t t = 0; t < nk_; ++t)
            if (!masked(i, t))
              for (std::size_t c = 0; c < d_; ++c) plain[c] += v_.at(t, c);
        }
        const auto codes = apply_deferred(weighted, *normalizers_[i], plain);
        std::copy(codes.begin(), codes.end(), out_codes_.begin() + static_cast<std::ptrdiff_t>(i * d_));
      }
      out_done_[i] = true;
    }
  }

  const A2aShape &s_;
  const QuantTensor &q_, &k_, &v_;
  QuantTensor vt_;
  const HeadContext &ctx_;
  CimMacro &macro_;
  std::size_t nq_, nk_, d_, chunks_;
  std::vector<std::int64_t> acc_;
  std::vector<std::uint16_t> chunk_count_;
  std::vector<std::int8_t> z_;
  std::vector<NumeratorTerm> terms_;
  std::vector<std::int8_t> a_;
  std::vector<SplitSoftmaxState> states_;
  std::vector<std::optional<Normalizer>> normalizers_;
  std::vector<std::size_t> pushed_;
  std::vector<bool> normalized_;
  std::vector<std::int64_t> out_acc_;
  std::vector<std::size_t> av_done_;
  std::vector<bool> out_done_;
  std::vector<std::int8_t> out_codes_;
  SoftmaxDiagnostics diag_;
};

void check_head_operands(const QuantTensor &q, const QuantTensor &k, const QuantTensor &v, const A2aShape &s) {
  require_2d(q, "Q");
  require_2d(k, "K");
  require_2d(v, "V");
  if (q.cols() != k.cols()) throw InvariantViolation("Q and K head widths differ: " + shape_string(q.shape) + " vs " + shape_string(k.shape));
  if (k.rows() != v.rows() || k.cols() != v.cols()) throw InvariantViolation("K and V shapes differ");
  if (s.nq != q.rows() || s.nk != k.rows() || s.d_head != q.cols()) throw InvariantViolation("program shape does not match operands");
  if (s.row_offset != 0) throw InvariantViolation("executor runs whole heads only");
}

} // namespace

HeadResult execute_a2a(const Program &prog, const std::vector<std::size_t> &order, const A2aShape &shape,
                       const QuantTensor &q, const QuantTensor &k, const QuantTensor &v, const HeadContext &ctx,
                       CimMacro &macro) {
  check_head_operands(q, k, v, shape);
  if (ctx.flow != shape.flow) throw InvariantViolation("head context and program disagree on the softmax flow");
  A2aExecutor ex(shape, q, k, v, ctx, macro);
  std::vector<bool> seen(prog.jobs.size(), false);
  for (auto id : order) {
    if (id >= prog.jobs.size() || seen[id]) throw InvariantViolation("execution order repeats or invents job " + std::to_string(id));
    seen[id] = true;
    ex.run(prog.jobs[id]);
  }
  return ex.result();
}

HeadResult encoder_attention(const QuantTensor &q, const QuantTensor &k, const QuantTensor &v,
                             const HeadContext &ctx, bool causal, CimMacro &macro, Residency residency) {
  require_2d(q, "Q");
  require_2d(k, "K");
  A2aShape s{q.rows(), k.rows(), q.cols(), 0, causal, ctx.flow, Pipeline::SplitLut, residency};
  const auto prog = build_a2a_program(s);
  return execute_a2a(prog, prog.natural_order(), s, q, k, v, ctx, macro);
}

HeadResult encoder_decoder_attention(const QuantTensor &q_dec, const QuantTensor &k_enc, const QuantTensor &v_enc,
                                     const HeadContext &ctx, CimMacro &macro) {
  require_2d(q_dec, "decoder Q");
  require_2d(k_enc, "encoder K");
  if (q_dec.cols() != k_enc.cols())
    throw InvariantViolation("encoder/decoder head width mismatch: " + std::to_string(k_enc.cols()) + " vs " +
                             std::to_string(q_dec.cols()));
  return encoder_attention(q_dec, k_enc, v_enc, ctx, false, macro, Residency::KeyResident);
}

// ---------------------------------------------------------------------------
// KV cache and decoding

KvCache::KvCache(std::size_t heads, std::size_t d_head) : d_head_(d_head), keys_(heads), values_(heads) {}

void KvCache::append(std::size_t head, QuantTensor k, QuantTensor v) {
  if (head >= keys_.size()) throw InvariantViolation("KV cache head out of range");
  if (k.shape != Shape{1, d_head_} || v.shape != Shape{1, d_head_})
    throw InvariantViolation("KV cache entries must be 1 x " + std::to_string(d_head_));
  keys_[head].push_back(std::move(k));
  values_[head].push_back(std::move(v));
}

DecoderStepResult decoder_step(const QuantTensor &q_n, const QuantTensor &k_n, const QuantTensor &v_n,
                               KvCache &cache, std::size_t head, const HeadContext &ctx, CimMacro &macro) {
  const std::size_t d = cache.d_head();
  if (q_n.shape != Shape{1, d}) throw InvariantViolation("decoder query must be 1 x " + std::to_string(d));
  cache.append(head, k_n, v_n);
  const std::size_t nk = cache.length(head);
  const std::size_t chunks = ceil_div(d, kLanes);

  std::vector<std::int64_t> s(nk, 0);
  int bank = 0;
  for (std::size_t t0 = 0; t0 < nk; t0 += kKeyTile) {
    const std::size_t t1 = std::min(nk, t0 + kKeyTile);
    for (std::size_t c = 0; c < chunks; ++c) {
      const std::size_t l0 = c * kLanes, ln = std::min(d, l0 + kLanes) - l0;
      std::vector<std::span<const std::int8_t>> resident, streamed{q_n.row(0).subspan(l0, ln)};
      for (std::size_t j = t0; j < t1; ++j) resident.push_back(cache.key(head, j).row(0).subspan(l0, ln));
      const auto part = run_step(macro, bank, resident, streamed);
      bank ^= 1;
      for (std::size_t j = t0; j < t1; ++j) s[j] += part[j - t0];
    }
  }

  DecoderStepResult r;
  SplitSoftmaxState st(ctx.flow, ctx.denominator);
  std::vector<NumeratorTerm> terms;
  for (std::size_t j = 0; j < nk; ++j) {
    r.raw_scores.push_back(static_cast<std::int32_t>(s[j]));
    r.score_codes.push_back(score_code(s[j], ctx.score_max));
    terms.push_back(st.push(r.score_codes.back(), ctx.exp_lut));
  }
  SoftmaxDiagnostics diag;
  const Normalizer m = st.finalize(ctx.recip, &diag);
  r.fallback = m.fallback;
  std::vector<std::int8_t> a(nk);
  for (std::size_t j = 0; j < nk; ++j) {
    a[j] = ctx.flow == SoftmaxFlow::DeferredNormalization ? terms[j].code : normalize_term(terms[j], m);
    r.probabilities.push_back(effective_probability(terms[j], m));
  }

  std::vector<std::int64_t> acc(d, 0);
  std::vector<std::int8_t> vcol(nk);
  for (std::size_t t0 = 0; t0 < nk; t0 += kTokenChunk) {
    const std::size_t t1 = std::min(nk, t0 + kTokenChunk);
    for (std::size_t g0 = 0; g0 < d; g0 += kValueGroup) {
      const std::size_t g1 = std::min(d, g0 + kValueGroup);
      std::vector<std::vector<std::int8_t>> pieces;
      for (std::size_t c = g0; c < g1; ++c) {
        std::vector<std::int8_t> piece;
        for (std::size_t j = t0; j < t1; ++j) piece.push_back(cache.value(head, j).at(0, c));
        pieces.push_back(std::move(piece));
      }
      std::vector<std::span<const std::int8_t>> resident(pieces.begin(), pieces.end());
      std::vector<std::span<const std::int8_t>> streamed{std::span<const std::int8_t>(a).subspan(t0, t1 - t0)};
      const auto part = run_step(macro, bank, resident, streamed);
      bank ^= 1;
      for (std::size_t c = g0; c < g1; ++c) acc[c] += part[c - g0];
    }
  }

  std::vector<std::int8_t> codes(d);
  if (ctx.flow == SoftmaxFlow::NormalizeThenMatmul) {
    for (std::size_t c = 0; c < d; ++c) codes[c] = output_code(acc[c]);
  } else {
    std::vector<std::int32_t> weighted(acc.begin(), acc.end()), plain;
    if (m.fallback) {
      plain.assign(d, 0);
      for (std::size_t j = 0; j < nk; ++j)
        for (std::size_t c = 0; c < d; ++c) plain[c] += cache.value(head, j).at(0, c);
    }
    codes = apply_deferred(weighted, m, plain);
  }
  r.out = QuantTensor({1, d}, std::move(codes), v_n.scale);
  return r;
}

// ---------------------------------------------------------------------------
// projections and multi-head

QuantTensor requantize_dynamic(const AccTensor &acc) {
  std::int64_t m = 0;
  for (auto v : acc.values) m = std::max<std::int64_t>(m, v < 0 ? -static_cast<std::int64_t>(v) : v);
  if (m == 0) return QuantTensor(acc.shape, 1.0);
  QuantTensor out(acc.shape, static_cast<double>(m) * acc.scale / 127.0);
  for (std::size_t i = 0; i < acc.values.size(); ++i)
    out.codes[i] = saturate_int8(div_round_half_even(static_cast<__int128>(acc.values[i]) * 127, m));
  return out;
}

AccTensor project(const QuantTensor &x, const QuantTensor &w, CimMacro &macro) {
  require_2d(x, "X");
  require_2d(w, "W");
  if (x.cols() != w.rows())
    throw InvariantViolation("projection shape mismatch: " + shape_string(x.shape) + " x " + shape_string(w.shape));
  const auto wt = transpose(w);
  return tiled_matmul(macro, plan_tiled_matmul(wt.rows(), x.rows(), x.cols()), wt, x);
}

ProjectedHead project_qkv(const QuantTensor &xq, const QuantTensor &xkv, const HeadWeights &w, CimMacro &macro) {
  ProjectedHead p;
  p.q_acc = project(xq, w.wq, macro);
  p.k_acc = project(xkv, w.wk, macro);
  p.v_acc = project(xkv, w.wv, macro);
  p.q = requantize_dynamic(p.q_acc);
  p.k = requantize_dynamic(p.k_acc);
  p.v = requantize_dynamic(p.v_acc);
  return p;
}

QuantTensor concat_heads(const std::vector<QuantTensor> &heads) {
  if (heads.empty()) throw InvariantViolation("concat of zero heads");
  const std::size_t n = heads[0].rows();
  double s_cat = 0.0;
  std::size_t width = 0;
  for (const auto &h : heads) {
    if (h.rows() != n) throw InvariantViolation("head outputs disagree on token count");
    s_cat = std::max(s_cat, h.scale);
    width += h.cols();
  }
  QuantTensor out({n, width}, s_cat);
  std::size_t off = 0;
  for (const auto &h : heads) {
    const double ratio = h.scale / s_cat;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < h.cols(); ++c)
        out.at(r, off + c) = ratio == 1.0 ? h.at(r, c) : requantize_value(h.at(r, c), ratio);
    off += h.cols();
  }
  return out;
}

MhaResult multi_head_attention(const QuantTensor &xq, const QuantTensor &xkv, const AttentionWeights &w,
                               AttentionKind kind, bool causal, const LutSettings &luts, SoftmaxFlow flow,
                               Pipeline pipeline, const OrderFn &order, CimMacro *shared) {
  if (w.heads.empty()) throw InvariantViolation("no head weights");
  CimMacro local;
  CimMacro &macro = shared ? *shared : local;
  MhaResult res;
  std::vector<QuantTensor> outs;
  const bool is_causal = kind == AttentionKind::SelfDecoder || (kind == AttentionKind::SelfEncoder && causal);
  for (std::size_t h = 0; h < w.heads.size(); ++h) {
    auto p = project_qkv(xq, xkv, w.heads[h], macro);
    auto ctx = make_head_context(p.q, p.k, is_causal, luts, flow);
    HeadResult hr;
    if (kind == AttentionKind::SelfDecoder) {
      const std::size_t n = p.q.rows(), d = p.q.cols();
      KvCache cache(1, d);
      hr.out = QuantTensor({n, d}, p.v.scale);
      hr.score_codes.assign(n * n, 0);
      hr.probabilities.assign(n * n, 0.0);
      hr.raw_scores.assign(n * n, 0);
      for (std::size_t t = 0; t < n; ++t) {
        auto step = decoder_step(row_tensor(p.q, t), row_tensor(p.k, t), row_tensor(p.v, t), cache, 0, ctx, macro);
        std::copy(step.out.codes.begin(), step.out.codes.end(), hr.out.codes.begin() + static_cast<std::ptrdiff_t>(t * d));
        for (std::size_t j = 0; j <= t; ++j) {
          hr.score_codes[t * n + j] = step.score_codes[j];
          hr.probabilities[t * n + j] = step.probabilities[j];
          hr.raw_scores[t * n + j] = step.raw_scores[j];
        }
        hr.fallback_rows += step.fallback;
      }
    } else {
      const auto residency = kind == AttentionKind::Cross ? Residency::KeyResident : Residency::QueryResident;
      A2aShape s{p.q.rows(), p.k.rows(), p.q.cols(), 0, is_causal, flow, pipeline, residency};
      const auto prog = build_a2a_program(s);
      hr = execute_a2a(prog, order ? order(prog, s) : prog.natural_order(), s, p.q, p.k, p.v, ctx, macro);
    }
    res.fallback_rows += hr.fallback_rows;
    outs.push_back(hr.out);
    res.projected.push_back(std::move(p));
    res.contexts.push_back(std::move(ctx));
    res.heads.push_back(std::move(hr));
  }
  res.concat = concat_heads(outs);
  res.out_acc = project(res.concat, w.wo, macro);
  res.out = requantize_dynamic(res.out_acc);
  res.cim = macro.stats();
  return res;
}

} // namespace cimsim
