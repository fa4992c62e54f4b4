// SPDX-License-Identifier: Apache-2.0
#pragma once

// Attention dataflows on the CIM model: weight projection, the
// activation-to-activation stage (QK^T -> split softmax -> A'V) driven by
// an explicit job program, KV-cache decoding and the concatenation with W^O.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cimsim/cim_core.hpp"
#include "cimsim/fxp.hpp"
#include "cimsim/softmax.hpp"

namespace cimsim {

enum class AttentionMode { EncoderOnly, DecoderOnly, EncoderDecoder };
enum class Pipeline { SplitLut, NonSplitBaseline };

std::string to_string(AttentionMode m);
std::string to_string(Pipeline p);
std::optional<AttentionMode> parse_mode(const std::string &s);
std::optional<Pipeline> parse_pipeline(const std::string &s);

struct AttentionConfig {
  std::size_t n_tokens = 16;
  std::size_t d_model = 64;
  std::size_t n_heads = 1;
  std::size_t n_enc = 0; // encoder length, EncoderDecoder only
  AttentionMode mode = AttentionMode::EncoderOnly;
  SoftmaxFlow flow = SoftmaxFlow::NormalizeThenMatmul;
  bool causal = false;

  std::size_t d_head() const { return n_heads ? d_model / n_heads : 0; }
  // Throws ConfigError naming the offending field.
  void validate() const;
};

struct LutSettings {
  LutEntryMode exp_mode = LutEntryMode::fixed(kDefaultExpLutFormat);
  LutEntryMode recip_mode = LutEntryMode::fixed(kDefaultRecipLutFormat);
  int recip_index_bits = kDefaultRecipIndexBits;
  FxpFormat denominator = kDefaultDenominatorFormat;
  std::int8_t z_quant_max = kDefaultZQuantMax;
};

// Per-head calibration: the exp table is regenerated for each head's score
// scale. Score codes are rhe(S * 127 / score_max), i.e. one code is worth
// score_scale = score_max * sq * sk / (sqrt(d_head) * 127) in real units.
struct HeadContext {
  std::int64_t score_max = 0;
  double score_scale = 1.0;
  ExpLut exp_lut;
  RecipLut recip;
  FxpFormat denominator = kDefaultDenominatorFormat;
  SoftmaxFlow flow = SoftmaxFlow::NormalizeThenMatmul;
};

// max |q_i . k_j| over unmasked pairs (j <= i when causal).
std::int64_t score_abs_max(const QuantTensor &q, const QuantTensor &k, bool causal);
HeadContext make_head_context(const QuantTensor &q, const QuantTensor &k, bool causal, const LutSettings &luts,
                              SoftmaxFlow flow);
std::int8_t score_code(std::int64_t s, std::int64_t score_max);

// --- job programs --------------------------------------------------------------

enum class JobKind { QkQres, QkKres, SmPush, SmFinal, SmNorm, SmAll, Av, Out, Load, Matmul };
enum class Resource { Cim, SoftmaxUnit, WritePort };
enum class Stage { WeightProjection, QkT, Softmax, AV, Concat, WeightLoad };

std::string to_string(JobKind k);
std::string to_string(Resource r);
std::string to_string(Stage s);

struct Job {
  std::size_t id = 0;
  JobKind kind = JobKind::Load;
  Resource resource = Resource::Cim;
  Stage stage = Stage::QkT;
  std::size_t head = 0;
  std::size_t step = 0; // decoder step, 0 otherwise
  // Score-space ranges: rows are queries, cols are keys/tokens.
  std::size_t r0 = 0, r1 = 0, c0 = 0, c1 = 0;
  std::size_t chunk = 0; // 64-lane chunk of d_head (QK) or token chunk (AV)
  std::size_t group = 0; // 32-column group of d_head (AV)
  // Load: rows written; Matmul: streamed vectors; QK/AV: resident rows;
  // Out: d_head.
  std::size_t units = 0;
  int bank = 0;
  std::vector<std::size_t> deps;
};

struct Program {
  std::vector<Job> jobs;

  Job &add(Job j, std::vector<std::size_t> deps = {});
  std::vector<std::size_t> natural_order() const;
};

enum class Residency { QueryResident, KeyResident };

struct A2aShape {
  std::size_t nq = 0, nk = 0, d_head = 0;
  std::size_t row_offset = 0; // absolute index of query row 0 (decoder steps)
  bool causal = false;
  SoftmaxFlow flow = SoftmaxFlow::NormalizeThenMatmul;
  Pipeline pipeline = Pipeline::SplitLut;
  Residency residency = Residency::QueryResident;
};

// Tracks which bank each new resident operand lands in; a load waits for
// the previous compute job that read the same bank.
struct BankCursor {
  int next = 0;
  std::optional<std::size_t> last_user[2];
};

// Appends the activation-to-activation jobs of one head. `entry_deps` gate
// the first jobs (e.g. projections, previous decoder step). Returns the ids
// of the OUT jobs.
std::vector<std::size_t> append_a2a_jobs(Program &prog, const A2aShape &shape, std::size_t head, std::size_t step,
                                         const std::vector<std::size_t> &entry_deps, BankCursor &banks);

// Appends load + matmul jobs following plan_tiled_matmul; returns the last
// matmul job ids (one per plan step).
std::vector<std::size_t> append_matmul_jobs(Program &prog, const MappingPlan &plan, Stage stage, std::size_t head,
                                            const std::vector<std::size_t> &entry_deps, BankCursor &banks);

Program build_a2a_program(const A2aShape &shape);

// --- functional execution ------------------------------------------------------

struct HeadResult {
  QuantTensor out;                       // nq x d_head at the value scale
  std::vector<std::int8_t> score_codes;  // nq x nk (masked entries 0)
  std::vector<double> probabilities;     // nq x nk effective probabilities
  std::vector<std::int32_t> raw_scores;  // nq x nk integer QK^T
  std::uint64_t fallback_rows = 0;
};

// Runs the a2a jobs of `prog` (other kinds are ignored) in `order`. Every
// job checks that its inputs were produced; violations throw
// InvariantViolation.
HeadResult execute_a2a(const Program &prog, const std::vector<std::size_t> &order, const A2aShape &shape,
                       const QuantTensor &q, const QuantTensor &k, const QuantTensor &v, const HeadContext &ctx,
                       CimMacro &macro);

HeadResult encoder_attention(const QuantTensor &q, const QuantTensor &k, const QuantTensor &v,
                             const HeadContext &ctx, bool causal, CimMacro &macro,
                             Residency residency = Residency::QueryResident);

// Cross attention: encoder K and V resident, decoder Q streamed.
HeadResult encoder_decoder_attention(const QuantTensor &q_dec, const QuantTensor &k_enc, const QuantTensor &v_enc,
                                     const HeadContext &ctx, CimMacro &macro);

class KvCache {
public:
  KvCache(std::size_t heads, std::size_t d_head);
  void append(std::size_t head, QuantTensor k, QuantTensor v);
  std::size_t length(std::size_t head) const { return keys_.at(head).size(); }
  std::size_t heads() const { return keys_.size(); }
  std::size_t d_head() const { return d_head_; }
  const QuantTensor &key(std::size_t head, std::size_t i) const { return keys_.at(head).at(i); }
  const QuantTensor &value(std::size_t head, std::size_t i) const { return values_.at(head).at(i); }

private:
  std::size_t d_head_;
  std::vector<std::vector<QuantTensor>> keys_, values_;
};

struct DecoderStepResult {
  QuantTensor out; // 1 x d_head
  std::vector<std::int8_t> score_codes;
  std::vector<double> probabilities;
  std::vector<std::int32_t> raw_scores;
  bool fallback = false;
};

// Appends (k_n, v_n) to the cache, then attends q_n over every cached
// token with K and V resident in the macro.
DecoderStepResult decoder_step(const QuantTensor &q_n, const QuantTensor &k_n, const QuantTensor &v_n,
                               KvCache &cache, std::size_t head, const HeadContext &ctx, CimMacro &macro);

// --- projections and multi-head ---------------------------------------------------

// Max-abs dynamic requantization: code = rhe(v * 127 / max|v|), scale =
// max|v| * acc.scale / 127 (scale 1 when all zero).
QuantTensor requantize_dynamic(const AccTensor &acc);

// y = x W for W (d_in x d_out) held resident (as W^T) in the macro.
AccTensor project(const QuantTensor &x, const QuantTensor &w, CimMacro &macro);

struct HeadWeights {
  QuantTensor wq, wk, wv; // d_model x d_head
};

struct AttentionWeights {
  std::vector<HeadWeights> heads;
  QuantTensor wo; // d_model x d_model
};

struct ProjectedHead {
  QuantTensor q, k, v;
  AccTensor q_acc, k_acc, v_acc;
};

ProjectedHead project_qkv(const QuantTensor &xq, const QuantTensor &xkv, const HeadWeights &w, CimMacro &macro);

enum class AttentionKind { SelfEncoder, SelfDecoder, Cross };

// Supplies the execution order for a head's a2a program; natural order when
// unset.
using OrderFn = std::function<std::vector<std::size_t>(const Program &, const A2aShape &)>;

struct MhaResult {
  QuantTensor out;
  AccTensor out_acc;
  QuantTensor concat;
  std::vector<ProjectedHead> projected;
  std::vector<HeadContext> contexts;
  std::vector<HeadResult> heads;
  std::uint64_t fallback_rows = 0;
  MacroStats cim{};
};

MhaResult multi_head_attention(const QuantTensor &xq, const QuantTensor &xkv, const AttentionWeights &w,
                               AttentionKind kind, bool causal, const LutSettings &luts, SoftmaxFlow flow,
                               Pipeline pipeline = Pipeline::SplitLut, const OrderFn &order = {},
                               CimMacro *macro = nullptr);

// Concatenates head outputs (head-index order, feature-major) after
// requantizing each to the largest head scale.
QuantTensor concat_heads(const std::vector<QuantTensor> &heads);

} // namespace cimsim
