// SPDX-License-Identifier: Apache-2.0
#include "cimsim/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "cimsim/error.hpp"
#include "cimsim/error_budget.hpp"
#include "cimsim/tensor_io.hpp"
#include "cimsim_oracles/oracles.hpp"

namespace cimsim {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// config

namespace {

void reject_unknown(const json &j, const std::string &path, const std::set<std::string> &allowed) {
  for (const auto &[k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError(path + "." + k, "unknown key");
}

std::uint64_t get_uint(const json &j, const std::string &key, const std::string &path) {
  const auto &v = j.at(key);
  if (!v.is_number_unsigned() && (!v.is_number_integer() || v.get<std::int64_t>() < 0))
    throw ConfigError(path + "." + key, "must be a non-negative integer");
  return v.get<std::uint64_t>();
}

std::string get_string(const json &j, const std::string &key, const std::string &path) {
  const auto &v = j.at(key);
  if (!v.is_string()) throw ConfigError(path + "." + key, "must be a string");
  return v.get<std::string>();
}

bool get_bool(const json &j, const std::string &key, const std::string &path) {
  const auto &v = j.at(key);
  if (!v.is_boolean()) throw ConfigError(path + "." + key, "must be true or false");
  return v.get<bool>();
}

double get_double(const json &j, const std::string &key, const std::string &path) {
  const auto &v = j.at(key);
  if (!v.is_number()) throw ConfigError(path + "." + key, "must be a number");
  return v.get<double>();
}

int get_int_in(const json &j, const std::string &key, const std::string &path, int lo, int hi) {
  const auto &v = j.at(key);
  if (!v.is_number_integer() || v.get<std::int64_t>() < lo || v.get<std::int64_t>() > hi)
    throw ConfigError(path + "." + key, "must be an integer in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  return static_cast<int>(v.get<std::int64_t>());
}

} // namespace

LutEntryMode parse_lut_mode(const std::string &s, const std::string &field) {
  if (s == "exact") return LutEntryMode::exact();
  const std::string prefix = "fixed:";
  if (s.rfind(prefix, 0) == 0) {
    std::string rest = s.substr(prefix.size());
    FxpFormat f{1, 0, false};
    try {
      std::size_t used = 0;
      if (rest.rfind("UQ", 0) == 0) {
        const auto dot = rest.find('.');
        if (dot == std::string::npos) throw std::invalid_argument("no '.'");
        f.integer_bits = std::stoi(rest.substr(2, dot - 2), &used);
        if (used != dot - 2) throw std::invalid_argument("bad integer bits");
        rest = rest.substr(dot + 1);
      }
      f.fraction_bits = std::stoi(rest, &used);
      if (used != rest.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception &) {
      throw ConfigError(field, "expected \"exact\", \"fixed:<bits>\" or \"fixed:UQ<i>.<f>\", got \"" + s + "\"");
    }
    if (f.integer_bits < 1 || f.integer_bits > 8 || f.fraction_bits < 4 || f.fraction_bits > 30)
      throw ConfigError(field, "fixed format " + f.to_string() + " outside UQ1..8.4..30");
    return LutEntryMode::fixed(f);
  }
  throw ConfigError(field, "expected \"exact\", \"fixed:<bits>\" or \"fixed:UQ<i>.<f>\", got \"" + s + "\"");
}

SimConfig parse_config(const json &j) {
  if (!j.is_object()) throw ConfigError("$", "config must be a JSON object");
  reject_unknown(j, "$", {"mode", "N", "d_model", "h", "n_enc", "flow", "causal", "pipeline", "lut", "costs",
                          "sparsity", "seed", "workload"});
  for (const char *k : {"mode", "N", "d_model", "h"})
    if (!j.contains(k)) throw ConfigError(std::string("$.") + k, "required key missing");

  SimConfig c;
  const auto mode = get_string(j, "mode", "$");
  const auto m = parse_mode(mode);
  if (!m) throw ConfigError("$.mode", "expected encoder, decoder or encoder_decoder, got \"" + mode + "\"");
  c.attn.mode = *m;
  c.attn.n_tokens = get_uint(j, "N", "$");
  c.attn.d_model = get_uint(j, "d_model", "$");
  c.attn.n_heads = get_uint(j, "h", "$");
  if (c.attn.mode == AttentionMode::EncoderDecoder)
    c.attn.n_enc = j.contains("n_enc") ? get_uint(j, "n_enc", "$") : c.attn.n_tokens;
  else if (j.contains("n_enc"))
    throw ConfigError("$.n_enc", "only valid in encoder_decoder mode");
  if (j.contains("flow")) {
    const auto f = parse_flow(get_string(j, "flow", "$"));
    if (!f) throw ConfigError("$.flow", "expected normalize_then_matmul or deferred");
    c.attn.flow = *f;
  }
  c.attn.causal = j.contains("causal") ? get_bool(j, "causal", "$") : c.attn.mode == AttentionMode::DecoderOnly;
  if (j.contains("pipeline")) {
    const auto p = parse_pipeline(get_string(j, "pipeline", "$"));
    if (!p) throw ConfigError("$.pipeline", "expected split or nonsplit");
    c.pipeline = *p;
  }
  c.attn.validate();

  if (j.contains("lut")) {
    const auto &l = j.at("lut");
    if (!l.is_object()) throw ConfigError("$.lut", "must be an object");
    reject_unknown(l, "$.lut",
                   {"exp_mode", "recip_mode", "recip_k", "denom_frac_bits", "denom_int_bits", "z_quant_max"});
    if (l.contains("exp_mode")) c.luts.exp_mode = parse_lut_mode(get_string(l, "exp_mode", "$.lut"), "$.lut.exp_mode");
    if (l.contains("recip_mode"))
      c.luts.recip_mode = parse_lut_mode(get_string(l, "recip_mode", "$.lut"), "$.lut.recip_mode");
    if (l.contains("recip_k")) c.luts.recip_index_bits = get_int_in(l, "recip_k", "$.lut", 4, 12);
    if (l.contains("denom_frac_bits")) c.luts.denominator.fraction_bits = get_int_in(l, "denom_frac_bits", "$.lut", 8, 40);
    if (l.contains("denom_int_bits")) c.luts.denominator.integer_bits = get_int_in(l, "denom_int_bits", "$.lut", 1, 22);
    if (l.contains("z_quant_max"))
      c.luts.z_quant_max = static_cast<std::int8_t>(get_int_in(l, "z_quant_max", "$.lut", -127, 127));
  }
  const std::size_t longest = std::max(c.attn.n_tokens, c.attn.n_enc);
  if (static_cast<double>(longest) > c.luts.denominator.max_value())
    throw ConfigError("$.lut.denom_int_bits", "denominator " + c.luts.denominator.to_string() + " cannot hold " +
                                                  std::to_string(longest) + " unit terms");
  try {
    ExpLut::build(1.0, c.luts.exp_mode, c.luts.z_quant_max);
    RecipLut::build(c.luts.recip_index_bits, c.luts.recip_mode);
  } catch (const std::invalid_argument &e) {
    throw ConfigError("$.lut", e.what());
  }

  if (j.contains("costs")) c.costs = CostModel::from_json(j.at("costs"), CostModel{});
  if (j.contains("sparsity")) {
    const auto &s = j.at("sparsity");
    if (!s.is_object()) throw ConfigError("$.sparsity", "must be an object");
    reject_unknown(s, "$.sparsity", {"activation", "weight"});
    if (s.contains("activation")) c.sparsity.activation = get_double(s, "activation", "$.sparsity");
    if (s.contains("weight")) c.sparsity.weight = get_double(s, "weight", "$.sparsity");
    c.sparsity.validate();
  }
  if (j.contains("seed")) c.seed = get_uint(j, "seed", "$");
  if (j.contains("workload")) c.workload = get_string(j, "workload", "$");
  return c;
}

SimConfig load_config(const fs::path &path) {
  std::ifstream in(path);
  if (!in) throw SimError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error &e) {
    throw ConfigError("$", std::string("JSON parse error: ") + e.what());
  }
  return parse_config(j);
}

json SimConfig::to_json() const {
  json j{{"mode", to_string(attn.mode)},
         {"N", attn.n_tokens},
         {"d_model", attn.d_model},
         {"h", attn.n_heads},
         {"flow", to_string(attn.flow)},
         {"causal", attn.causal},
         {"pipeline", to_string(pipeline)},
         {"lut",
          {{"exp_mode", luts.exp_mode.to_string()},
           {"recip_mode", luts.recip_mode.to_string()},
           {"recip_k", luts.recip_index_bits},
           {"denom_frac_bits", luts.denominator.fraction_bits},
           {"denom_int_bits", luts.denominator.integer_bits},
           {"z_quant_max", luts.z_quant_max}}},
         {"costs", costs.to_json()},
         {"sparsity", {{"activation", sparsity.activation}, {"weight", sparsity.weight}}},
         {"seed", seed}};
  if (attn.mode == AttentionMode::EncoderDecoder) j["n_enc"] = attn.n_enc;
  if (!workload.empty()) j["workload"] = workload;
  return j;
}

std::vector<std::string> assumption_ledger() {
  return {
      "Fixed-point rounding is round-half-to-even; conversions saturate.",
      "Exp LUT entries default to UQ1.15; the z_quant_max entry is exactly 1.0.",
      "The softmax denominator accumulates in UQ16.24 by default so 4096 unit terms fit.",
      "The reciprocal LUT is indexed by the k bits after the leading one of the denominator (k = 8).",
      "Scores are requantized per head: code = rhe(S * 127 / max|S|) over unmasked pairs.",
      "Projections and the output projection are requantized with dynamic max-abs scales.",
      "Causally masked scores are never pushed into the softmax; a zero term is streamed for them.",
      "Timing is in-order list scheduling over the CIM array, the softmax unit and the weight write port.",
      "A matvec costs cycles_per_matvec cycles per streamed vector; a weight row costs write_beats_per_row beats.",
      "The softmax unit moves one 512-bit word per cycle; split pushes read 32-bit scores and 8-bit LUT indices.",
      "The non-split baseline starts after all scores exist and reads each score nonsplit_softmax_read_passes "
      "times at nonsplit_input_width bits.",
      "Decoder steps run one token at a time, each after the previous one.",
      "Encoder-decoder runs reuse one weight set for encoder self-, decoder self- and cross-attention.",
  };
}

// ---------------------------------------------------------------------------
// workload

namespace {

void fill(QuantTensor &t, std::mt19937_64 &rng) {
  for (auto &c : t.codes) c = static_cast<std::int8_t>(static_cast<std::uint8_t>(rng() >> 56));
}

fs::path tensor_path(const fs::path &dir, const std::string &name) { return dir / (name + ".cimt"); }

std::string head_name(const std::string &prefix, const std::string &what, std::size_t h) {
  return prefix + what + ".h" + std::to_string(h);
}

} // namespace

Workload generate_workload(const SimConfig &cfg) {
  const std::size_t d = cfg.attn.d_model;
  const double ws = 1.0 / (127.0 * std::sqrt(static_cast<double>(d)));
  std::mt19937_64 rng(cfg.seed);
  Workload w;
  w.x = QuantTensor({cfg.attn.n_tokens, d}, 1.0 / 127);
  fill(w.x, rng);
  if (cfg.attn.mode == AttentionMode::EncoderDecoder) {
    w.x_enc = QuantTensor({cfg.attn.n_enc, d}, 1.0 / 127);
    fill(w.x_enc, rng);
  }
  for (auto *t : {&w.wq, &w.wk, &w.wv, &w.wo}) {
    *t = QuantTensor({d, d}, ws);
    fill(*t, rng);
  }
  return w;
}

void write_workload(const Workload &w, std::size_t heads, const fs::path &dir) {
  fs::create_directories(dir);
  write_tensor(tensor_path(dir, "X"), w.x);
  if (!w.x_enc.codes.empty()) write_tensor(tensor_path(dir, "X_enc"), w.x_enc);
  const auto split = split_heads(w, heads);
  for (std::size_t h = 0; h < heads; ++h) {
    write_tensor(tensor_path(dir, head_name("", "Wq", h)), split.heads[h].wq);
    write_tensor(tensor_path(dir, head_name("", "Wk", h)), split.heads[h].wk);
    write_tensor(tensor_path(dir, head_name("", "Wv", h)), split.heads[h].wv);
  }
  write_tensor(tensor_path(dir, "Wo"), w.wo);
}

Workload read_workload(const fs::path &dir, const SimConfig &cfg) {
  Workload w;
  const std::size_t d = cfg.attn.d_model, heads = cfg.attn.n_heads, dh = cfg.attn.d_head();
  auto load = [&](const std::string &name, Shape expect) {
    auto t = read_quant_tensor(tensor_path(dir, name));
    if (t.shape != expect)
      throw InvariantViolation("workload tensor " + name + " is " + shape_string(t.shape) + ", expected " +
                               shape_string(expect));
    return t;
  };
  w.x = load("X", {cfg.attn.n_tokens, d});
  if (cfg.attn.mode == AttentionMode::EncoderDecoder) w.x_enc = load("X_enc", {cfg.attn.n_enc, d});
  for (auto [name, full] : {std::pair{"Wq", &w.wq}, std::pair{"Wk", &w.wk}, std::pair{"Wv", &w.wv}}) {
    for (std::size_t h = 0; h < heads; ++h) {
      const auto part = load(head_name("", name, h), {d, dh});
      if (h == 0) *full = QuantTensor({d, d}, part.scale);
      else if (part.scale != full->scale)
        throw InvariantViolation(std::string("workload heads of ") + name + " carry different scales");
      for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < dh; ++c) full->at(r, h * dh + c) = part.at(r, c);
    }
  }
  w.wo = load("Wo", {d, d});
  return w;
}

AttentionWeights split_heads(const Workload &w, std::size_t heads) {
  const std::size_t d = w.wq.rows(), dh = d / heads;
  AttentionWeights out;
  out.wo = w.wo;
  for (std::size_t h = 0; h < heads; ++h) {
    HeadWeights hw;
    for (auto [src, dst] : {std::pair{&w.wq, &hw.wq}, std::pair{&w.wk, &hw.wk}, std::pair{&w.wv, &hw.wv}}) {
      *dst = QuantTensor({d, dh}, src->scale);
      for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < dh; ++c) dst->at(r, c) = src->at(r, h * dh + c);
    }
    out.heads.push_back(std::move(hw));
  }
  return out;
}

// ---------------------------------------------------------------------------
// stages of a run

namespace {

struct StageSpec {
  std::string prefix;
  AttentionKind kind;
  bool causal;
  std::string xq, xkv; // bundle tensor names
};

std::vector<StageSpec> stages_for(const SimConfig &cfg) {
  switch (cfg.attn.mode) {
  case AttentionMode::EncoderOnly: return {{"", AttentionKind::SelfEncoder, cfg.attn.causal, "X", "X"}};
  case AttentionMode::DecoderOnly: return {{"", AttentionKind::SelfDecoder, true, "X", "X"}};
  case AttentionMode::EncoderDecoder:
    return {{"enc.", AttentionKind::SelfEncoder, false, "X_enc", "X_enc"},
            {"dec.", AttentionKind::SelfDecoder, true, "X", "X"},
            {"", AttentionKind::Cross, false, "dec.out", "enc.out"}};
  }
  return {};
}

void write_stage(const fs::path &dir, const std::string &prefix, const MhaResult &r) {
  for (std::size_t h = 0; h < r.heads.size(); ++h) {
    const auto &p = r.projected[h];
    const auto &hr = r.heads[h];
    write_tensor(tensor_path(dir, head_name(prefix, "attn", h)), hr.out);
    write_tensor(tensor_path(dir, head_name(prefix, "Q", h)), p.q);
    write_tensor(tensor_path(dir, head_name(prefix, "K", h)), p.k);
    write_tensor(tensor_path(dir, head_name(prefix, "V", h)), p.v);
    write_tensor(tensor_path(dir, head_name(prefix, "Qacc", h)), p.q_acc);
    write_tensor(tensor_path(dir, head_name(prefix, "Kacc", h)), p.k_acc);
    write_tensor(tensor_path(dir, head_name(prefix, "Vacc", h)), p.v_acc);
    const std::size_t nq = p.q.rows(), nk = p.k.rows();
    write_tensor(tensor_path(dir, head_name(prefix, "scores", h)),
                 QuantTensor({nq, nk}, hr.score_codes, r.contexts[h].score_scale));
    write_tensor(tensor_path(dir, head_name(prefix, "probs", h)), RealTensor{hr.probabilities, {nq, nk}});
    write_bytes(tensor_path(dir, head_name(prefix, "exp_lut", h)), encode_tensor(r.contexts[h].exp_lut.to_blob()));
  }
  if (!r.contexts.empty())
    write_bytes(tensor_path(dir, prefix + "recip_lut"), encode_tensor(r.contexts.front().recip.to_blob()));
  write_tensor(tensor_path(dir, prefix + "concat"), r.concat);
  write_tensor(tensor_path(dir, prefix + "out_acc"), r.out_acc);
  write_tensor(tensor_path(dir, prefix + "out"), r.out);
}

HeadContext rebuild_context(const SimConfig &cfg, double score_scale) {
  HeadContext ctx;
  ctx.score_scale = score_scale;
  ctx.exp_lut = ExpLut::build(score_scale, cfg.luts.exp_mode, cfg.luts.z_quant_max);
  ctx.recip = RecipLut::build(cfg.luts.recip_index_bits, cfg.luts.recip_mode);
  ctx.denominator = cfg.luts.denominator;
  ctx.flow = cfg.attn.flow;
  return ctx;
}

std::vector<double> dequantized(const QuantTensor &t) {
  std::vector<double> out(t.codes.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = t.codes[i] * t.scale;
  return out;
}

std::vector<int> ints(const QuantTensor &t) { return {t.codes.begin(), t.codes.end()}; }

std::vector<int> transposed_ints(const QuantTensor &t) {
  std::vector<int> out(t.codes.size());
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) out[c * t.rows() + r] = t.at(r, c);
  return out;
}

struct Tally {
  std::uint64_t n = 0, violations = 0;
  double max_err = 0, sum_err = 0, max_bound = 0;
  void add(double err, double bound) {
    ++n;
    max_err = std::max(max_err, err);
    sum_err += err;
    max_bound = std::max(max_bound, bound);
    violations += err > bound;
  }
  json to_json() const {
    return {{"elements", n}, {"max_abs_error", max_err}, {"mean_abs_error", n ? sum_err / n : 0.0},
            {"max_bound", max_bound}, {"violations", violations}};
  }
};

void fill_report(ErrorReport &r, const Tally &t) {
  r.elements = t.n;
  r.max_abs_error = t.max_err;
  r.mean_abs_error = t.n ? t.sum_err / t.n : 0.0;
  r.max_bound = t.max_bound;
  r.violations = t.violations;
}

ErrorReport compare_float(const fs::path &dir, const SimConfig &cfg) {
  ErrorReport rep;
  rep.oracle = to_string(OracleKind::FloatAttention);
  const std::size_t h = cfg.attn.n_heads, dh = cfg.attn.d_head();
  const auto wo = read_quant_tensor(tensor_path(dir, "Wo"));
  const auto wo_real = dequantized(wo);
  Tally out_tally;
  for (const auto &st : stages_for(cfg)) {
    Tally head_tally, stage_out;
    std::vector<std::vector<double>> rows;
    std::vector<std::vector<double>> head_refs;
    std::size_t nq = 0;
    for (std::size_t i = 0; i < h; ++i) {
      const auto q = read_quant_tensor(tensor_path(dir, head_name(st.prefix, "Q", i)));
      const auto k = read_quant_tensor(tensor_path(dir, head_name(st.prefix, "K", i)));
      const auto v = read_quant_tensor(tensor_path(dir, head_name(st.prefix, "V", i)));
      const auto scores = read_quant_tensor(tensor_path(dir, head_name(st.prefix, "scores", i)));
      HeadResult hr;
      hr.out = read_quant_tensor(tensor_path(dir, head_name(st.prefix, "attn", i)));
      hr.score_codes = scores.codes;
      nq = q.rows();
      const auto ctx = rebuild_context(cfg, scores.scale);
      const auto ref = oracle::head_attention(dequantized(q), dequantized(k), dequantized(v), nq, k.rows(), dh, st.causal);
      const auto bounds = head_row_bounds(hr, v, ctx, st.causal);
      for (std::size_t r = 0; r < nq; ++r)
        for (std::size_t c = 0; c < dh; ++c)
          head_tally.add(std::abs(hr.out.at(r, c) * hr.out.scale - ref.out[r * dh + c]), bounds[r]);
      rows.push_back(bounds);
      head_refs.push_back(ref.out);
    }
    const auto concat = read_quant_tensor(tensor_path(dir, st.prefix + "concat"));
    const auto out = read_quant_tensor(tensor_path(dir, st.prefix + "out"));
    const std::size_t d = cfg.attn.d_model;
    const auto bounds = output_bounds(rows, dh, wo, concat.scale, out.scale);
    for (std::size_t r = 0; r < nq; ++r)
      for (std::size_t c = 0; c < d; ++c) {
        long double ref = 0;
        for (std::size_t kk = 0; kk < d; ++kk)
          ref += static_cast<long double>(head_refs[kk / dh][r * dh + kk % dh]) * wo_real[kk * d + c];
        const double err = std::abs(out.at(r, c) * out.scale - static_cast<double>(ref));
        stage_out.add(err, bounds[r * d + c]);
        out_tally.add(err, bounds[r * d + c]);
      }
    rep.violations += head_tally.violations;
    rep.details[st.prefix.empty() ? "final" : st.prefix.substr(0, st.prefix.size() - 1)] = {
        {"heads", head_tally.to_json()}, {"output", stage_out.to_json()}};
  }
  const auto head_violations = rep.violations;
  fill_report(rep, out_tally);
  rep.violations += head_violations;
  return rep;
}

ErrorReport compare_gemm(const fs::path &dir, const SimConfig &cfg) {
  ErrorReport rep;
  rep.oracle = to_string(OracleKind::IntegerGemm);
  const std::size_t h = cfg.attn.n_heads, d = cfg.attn.d_model, dh = cfg.attn.d_head();
  const auto w = split_heads(read_workload(dir, cfg), h);
  Tally t;
  auto check = [&](const QuantTensor &x, const QuantTensor &wt, const AccTensor &acc) {
    const auto ref = oracle::gemm_abt(ints(x), transposed_ints(wt), x.rows(), wt.cols(), x.cols());
    if (acc.values.size() != ref.size()) throw InvariantViolation("accumulator shape does not match the oracle");
    for (std::size_t i = 0; i < ref.size(); ++i) t.add(std::abs(static_cast<double>(acc.values[i] - ref[i])), 0.0);
  };
  for (const auto &st : stages_for(cfg)) {
    const auto xq = read_quant_tensor(tensor_path(dir, st.xq));
    const auto xkv = read_quant_tensor(tensor_path(dir, st.xkv));
    for (std::size_t i = 0; i < h; ++i) {
      check(xq, w.heads[i].wq, read_acc_tensor(tensor_path(dir, head_name(st.prefix, "Qacc", i))));
      check(xkv, w.heads[i].wk, read_acc_tensor(tensor_path(dir, head_name(st.prefix, "Kacc", i))));
      check(xkv, w.heads[i].wv, read_acc_tensor(tensor_path(dir, head_name(st.prefix, "Vacc", i))));
    }
    check(read_quant_tensor(tensor_path(dir, st.prefix + "concat")), w.wo,
          read_acc_tensor(tensor_path(dir, st.prefix + "out_acc")));
  }
  (void)d;
  (void)dh;
  fill_report(rep, t);
  return rep;
}

ErrorReport compare_softmax(const fs::path &dir, const SimConfig &cfg) {
  ErrorReport rep;
  rep.oracle = to_string(OracleKind::SafeSoftmax);
  const bool exact = cfg.luts.exp_mode.is_exact();
  Tally t;
  double row_sum_total = 0;
  for (const auto &st : stages_for(cfg))
    for (std::size_t i = 0; i < cfg.attn.n_heads; ++i) {
      const auto scores = read_quant_tensor(tensor_path(dir, head_name(st.prefix, "scores", i)));
      const auto probs = read_real_tensor(tensor_path(dir, head_name(st.prefix, "probs", i)));
      const auto ctx = rebuild_context(cfg, scores.scale);
      const auto terms = softmax_error_terms(ctx.exp_lut, ctx.recip, ctx.denominator);
      const std::size_t nq = scores.rows(), nk = scores.cols();
      for (std::size_t r = 0; r < nq; ++r) {
        const std::size_t n = st.causal ? std::min(nk, r + 1) : nk;
        const std::span<const std::int8_t> z(scores.codes.data() + r * nk, n);
        std::vector<double> zr(n);
        for (std::size_t j = 0; j < n; ++j) zr[j] = z[j] * scores.scale;
        const auto ref = oracle::softmax(zr);
        const double bound = exact ? 1e-9 : split_l1_bound(n, ideal_denominator(z, ctx.exp_lut), terms);
        double sum = 0;
        for (std::size_t j = 0; j < n; ++j) {
          const double p = probs.values[r * nk + j];
          sum += p;
          t.add(std::abs(p - ref[j]), bound);
        }
        const double dev = std::abs(sum - 1.0);
        ++rep.rows;
        row_sum_total += dev;
        rep.row_sum_max_deviation = std::max(rep.row_sum_max_deviation, dev);
        rep.row_sum_violations += dev > bound;
        if (n >= 2) {
          auto sorted = ref;
          std::partial_sort(sorted.begin(), sorted.begin() + 2, sorted.end(), std::greater<>());
          if (sorted[0] - sorted[1] > 2.0 / 127) {
            ++rep.argmax_rows;
            const auto ref_arg = std::max_element(ref.begin(), ref.end()) - ref.begin();
            const double *row = probs.values.data() + r * nk;
            const double top = *std::max_element(row, row + n);
            rep.argmax_agree += std::count(row, row + n, top) == 1 && row[ref_arg] == top;
          }
        }
      }
    }
  fill_report(rep, t);
  rep.row_sum_mean_deviation = rep.rows ? row_sum_total / rep.rows : 0.0;
  return rep;
}

} // namespace

std::optional<double> ErrorReport::argmax_agreement_rate() const {
  if (argmax_rows == 0) return std::nullopt;
  return static_cast<double>(argmax_agree) / static_cast<double>(argmax_rows);
}

json ErrorReport::to_json() const {
  json j{{"oracle", oracle},
         {"status", passed() ? "PASS" : "FAILED"},
         {"elements", elements},
         {"max_abs_error", max_abs_error},
         {"mean_abs_error", mean_abs_error},
         {"bounds", {{"max_element_bound", max_bound}, {"violations", violations}}}};
  if (oracle == to_string(OracleKind::SafeSoftmax)) {
    j["row_sum_deviation"] = {{"rows", rows},
                              {"max", row_sum_max_deviation},
                              {"mean", row_sum_mean_deviation},
                              {"violations", row_sum_violations}};
    const auto rate = argmax_agreement_rate();
    j["argmax_agreement_rate"] = rate ? json(*rate) : json(nullptr);
    j["argmax_rows"] = argmax_rows;
  }
  if (!details.empty()) j["details"] = details;
  return j;
}

std::optional<OracleKind> parse_oracle(const std::string &s) {
  if (s == "FloatAttention" || s == "float") return OracleKind::FloatAttention;
  if (s == "IntegerGemm" || s == "gemm") return OracleKind::IntegerGemm;
  if (s == "SafeSoftmax" || s == "softmax") return OracleKind::SafeSoftmax;
  return std::nullopt;
}

std::string to_string(OracleKind k) {
  switch (k) {
  case OracleKind::FloatAttention: return "FloatAttention";
  case OracleKind::IntegerGemm: return "IntegerGemm";
  case OracleKind::SafeSoftmax: return "SafeSoftmax";
  }
  return "?";
}

ErrorReport compare_bundle(const fs::path &out, OracleKind oracle) {
  const auto cfg = load_config(out / "config.json");
  switch (oracle) {
  case OracleKind::FloatAttention: return compare_float(out, cfg);
  case OracleKind::IntegerGemm: return compare_gemm(out, cfg);
  case OracleKind::SafeSoftmax: return compare_softmax(out, cfg);
  }
  throw SimError("unknown oracle");
}

// ---------------------------------------------------------------------------
// run

namespace {

void write_json(const fs::path &path, const json &j) {
  std::ofstream os(path);
  if (!os) throw SimError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

json paired_latency(const AttentionConfig &cfg, const CostModel &costs, Scope scope) {
  const auto s = schedule_attention(cfg, costs, Pipeline::SplitLut, scope);
  const auto n = schedule_attention(cfg, costs, Pipeline::NonSplitBaseline, scope);
  const double ratio = static_cast<double>(s.total_latency_cycles) / static_cast<double>(n.total_latency_cycles);
  return {{"split_cycles", s.total_latency_cycles},
          {"nonsplit_cycles", n.total_latency_cycles},
          {"latency_ratio", ratio},
          {"reduction", 1.0 - ratio}};
}

} // namespace

RunResult run_simulation(const SimConfig &cfg, const fs::path &out, bool event_log) {
  RunResult res;
  fs::create_directories(out);
  write_json(out / "config.json", cfg.to_json());
  const Workload wl = cfg.workload.empty() ? generate_workload(cfg) : read_workload(cfg.workload, cfg);
  write_workload(wl, cfg.attn.n_heads, out);
  const auto weights = split_heads(wl, cfg.attn.n_heads);

  CimMacro macro(event_log);
  std::map<std::string, QuantTensor> tensors{{"X", wl.x}, {"X_enc", wl.x_enc}};
  std::uint64_t fallback_rows = 0;
  for (const auto &st : stages_for(cfg)) {
    const auto &xq = tensors.at(st.xq);
    const auto &xkv = tensors.at(st.xkv);
    auto r = multi_head_attention(xq, xkv, weights, st.kind, st.causal, cfg.luts, cfg.attn.flow, cfg.pipeline, {},
                                  &macro);
    fallback_rows += r.fallback_rows;
    if (st.kind == AttentionKind::SelfDecoder) {
      CimMacro side;
      auto enc = multi_head_attention(xq, xkv, weights, AttentionKind::SelfEncoder, true, cfg.luts, cfg.attn.flow,
                                      cfg.pipeline, {}, &side);
      bool same = enc.out.codes == r.out.codes && enc.out.scale == r.out.scale;
      for (std::size_t h = 0; h < r.heads.size(); ++h) same = same && enc.heads[h].out.codes == r.heads[h].out.codes;
      res.summary += std::string("decoder replay vs causal encoder: ") + (same ? "bit-exact" : "MISMATCH") + "\n";
      if (!same) res.invariant_failures.push_back("decoder replay differs from causal encoder (" + st.prefix + ")");
    }
    write_stage(out, st.prefix, r);
    tensors[st.prefix + "out"] = r.out;
  }

  if (event_log) {
    std::ofstream os(out / "events.log");
    macro.events().write_csv(os);
    if (auto bad = macro.events().check_bank_exclusivity()) res.invariant_failures.push_back("event log: " + *bad);
  }

  // Timing.
  const auto prog = build_attention_program(cfg.attn, cfg.pipeline, Scope::Full);
  const auto sched = schedule_program(prog, cfg.costs);
  if (auto bad = check_schedule(prog, sched)) res.invariant_failures.push_back("schedule: " + *bad);
  const auto report = report_for(prog, sched, cfg.attn, cfg.pipeline, Scope::Full, cfg.costs);
  const auto a2a = schedule_attention(cfg.attn, cfg.costs, cfg.pipeline, Scope::A2A);
  const auto proxy = efficiency_proxy(report.ops, cfg.sparsity, report.total_latency_cycles, EnergyCosts{});
  const auto paired_a2a = paired_latency(cfg.attn, cfg.costs, Scope::A2A);
  res.cycle_report = {{"config", cfg.to_json()},
                      {"assumptions", assumption_ledger()},
                      {"schedule", report.to_json()},
                      {"a2a_schedule", a2a.to_json()},
                      {"paired", {{"full", paired_latency(cfg.attn, cfg.costs, Scope::Full)}, {"a2a", paired_a2a}}},
                      {"op_counts", report.ops.to_json(cfg.sparsity)},
                      {"efficiency_proxy",
                       {{"ops_per_cycle", proxy.ops_per_cycle}, {"ops_per_proxy_energy", proxy.ops_per_proxy_energy}}},
                      {"functional_macro",
                       {{"mac_cycles", macro.stats().mac_cycles},
                        {"matvecs", macro.stats().matvecs},
                        {"weight_rows_written", macro.stats().weight_rows_written}}}};
  write_json(out / "cycle_report.json", res.cycle_report);
  std::ostringstream line;
  line << "latency ratio split/nonsplit (a2a): " << paired_a2a["latency_ratio"].get<double>() << " (reduction "
       << 100.0 * paired_a2a["reduction"].get<double>() << "%)\n";
  res.summary += line.str();

  // Numerics.
  bool budgets_ok = true;
  json reports;
  for (auto k : {OracleKind::FloatAttention, OracleKind::SafeSoftmax, OracleKind::IntegerGemm}) {
    const auto rep = compare_bundle(out, k);
    budgets_ok = budgets_ok && rep.passed();
    reports[to_string(k)] = rep.to_json();
    std::ostringstream os;
    os << to_string(k) << ": " << (rep.passed() ? "PASS" : "FAILED") << " max_abs_error " << rep.max_abs_error
       << " violations " << rep.violations + rep.row_sum_violations << "\n";
    res.summary += os.str();
  }
  res.error_report = {{"config", cfg.to_json()},
                      {"assumptions", assumption_ledger()},
                      {"status", budgets_ok && res.invariant_failures.empty() ? "PASS" : "FAILED"},
                      {"fallback_rows", fallback_rows},
                      {"invariant_failures", res.invariant_failures},
                      {"oracles", reports}};
  write_json(out / "error_report.json", res.error_report);

  if (!res.invariant_failures.empty()) res.exit_code = kExitInvariant;
  else if (!budgets_ok) res.exit_code = kExitBudget;
  return res;
}

// ---------------------------------------------------------------------------
// softmax evaluation

json SoftmaxEval::to_json() const {
  return {{"n", n},
          {"rows", rows},
          {"scale", scale},
          {"mode", mode.to_string()},
          {"max_abs_error", max_abs_error},
          {"row_bound", row_bound},
          {"violations", violations},
          {"row_sum_deviation", {{"max", row_sum_max_deviation}, {"mean", row_sum_mean_deviation}}},
          {"argmax_rows", argmax_rows},
          {"argmax_agreement_rate", argmax_rate()},
          {"fallback_rows", fallback_rows}};
}

SoftmaxEval evaluate_softmax(std::size_t n, double scale, const LutEntryMode &mode, std::uint64_t seed,
                             std::size_t rows, const LutSettings &luts) {
  if (n == 0) throw ConfigError("--n", "must be positive");
  if (!(scale > 0.0)) throw ConfigError("--scale", "must be positive");
  SoftmaxEval ev;
  ev.n = n;
  ev.rows = rows;
  ev.scale = scale;
  ev.mode = mode;
  const bool exact = mode.is_exact();
  ev.row_bound = exact ? 1e-9 : row_probability_bound(n);
  const auto lut = ExpLut::build(scale, mode, luts.z_quant_max);
  const auto recip = RecipLut::build(luts.recip_index_bits, exact ? LutEntryMode::exact() : luts.recip_mode);
  std::mt19937_64 rng(seed);
  std::vector<std::int8_t> z(n);
  std::vector<double> zr(n);
  SoftmaxDiagnostics diag;
  double row_sum_total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) {
      z[j] = static_cast<std::int8_t>(static_cast<std::uint8_t>(rng() >> 56));
      zr[j] = z[j] * scale;
    }
    const auto res = stream_split_softmax_row(z, lut, recip, luts.denominator, &diag);
    const auto ref = safe_softmax_ref(zr);
    double row_err = 0, sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      row_err = std::max(row_err, std::abs(res.probabilities[j] - ref[j]));
      if (!exact) row_err = std::max(row_err, std::abs(res.probability_codes[j] / 127.0 - ref[j]));
      sum += res.probabilities[j];
    }
    ev.max_abs_error = std::max(ev.max_abs_error, row_err);
    ev.violations += row_err > ev.row_bound;
    const double dev = std::abs(sum - 1.0);
    ev.row_sum_max_deviation = std::max(ev.row_sum_max_deviation, dev);
    row_sum_total += dev;
    if (n >= 2) {
      auto sorted = ref;
      std::partial_sort(sorted.begin(), sorted.begin() + 2, sorted.end(), std::greater<>());
      if (sorted[0] - sorted[1] > 2.0 / 127) {
        ++ev.argmax_rows;
        const auto ref_arg = std::max_element(ref.begin(), ref.end()) - ref.begin();
        const auto &codes = res.probability_codes;
        const auto top = *std::max_element(codes.begin(), codes.end());
        ev.argmax_agree += std::count(codes.begin(), codes.end(), top) == 1 && codes[ref_arg] == top;
      }
    }
  }
  ev.fallback_rows = diag.fallback_rows;
  ev.row_sum_mean_deviation = rows ? row_sum_total / rows : 0.0;
  return ev;
}

void accumulate(SoftmaxEval &acc, const SoftmaxEval &part) {
  const double total = acc.row_sum_mean_deviation * acc.rows + part.row_sum_mean_deviation * part.rows;
  acc.n = std::max(acc.n, part.n);
  acc.rows += part.rows;
  acc.scale = part.scale;
  acc.mode = part.mode;
  acc.max_abs_error = std::max(acc.max_abs_error, part.max_abs_error);
  acc.row_bound = std::max(acc.row_bound, part.row_bound);
  acc.violations += part.violations;
  acc.row_sum_max_deviation = std::max(acc.row_sum_max_deviation, part.row_sum_max_deviation);
  acc.row_sum_mean_deviation = acc.rows ? total / acc.rows : 0.0;
  acc.argmax_rows += part.argmax_rows;
  acc.argmax_agree += part.argmax_agree;
  acc.fallback_rows += part.fallback_rows;
}

// ---------------------------------------------------------------------------
// sweep

unsigned sweep_threads() {
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char *env = std::getenv("CIM_SIM_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) return std::min<unsigned>(hw, static_cast<unsigned>(v));
    } catch (const std::exception &) {
    }
    throw ConfigError("CIM_SIM_THREADS", std::string("must be a positive integer, got \"") + env + "\"");
  }
  return hw;
}

std::string run_sweep(const json &base, const std::string &vary, unsigned threads) {
  const auto eq = vary.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == vary.size())
    throw ConfigError("--vary", "expected <field>=<v1>,<v2>,...");
  const std::string field = vary.substr(0, eq);
  std::vector<json> values;
  std::stringstream ss(vary.substr(eq + 1));
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      values.push_back(json::parse(item));
    } catch (const json::parse_error &) {
      values.push_back(item);
    }
  }
  std::vector<std::string> keys;
  std::stringstream fs_(field);
  for (std::string k; std::getline(fs_, k, '.');) keys.push_back(k);

  std::vector<SimConfig> cfgs;
  for (const auto &v : values) {
    json j = base;
    json *node = &j;
    for (std::size_t i = 0; i + 1 < keys.size(); ++i) node = &(*node)[keys[i]];
    (*node)[keys.back()] = v;
    cfgs.push_back(parse_config(j));
  }

  std::vector<std::string> rows(cfgs.size() * 2);
  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr err;
  auto worker = [&] {
    for (std::size_t i; (i = next++) < rows.size();) {
      try {
        const auto &c = cfgs[i / 2];
        const auto pipe = i % 2 == 0 ? Pipeline::SplitLut : Pipeline::NonSplitBaseline;
        const auto r = schedule_attention(c.attn, c.costs, pipe, Scope::Full);
        const auto proxy = efficiency_proxy(r.ops, c.sparsity, r.total_latency_cycles, EnergyCosts{});
        std::ostringstream os;
        os.precision(15);
        os << values[i / 2].dump() << ',' << to_string(c.attn.mode) << ',' << c.attn.n_tokens << ',' << c.attn.n_enc
           << ',' << c.attn.d_model << ',' << c.attn.n_heads << ',' << c.attn.d_head() << ',' << to_string(pipe)
           << ',' << c.sparsity.activation << ',' << c.sparsity.weight << ',' << r.total_latency_cycles;
        for (auto v : r.stage_cycles) os << ',' << v;
        os << ',' << r.pipeline_overlap_cycles << ',' << r.latency_us() << ',' << r.ops.dense_ops() << ','
           << r.ops.effective_ops(c.sparsity) << ',' << proxy.ops_per_cycle << ',' << proxy.ops_per_proxy_energy;
        rows[i] = os.str();
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!err) err = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < std::max(1u, threads); ++t) pool.emplace_back(worker);
  for (auto &t : pool) t.join();
  if (err) std::rethrow_exception(err);

  std::string csv = "sweep:" + field + ",mode,N,n_enc,d_model,h,d_head,pipeline,activation_sparsity,weight_sparsity,total_cycles";
  for (std::size_t s = 0; s < kStageCount; ++s) csv += "," + to_string(static_cast<Stage>(s));
  csv += ",overlap_cycles,latency_us,dense_ops,effective_ops,ops_per_cycle,ops_per_proxy_energy\n";
  for (const auto &r : rows) csv += r + "\n";
  return csv;
}

} // namespace cimsim
