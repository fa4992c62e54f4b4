// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cimsim/attention.hpp"
#include "cimsim/perf_model.hpp"
#include "json.hpp"

namespace cimsim {

enum ExitCode : int {
  kExitOk = 0,
  kExitError = 1,
  kExitConfig = 2,
  kExitBudget = 3,
  kExitInvariant = 4,
};

struct SimConfig {
  AttentionConfig attn;
  Pipeline pipeline = Pipeline::SplitLut;
  LutSettings luts;
  CostModel costs;
  SparsityProfile sparsity;
  std::uint64_t seed = 1;
  std::string workload; // existing bundle directory; generated when empty

  nlohmann::json to_json() const;
};

// "exact", "fixed:<fraction bits>" or "fixed:UQ<i>.<f>".
LutEntryMode parse_lut_mode(const std::string &s, const std::string &field);

// Strict parse: unknown keys, wrong types and invalid values throw
// ConfigError with a JSON path.
SimConfig parse_config(const nlohmann::json &j);
SimConfig load_config(const std::filesystem::path &path);

// Modelling assumptions echoed into every report.
std::vector<std::string> assumption_ledger();

struct Workload {
  QuantTensor x;     // N x d_model
  QuantTensor x_enc; // n_enc x d_model, encoder_decoder only
  QuantTensor wq, wk, wv, wo;
};

// mt19937_64 seeded with cfg.seed; each code is the top byte of one draw,
// filled in the order X, X_enc, Wq, Wk, Wv, Wo. X has scale 1/127 and the
// weights 1/(127 sqrt(d_model)).
Workload generate_workload(const SimConfig &cfg);
// Bundle layout: X, X_enc, per-head Wq.h<i> / Wk.h<i> / Wv.h<i> (d_model x
// d_head) and Wo.
void write_workload(const Workload &w, std::size_t heads, const std::filesystem::path &dir);
Workload read_workload(const std::filesystem::path &dir, const SimConfig &cfg);

// Splits d_model x d_model projection weights into per-head column blocks.
AttentionWeights split_heads(const Workload &w, std::size_t heads);

struct ErrorReport {
  std::string oracle;
  std::uint64_t elements = 0;
  double max_abs_error = 0.0;
  double mean_abs_error = 0.0;
  double max_bound = 0.0; // largest per-element bound
  std::uint64_t violations = 0;
  // SafeSoftmax only.
  std::uint64_t rows = 0;
  double row_sum_max_deviation = 0.0;
  double row_sum_mean_deviation = 0.0;
  std::uint64_t row_sum_violations = 0;
  std::uint64_t argmax_rows = 0, argmax_agree = 0;
  nlohmann::json details = nlohmann::json::object();

  bool passed() const { return violations == 0 && row_sum_violations == 0; }
  std::optional<double> argmax_agreement_rate() const;
  nlohmann::json to_json() const;
};

enum class OracleKind { FloatAttention, IntegerGemm, SafeSoftmax };
std::optional<OracleKind> parse_oracle(const std::string &s);
std::string to_string(OracleKind k);

// Checks a run's output bundle against an independent oracle. The bundle's
// config.json supplies the settings.
ErrorReport compare_bundle(const std::filesystem::path &out, OracleKind oracle);

struct RunResult {
  int exit_code = kExitOk;
  std::vector<std::string> invariant_failures;
  nlohmann::json cycle_report;
  nlohmann::json error_report;
  std::string summary; // one line per check, for the console
};

RunResult run_simulation(const SimConfig &cfg, const std::filesystem::path &out, bool event_log);

struct SoftmaxEval {
  std::size_t n = 0, rows = 0;
  double scale = 0.0;
  LutEntryMode mode;
  double max_abs_error = 0.0; // int8 probability codes / 127 vs reference
  double row_bound = 0.0;
  std::uint64_t violations = 0;
  double row_sum_max_deviation = 0.0; // wide probabilities
  double row_sum_mean_deviation = 0.0;
  std::uint64_t argmax_rows = 0, argmax_agree = 0;
  std::uint64_t fallback_rows = 0;

  double argmax_rate() const { return argmax_rows ? static_cast<double>(argmax_agree) / argmax_rows : 1.0; }
  nlohmann::json to_json() const;
};

// Random int8 rows of length n, split softmax against the safe reference.
// Exact mode is held to 1e-9; fixed mode to n/254 + 2^-7 per row.
SoftmaxEval evaluate_softmax(std::size_t n, double scale, const LutEntryMode &mode, std::uint64_t seed,
                             std::size_t rows, const LutSettings &luts = {});

// Rows are appended to `acc` (used by the acceptance gate to pool lengths).
void accumulate(SoftmaxEval &acc, const SoftmaxEval &part);

// `vary` is "<field>=<v1>,<v2>,..." where field is a config key path such as
// "N" or "sparsity.activation". Emits one CSV row per value and pipeline.
std::string run_sweep(const nlohmann::json &base, const std::string &vary, unsigned threads);

// Worker count for sweeps: CIM_SIM_THREADS when set, else the hardware
// concurrency.
unsigned sweep_threads();

} // namespace cimsim
