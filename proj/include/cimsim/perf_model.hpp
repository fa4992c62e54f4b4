// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cimsim/attention.hpp"
#include "json.hpp"

namespace cimsim {

struct CostModel {
  std::uint64_t cycles_per_matvec = kInputBits;
  std::uint64_t write_beats_per_row = 4; // 512-bit row over the 128-bit write port
  std::uint64_t softmax_lut_read = 1;
  std::uint64_t nonsplit_softmax_read_passes = 3;
  std::uint64_t nonsplit_input_width = 32;
  std::uint64_t quantize_cycles = 1;
  double frequency_mhz = 400.0;

  // Throws ConfigError naming the field when a cost is below one cycle.
  void validate() const;
  nlohmann::json to_json() const;
  // Overrides entries of `base`; unknown keys are rejected.
  static CostModel from_json(const nlohmann::json &j, const CostModel &base);
};

// Softmax-side datapath width: one 512-bit word per beat.
inline constexpr std::uint64_t kSoftmaxDatapathBits = 512;
inline constexpr std::uint64_t kScoreBits = 32;

// Beats needed to move `count` values of `width` bits through the datapath.
std::uint64_t beats(std::uint64_t count, std::uint64_t width);

std::uint64_t job_cycles(const Job &j, const CostModel &c);

struct SparsityProfile {
  double activation = 0.0;
  double weight = 0.0;
  void validate() const;
};

struct OpCounts {
  // Dense multiply and add counts per stage (a MAC is one of each).
  std::uint64_t projection_mults = 0, qk_mults = 0, av_mults = 0, concat_mults = 0;
  std::uint64_t exp_lut_reads = 0, recip_lut_reads = 0;

  std::uint64_t dense_ops() const; // multiplies + adds over all stages
  std::uint64_t activation_ops() const;
  std::uint64_t weight_ops() const;
  double effective_ops(const SparsityProfile &s) const;
  std::uint64_t lut_reads() const { return exp_lut_reads + recip_lut_reads; }
  nlohmann::json to_json(const SparsityProfile &s = {}) const;
};

OpCounts count_ops(const AttentionConfig &cfg);

struct EnergyCosts {
  double mult = 1.0, add = 1.0, lut_read = 1.0;
};

struct EfficiencyProxy {
  double ops_per_cycle = 0.0;        // dense-equivalent ops per cycle
  double ops_per_proxy_energy = 0.0; // dense-equivalent ops per unit of effective energy
};

EfficiencyProxy efficiency_proxy(const OpCounts &ops, const SparsityProfile &s, std::uint64_t cycles,
                                 const EnergyCosts &e);

enum class Scope { A2A, Full };
std::string to_string(Scope s);

struct Schedule {
  std::vector<std::uint64_t> start, end;
  std::uint64_t total = 0;
};

// In-order list scheduling: every job starts once its resource is free and
// its dependencies have finished.
Schedule schedule_program(const Program &prog, const CostModel &c);

// Checks the schedule against the program: dependencies end before their
// users start, no resource runs two jobs at once and no bank is written
// while a compute job reads it. Returns a description of the first problem.
std::optional<std::string> check_schedule(const Program &prog, const Schedule &s);

// Job ids sorted by start cycle (ties by id).
std::vector<std::size_t> start_order(const Schedule &s);

inline constexpr std::size_t kStageCount = 6;

struct CycleReport {
  Pipeline pipeline = Pipeline::SplitLut;
  Scope scope = Scope::Full;
  std::array<std::uint64_t, kStageCount> stage_cycles{};
  std::array<std::uint64_t, 3> resource_busy{};
  std::uint64_t total_latency_cycles = 0;
  std::uint64_t pipeline_overlap_cycles = 0;
  std::vector<double> partition_utilization;
  OpCounts ops;
  CostModel costs;

  std::uint64_t stage(Stage s) const { return stage_cycles[static_cast<std::size_t>(s)]; }
  std::uint64_t stage_sum() const;
  std::uint64_t max_stage() const;
  double latency_us() const { return static_cast<double>(total_latency_cycles) / costs.frequency_mhz; }
  nlohmann::json to_json() const;
};

Program build_attention_program(const AttentionConfig &cfg, Pipeline pipeline, Scope scope);
CycleReport report_for(const Program &prog, const Schedule &s, const AttentionConfig &cfg, Pipeline pipeline,
                       Scope scope, const CostModel &c);
CycleReport schedule_attention(const AttentionConfig &cfg, const CostModel &c, Pipeline pipeline,
                               Scope scope = Scope::Full);

struct SensitivityPoint {
  std::string field;
  double factor = 1.0;
  std::uint64_t split_cycles = 0, nonsplit_cycles = 0;
  double reduction = 0.0;     // 1 - split / nonsplit
  double softmax_share = 0.0; // non-split softmax cycles / non-split total
  bool within_share() const { return reduction <= softmax_share + 1e-12; }
};

struct LatencyComparison {
  CycleReport split, nonsplit;
  double reduction = 0.0;
  double softmax_share = 0.0;
  std::vector<SensitivityPoint> sensitivity;
  bool sensitivity_ok() const;
  nlohmann::json to_json() const;
};

// Single-head encoder comparison of the two schedules in `scope`, plus a
// halve/double sweep over every cost entry.
LatencyComparison compare_latency(std::size_t n, std::size_t d_head, const CostModel &c, Scope scope = Scope::A2A);

} // namespace cimsim
