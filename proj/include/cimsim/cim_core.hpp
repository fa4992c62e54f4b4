// SPDX-License-Identifier: Apache-2.0
#pragma once

// Functional model of one CIM core: 32 partitions, each holding two banks
// of 64 nibble-split int8 weights, an adder tree over 64 lanes and a
// 64-slot accumulator file filled by bit-serial (LSB-first) matvecs.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cimsim/fxp.hpp"
#include "cimsim/tensor_io.hpp"

namespace cimsim {

inline constexpr std::size_t kPartitions = 32;
inline constexpr std::size_t kBanks = 2;
inline constexpr std::size_t kLanes = 64;
inline constexpr std::size_t kAccSlots = 64;
inline constexpr int kInputBits = 8;
inline constexpr int kWritePortBits = 128;
inline constexpr int kInputPortBits = 64;

struct NibblePair {
  std::int8_t msb = 0;  // signed, [-8, 7]
  std::uint8_t lsb = 0; // unsigned, [0, 15]
};

NibblePair split_weight(std::int8_t w);
std::int8_t join_weight(const NibblePair &n);

class WeightBank {
public:
  // Shorter rows are zero-padded to 64 lanes.
  void store(std::span<const std::int8_t> weights);
  std::int8_t weight(std::size_t lane) const { return join_weight({msb_[lane], lsb_[lane]}); }
  const NibblePair nibbles(std::size_t lane) const { return {msb_[lane], lsb_[lane]}; }
  std::array<std::int8_t, kLanes> read() const;
  std::size_t lanes_loaded() const { return lanes_loaded_; }

private:
  std::array<std::int8_t, kLanes> msb_{};
  std::array<std::uint8_t, kLanes> lsb_{};
  std::size_t lanes_loaded_ = 0;
};

enum class EventOp { Write, Mac, Output };
std::string to_string(EventOp op);

struct Event {
  std::uint64_t cycle = 0;
  std::size_t partition = 0;
  int bank = 0;
  EventOp op = EventOp::Mac;
  std::size_t lane_count = 0;
};

class EventLog {
public:
  bool enabled = false;
  void record(const Event &e) {
    if (enabled) events_.push_back(e);
  }
  const std::vector<Event> &events() const { return events_; }
  void clear() { events_.clear(); }
  // One `cycle,partition,bank,op,lane_count` line per event.
  void write_csv(std::ostream &os) const;
  // Describes the first cycle where one partition touched both banks with
  // reads, or wrote the bank it was reading; nullopt when clean.
  std::optional<std::string> check_bank_exclusivity() const;

private:
  std::vector<Event> events_;
};

class Partition {
public:
  // Rejects a write to the bank that an in-flight matvec is reading.
  void write_bank(int bank, std::span<const std::int8_t> weights);
  const WeightBank &bank(int b) const { return banks_.at(static_cast<std::size_t>(b)); }

  // Selects the bank and clears the next accumulator slot.
  void begin_matvec(int bank);
  // One bit-serial cycle; bit_index must equal the current phase.
  void mac_cycle(std::span<const std::uint8_t> input_bits, int bit_index);
  // Requires all 8 cycles; returns the finished slot value.
  std::int32_t end_matvec();

  // Adder-tree sum of the recombined weights on lanes whose input bit is 1.
  std::int64_t tree_sum(std::span<const std::uint8_t> input_bits) const;

  bool in_matvec() const { return active_.has_value(); }
  std::optional<int> active_bank() const { return active_; }
  int cycle_phase() const { return phase_; }
  std::size_t slots_filled() const { return slot_; }

  // Emits the accumulator file in slot order 0..63 and rewinds the counter.
  std::array<std::int32_t, kAccSlots> cycle_output();
  void reset_accumulators();

private:
  std::array<WeightBank, kBanks> banks_;
  std::array<std::int32_t, kAccSlots> acc_{};
  std::optional<int> active_;
  int phase_ = 0;
  std::size_t slot_ = 0;
  std::size_t current_ = 0;
  std::int64_t running_ = 0;
};

struct MacroStats {
  std::uint64_t mac_cycles = 0;
  std::uint64_t matvecs = 0;
  std::uint64_t weight_rows_written = 0;
};

class CimMacro {
public:
  explicit CimMacro(bool record_events = false);

  void write_weights(std::size_t partition, int bank, std::span<const std::int8_t> weights);
  std::int8_t read_weight(std::size_t partition, int bank, std::size_t lane) const;

  // One activation vector, broadcast over the shared 64-lane input to the
  // first `partitions` partitions, 8 bit-serial cycles. Returns one dot
  // product per partition.
  std::vector<std::int32_t> matvec_broadcast(int bank, std::span<const std::int8_t> activations,
                                             std::size_t partitions = kPartitions);
  // Single-partition form.
  std::int32_t matvec_int8(std::size_t partition, int bank, std::span<const std::int8_t> activations);

  // Stepping interface: begin on every partition in [0, partitions), then
  // present one bit plane per cycle, then finish.
  void begin_matvec(int bank, std::size_t partitions = kPartitions);
  void mac_cycle(std::span<const std::int8_t> activations, int bit_index);
  std::vector<std::int32_t> end_matvec();

  std::array<std::int32_t, kAccSlots> cycle_output(std::size_t partition);

  Partition &partition(std::size_t p) { return partitions_.at(p); }
  const Partition &partition(std::size_t p) const { return partitions_.at(p); }
  EventLog &events() { return events_; }
  const EventLog &events() const { return events_; }
  const MacroStats &stats() const { return stats_; }
  std::uint64_t cycle() const { return cycle_; }

  // The full weight image (32 x 2 x 64 int8) in a CIMT container.
  TensorBlob dump_weights() const;
  void load_weights(const TensorBlob &blob);

private:
  std::array<Partition, kPartitions> partitions_;
  EventLog events_;
  MacroStats stats_;
  std::uint64_t cycle_ = 0;
  std::size_t stepping_ = 0;
  int stepping_bank_ = 0;
};

// Loads up to 32 resident rows (<= 64 lanes each) into `bank` of partitions
// 0..R-1, streams up to 64 vectors through them and drains the accumulators.
// Returns out[m * R + r] = streamed[m] . resident[r].
std::vector<std::int32_t> run_step(CimMacro &macro, int bank,
                                   const std::vector<std::span<const std::int8_t>> &resident,
                                   const std::vector<std::span<const std::int8_t>> &streamed);

struct TileStep {
  std::size_t chunk = 0;
  std::size_t lane_begin = 0, lane_count = 0;
  std::size_t row_begin = 0, row_count = 0;     // resident rows -> partitions
  std::size_t block_begin = 0, block_count = 0; // streamed rows -> accumulator slots
  int bank = 0;
};

// How a (streamed M x depth) . (resident R x depth)^T product is cut into
// macro steps: 64-lane chunks of the dot-product dimension, groups of 32
// resident rows and blocks of 64 streamed rows. Banks alternate per step.
struct MappingPlan {
  std::size_t resident_rows = 0;
  std::size_t streamed_rows = 0;
  std::size_t depth = 0;
  std::vector<TileStep> steps;

  // Throws InvariantViolation unless every (row, lane, streamed row) is
  // covered exactly once and every tile fits the macro.
  void validate() const;
};

MappingPlan plan_tiled_matmul(std::size_t resident_rows, std::size_t streamed_rows, std::size_t depth);

// out (M x R) = streamed (M x depth) . stored (R x depth)^T, accumulated
// across chunks in the intermediate accumulator. Scale = product of scales.
AccTensor tiled_matmul(CimMacro &macro, const MappingPlan &plan, const QuantTensor &stored,
                       const QuantTensor &streamed);

} // namespace cimsim
