// SPDX-License-Identifier: Apache-2.0
#include "cimsim/cim_core.hpp"

#include <algorithm>
#include <limits>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "cimsim/error.hpp"

namespace cimsim {

NibblePair split_weight(std::int8_t w) {
  return {static_cast<std::int8_t>(w >> 4), static_cast<std::uint8_t>(w & 0xF)};
}

std::int8_t join_weight(const NibblePair &n) { return static_cast<std::int8_t>(n.msb * 16 + n.lsb); }

void WeightBank::store(std::span<const std::int8_t> weights) {
  if (weights.size() > kLanes)
    throw InvariantViolation("weight row of " + std::to_string(weights.size()) + " lanes exceeds 64");
  for (std::size_t j = 0; j < kLanes; ++j) {
    const auto n = split_weight(j < weights.size() ? weights[j] : 0);
    msb_[j] = n.msb;
    lsb_[j] = n.lsb;
  }
  lanes_loaded_ = weights.size();
}

std::array<std::int8_t, kLanes> WeightBank::read() const {
  std::array<std::int8_t, kLanes> out{};
  for (std::size_t j = 0; j < kLanes; ++j) out[j] = weight(j);
  return out;
}

std::string to_string(EventOp op) {
  switch (op) {
  case EventOp::Write: return "write";
  case EventOp::Mac: return "mac";
  case EventOp::Output: return "out";
  }
  return "?";
}

void EventLog::write_csv(std::ostream &os) const {
  for (const auto &e : events_)
    os << e.cycle << ',' << e.partition << ',' << e.bank << ',' << to_string(e.op) << ',' << e.lane_count << '\n';
}

std::optional<std::string> EventLog::check_bank_exclusivity() const {
  std::map<std::pair<std::uint64_t, std::size_t>, std::pair<std::set<int>, std::set<int>>> per_cycle;
  for (const auto &e : events_) {
    auto &[reads, writes] = per_cycle[{e.cycle, e.partition}];
    if (e.op == EventOp::Mac) reads.insert(e.bank);
    if (e.op == EventOp::Write) writes.insert(e.bank);
  }
  for (const auto &[key, rw] : per_cycle) {
    const auto &[reads, writes] = rw;
    std::ostringstream os;
    if (reads.size() > 1) {
      os << "cycle " << key.first << " partition " << key.second << " reads both banks";
      return os.str();
    }
    for (int b : writes)
      if (reads.count(b)) {
        os << "cycle " << key.first << " partition " << key.second << " writes bank " << b << " while reading it";
        return os.str();
      }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Partition

void Partition::write_bank(int bank, std::span<const std::int8_t> weights) {
  if (bank < 0 || bank >= static_cast<int>(kBanks)) throw InvariantViolation("bank index out of range");
  if (active_ && *active_ == bank)
    throw InvariantViolation("write to bank " + std::to_string(bank) + " while a matvec is reading it");
  banks_[static_cast<std::size_t>(bank)].store(weights);
}

void Partition::begin_matvec(int bank) {
  if (bank < 0 || bank >= static_cast<int>(kBanks)) throw InvariantViolation("bank index out of range");
  if (active_) throw InvariantViolation("matvec already in flight");
  if (slot_ >= kAccSlots) throw InvariantViolation("accumulator file full; cycle_output first");
  active_ = bank;
  phase_ = 0;
  current_ = slot_;
  running_ = 0;
  acc_[current_] = 0;
}

std::int64_t Partition::tree_sum(std::span<const std::uint8_t> input_bits) const {
  if (!active_) throw InvariantViolation("no active bank");
  const auto &b = banks_[static_cast<std::size_t>(*active_)];
  std::int64_t sum = 0;
  for (std::size_t j = 0; j < input_bits.size() && j < kLanes; ++j) {
    if (!input_bits[j]) continue;
    const auto n = b.nibbles(j);
    sum += (static_cast<std::int64_t>(n.msb) << 4) + n.lsb;
  }
  return sum;
}

void Partition::mac_cycle(std::span<const std::uint8_t> input_bits, int bit_index) {
  if (!active_) throw InvariantViolation("mac_cycle without begin_matvec");
  if (bit_index != phase_)
    throw InvariantViolation("bit-serial lockstep: expected bit " + std::to_string(phase_) + ", got " +
                             std::to_string(bit_index));
  if (input_bits.size() > kLanes) throw InvariantViolation("input wider than 64 lanes");
  const std::int64_t partial = tree_sum(input_bits) * (std::int64_t{1} << bit_index);
  running_ += bit_index == kInputBits - 1 ? -partial : partial;
  ++phase_;
}

std::int32_t Partition::end_matvec() {
  if (!active_) throw InvariantViolation("end_matvec without begin_matvec");
  if (phase_ != kInputBits)
    throw InvariantViolation("matvec ended after " + std::to_string(phase_) + " of 8 cycles");
  acc_[current_] = static_cast<std::int32_t>(running_);
  active_.reset();
  phase_ = 0;
  ++slot_;
  return acc_[current_];
}

std::array<std::int32_t, kAccSlots> Partition::cycle_output() {
  if (active_) throw InvariantViolation("cycle_output before the matvec completed");
  auto out = acc_;
  reset_accumulators();
  return out;
}

void Partition::reset_accumulators() {
  acc_.fill(0);
  slot_ = 0;
}

// ---------------------------------------------------------------------------
// CimMacro

CimMacro::CimMacro(bool record_events) { events_.enabled = record_events; }

void CimMacro::write_weights(std::size_t partition, int bank, std::span<const std::int8_t> weights) {
  if (partition >= kPartitions) throw InvariantViolation("partition index out of range");
  partitions_[partition].write_bank(bank, weights);
  ++stats_.weight_rows_written;
  events_.record({cycle_, partition, bank, EventOp::Write, weights.size()});
  // Outside a matvec the write port owns the cycles it takes; during one it
  // overlaps the reads of the other bank.
  if (!stepping_) {
    const std::size_t bits = weights.size() * 8;
    cycle_ += std::max<std::size_t>(1, (bits + kWritePortBits - 1) / kWritePortBits);
  }
}

std::int8_t CimMacro::read_weight(std::size_t partition, int bank, std::size_t lane) const {
  return partitions_.at(partition).bank(bank).weight(lane);
}

void CimMacro::begin_matvec(int bank, std::size_t partitions) {
  if (stepping_) throw InvariantViolation("matvec already in flight");
  if (partitions == 0 || partitions > kPartitions) throw InvariantViolation("partition count out of range");
  for (std::size_t p = 0; p < partitions; ++p) partitions_[p].begin_matvec(bank);
  stepping_ = partitions;
  stepping_bank_ = bank;
}

void CimMacro::mac_cycle(std::span<const std::int8_t> activations, int bit_index) {
  if (!stepping_) throw InvariantViolation("mac_cycle without begin_matvec");
  if (activations.size() > kLanes) throw InvariantViolation("activation vector wider than 64 lanes");
  if (bit_index < 0 || bit_index >= kInputBits) throw InvariantViolation("bit index out of range");
  std::array<std::uint8_t, kLanes> bits{};
  for (std::size_t j = 0; j < activations.size(); ++j)
    bits[j] = static_cast<std::uint8_t>((static_cast<std::uint8_t>(activations[j]) >> bit_index) & 1u);
  const std::span<const std::uint8_t> plane(bits.data(), activations.size());
  for (std::size_t p = 0; p < stepping_; ++p) {
    partitions_[p].mac_cycle(plane, bit_index);
    events_.record({cycle_, p, stepping_bank_, EventOp::Mac, activations.size()});
  }
  ++cycle_;
  ++stats_.mac_cycles;
}

std::vector<std::int32_t> CimMacro::end_matvec() {
  if (!stepping_) throw InvariantViolation("end_matvec without begin_matvec");
  std::vector<std::int32_t> out(stepping_);
  for (std::size_t p = 0; p < stepping_; ++p) out[p] = partitions_[p].end_matvec();
  stepping_ = 0;
  ++stats_.matvecs;
  return out;
}

std::vector<std::int32_t> CimMacro::matvec_broadcast(int bank, std::span<const std::int8_t> activations,
                                                     std::size_t partitions) {
  begin_matvec(bank, partitions);
  for (int b = 0; b < kInputBits; ++b) mac_cycle(activations, b);
  return end_matvec();
}

std::int32_t CimMacro::matvec_int8(std::size_t partition, int bank, std::span<const std::int8_t> activations) {
  if (partition >= kPartitions) throw InvariantViolation("partition index out of range");
  if (stepping_) throw InvariantViolation("matvec already in flight");
  if (activations.size() > kLanes) throw InvariantViolation("activation vector wider than 64 lanes");
  auto &part = partitions_[partition];
  part.begin_matvec(bank);
  std::array<std::uint8_t, kLanes> bits{};
  const std::span<const std::uint8_t> plane(bits.data(), activations.size());
  for (int b = 0; b < kInputBits; ++b) {
    for (std::size_t j = 0; j < activations.size(); ++j)
      bits[j] = static_cast<std::uint8_t>((static_cast<std::uint8_t>(activations[j]) >> b) & 1u);
    part.mac_cycle(plane, b);
    events_.record({cycle_, partition, bank, EventOp::Mac, activations.size()});
    ++cycle_;
    ++stats_.mac_cycles;
  }
  ++stats_.matvecs;
  return part.end_matvec();
}

std::array<std::int32_t, kAccSlots> CimMacro::cycle_output(std::size_t partition) {
  auto &part = partitions_.at(partition);
  const auto filled = part.slots_filled();
  auto out = part.cycle_output();
  events_.record({cycle_, partition, part.active_bank().value_or(0), EventOp::Output, filled});
  return out;
}

TensorBlob CimMacro::dump_weights() const {
  TensorBlob b;
  b.dtype = DType::Int8;
  b.dims = {static_cast<std::uint32_t>(kPartitions), static_cast<std::uint32_t>(kBanks),
            static_cast<std::uint32_t>(kLanes)};
  ByteWriter ext;
  ext.u8(static_cast<std::uint8_t>(ExtensionKind::WeightImage));
  ext.u8(static_cast<std::uint8_t>(kPartitions));
  ext.u8(static_cast<std::uint8_t>(kBanks));
  ext.u8(static_cast<std::uint8_t>(kLanes));
  for (const auto &p : partitions_)
    for (int bank = 0; bank < static_cast<int>(kBanks); ++bank) ext.u8(static_cast<std::uint8_t>(p.bank(bank).lanes_loaded()));
  b.extension = ext.take();
  for (const auto &p : partitions_)
    for (int bank = 0; bank < static_cast<int>(kBanks); ++bank)
      for (auto w : p.bank(bank).read()) b.payload.push_back(static_cast<std::uint8_t>(w));
  return b;
}

void CimMacro::load_weights(const TensorBlob &blob) {
  if (blob.extension.size() < 4 || blob.extension[0] != static_cast<std::uint8_t>(ExtensionKind::WeightImage))
    throw SimError("weight image: missing WeightImage header extension");
  if (blob.dtype != DType::Int8 || blob.extension[1] != kPartitions || blob.extension[2] != kBanks ||
      blob.extension[3] != kLanes || blob.payload.size() != kPartitions * kBanks * kLanes ||
      blob.extension.size() != 4 + kPartitions * kBanks)
    throw SimError("weight image: geometry does not match a 32 x 2 x 64 macro");
  for (std::size_t p = 0; p < kPartitions; ++p)
    for (std::size_t bank = 0; bank < kBanks; ++bank) {
      const std::size_t lanes = blob.extension[4 + p * kBanks + bank];
      if (lanes > kLanes) throw SimError("weight image: lane count exceeds 64");
      const auto *base = reinterpret_cast<const std::int8_t *>(blob.payload.data()) + (p * kBanks + bank) * kLanes;
      write_weights(p, static_cast<int>(bank), std::span<const std::int8_t>(base, lanes));
    }
}

// ---------------------------------------------------------------------------
// tiling

std::vector<std::int32_t> run_step(CimMacro &macro, int bank,
                                   const std::vector<std::span<const std::int8_t>> &resident,
                                   const std::vector<std::span<const std::int8_t>> &streamed) {
  if (resident.empty() || resident.size() > kPartitions)
    throw InvariantViolation("run_step: 1..32 resident rows required");
  if (streamed.size() > kAccSlots) throw InvariantViolation("run_step: more than 64 streamed vectors");
  for (std::size_t r = 0; r < resident.size(); ++r) macro.write_weights(r, bank, resident[r]);
  for (const auto &v : streamed) {
    if (v.size() > kLanes) throw InvariantViolation("run_step: streamed vector wider than 64 lanes");
    macro.matvec_broadcast(bank, v, resident.size());
  }
  const std::size_t rows = resident.size();
  std::vector<std::int32_t> out(streamed.size() * rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto slots = macro.cycle_output(r);
    for (std::size_t m = 0; m < streamed.size(); ++m) out[m * rows + r] = slots[m];
  }
  return out;
}

MappingPlan plan_tiled_matmul(std::size_t resident_rows, std::size_t streamed_rows, std::size_t depth) {
  if (resident_rows == 0 || streamed_rows == 0 || depth == 0)
    throw InvariantViolation("plan_tiled_matmul: empty operand");
  MappingPlan plan{resident_rows, streamed_rows, depth, {}};
  int bank = 0;
  for (std::size_t lane = 0, chunk = 0; lane < depth; lane += kLanes, ++chunk)
    for (std::size_t row = 0; row < resident_rows; row += kPartitions)
      for (std::size_t block = 0; block < streamed_rows; block += kAccSlots) {
        TileStep s;
        s.chunk = chunk;
        s.lane_begin = lane;
        s.lane_count = std::min(kLanes, depth - lane);
        s.row_begin = row;
        s.row_count = std::min(kPartitions, resident_rows - row);
        s.block_begin = block;
        s.block_count = std::min(kAccSlots, streamed_rows - block);
        s.bank = bank;
        bank ^= 1;
        plan.steps.push_back(s);
      }
  return plan;
}

void MappingPlan::validate() const {
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> chunk_lanes;
  std::map<std::size_t, std::vector<const TileStep *>> by_chunk;
  for (const auto &s : steps) {
    if (s.lane_count == 0 || s.lane_count > kLanes) throw InvariantViolation("tile exceeds 64 lanes");
    if (s.row_count == 0 || s.row_count > kPartitions) throw InvariantViolation("tile exceeds 32 partitions");
    if (s.block_count == 0 || s.block_count > kAccSlots)
      throw InvariantViolation("tile exceeds 64 accumulator slots");
    if (s.bank < 0 || s.bank >= static_cast<int>(kBanks)) throw InvariantViolation("tile bank out of range");
    if (s.row_begin + s.row_count > resident_rows || s.block_begin + s.block_count > streamed_rows ||
        s.lane_begin + s.lane_count > depth)
      throw InvariantViolation("tile outside the operand shapes");
    auto [it, fresh] = chunk_lanes.try_emplace(s.chunk, s.lane_begin, s.lane_count);
    if (!fresh && it->second != std::pair{s.lane_begin, s.lane_count})
      throw InvariantViolation("steps of one chunk disagree on its lane range");
    by_chunk[s.chunk].push_back(&s);
  }
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (const auto &[c, r] : chunk_lanes) ranges.push_back(r);
  std::sort(ranges.begin(), ranges.end());
  std::size_t next = 0;
  for (const auto &[b, n] : ranges) {
    if (b != next) throw InvariantViolation("chunks do not tile the dot-product dimension");
    next = b + n;
  }
  if (next != depth) throw InvariantViolation("chunks do not tile the dot-product dimension");
  for (const auto &[c, tiles] : by_chunk) {
    std::size_t area = 0;
    for (std::size_t i = 0; i < tiles.size(); ++i) {
      area += tiles[i]->row_count * tiles[i]->block_count;
      for (std::size_t j = i + 1; j < tiles.size(); ++j) {
        const auto &a = *tiles[i], &b = *tiles[j];
        const bool rows = a.row_begin < b.row_begin + b.row_count && b.row_begin < a.row_begin + a.row_count;
        const bool blocks =
            a.block_begin < b.block_begin + b.block_count && b.block_begin < a.block_begin + a.block_count;
        if (rows && blocks) throw InvariantViolation("overlapping tiles in chunk " + std::to_string(c));
      }
    }
    if (area != resident_rows * streamed_rows)
      throw InvariantViolation("chunk " + std::to_string(c) + " does not cover every output");
  }
}

AccTensor tiled_matmul(CimMacro &macro, const MappingPlan &plan, const QuantTensor &stored,
                       const QuantTensor &streamed) {
  if (stored.shape.size() != 2 || streamed.shape.size() != 2)
    throw InvariantViolation("tiled_matmul: operands must be 2-D");
  if (stored.cols() != streamed.cols())
    throw InvariantViolation("tiled_matmul: dot-product dimensions differ: " + shape_string(stored.shape) + " vs " +
                             shape_string(streamed.shape));
  if (plan.resident_rows != stored.rows() || plan.streamed_rows != streamed.rows() || plan.depth != stored.cols())
    throw InvariantViolation("tiled_matmul: plan does not match operand shapes");
  plan.validate();
  const std::size_t m_rows = streamed.rows(), r_rows = stored.rows();
  std::vector<std::int64_t> wide(m_rows * r_rows, 0);
  std::vector<std::span<const std::int8_t>> resident, stream;
  for (const auto &s : plan.steps) {
    resident.clear();
    stream.clear();
    for (std::size_t r = 0; r < s.row_count; ++r)
      resident.push_back(stored.row(s.row_begin + r).subspan(s.lane_begin, s.lane_count));
    for (std::size_t m = 0; m < s.block_count; ++m)
      stream.push_back(streamed.row(s.block_begin + m).subspan(s.lane_begin, s.lane_count));
    const auto part = run_step(macro, s.bank, resident, stream);
    for (std::size_t m = 0; m < s.block_count; ++m)
      for (std::size_t r = 0; r < s.row_count; ++r)
        wide[(s.block_begin + m) * r_rows + s.row_begin + r] += part[m * s.row_count + r];
  }
  AccTensor out({m_rows, r_rows}, stored.scale * streamed.scale);
  for (std::size_t i = 0; i < wide.size(); ++i) {
    if (wide[i] > std::numeric_limits<std::int32_t>::max() || wide[i] < std::numeric_limits<std::int32_t>::min())
      throw InvariantViolation("intermediate accumulator overflow");
    out.values[i] = static_cast<std::int32_t>(wide[i]);
  }
  return out;
}

} // namespace cimsim
