// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace cimsim {

// Base for every error raised by the simulator.
class SimError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Configuration parse / schema / invariant problems. `field` holds a
// JSON-pointer style path (e.g. "$.lut.recip_k").
class ConfigError : public SimError {
public:
  ConfigError(std::string field, const std::string &what)
      : SimError(field + ": " + what), field_(std::move(field)) {}
  const std::string &field() const noexcept { return field_; }

private:
  std::string field_;
};

// A structural invariant of the hardware model was violated (bank
// exclusivity, bit-serial lockstep, consume-before-produce, ...).
class InvariantViolation : public SimError {
public:
  using SimError::SimError;
};

} // namespace cimsim
