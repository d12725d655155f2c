#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mcammd {

// Operand shapes do not satisfy an operation's shape rule.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Argument outside the mathematical domain of an operation (log of a
// non-positive value, non-positive kernel bandwidth, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Caller violated a precondition that is not about shapes.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Invalid configuration, detected when the configuration is built or parsed.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A function under evaluation produced a non-finite value.
class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed binary or JSON input. Carries the byte offset where reading failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// Training produced a NaN loss.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, long step, unsigned long long batch_seed)
      : std::runtime_error(what), step_(step), batch_seed_(batch_seed) {}

  long step() const noexcept { return step_; }
  unsigned long long batch_seed() const noexcept { return batch_seed_; }

 private:
  long step_;
  unsigned long long batch_seed_;
};

}  // namespace mcammd
