#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace microdiff {

// Process exit codes shared by every CLI subcommand.
enum class ExitCode : int {
  ok = 0,
  config = 2,
  data = 3,
  numerical = 4,
  exhausted = 5,
  contract = 6,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  [[nodiscard]] virtual ExitCode exit_code() const noexcept = 0;
};

// Bad user input: config values, CLI flags, empty intervals.
class ConfigError : public Error {
 public:
  using Error::Error;
  [[nodiscard]] ExitCode exit_code() const noexcept override { return ExitCode::config; }
};

// Missing, truncated or malformed files.
class DataError : public Error {
 public:
  using Error::Error;
  [[nodiscard]] ExitCode exit_code() const noexcept override { return ExitCode::data; }
};

class FormatError : public DataError {
 public:
  FormatError(const std::string& what, std::size_t byte_offset)
      : DataError(what + " (at byte offset " + std::to_string(byte_offset) + ")"),
        offset_(byte_offset) {}
  [[nodiscard]] std::size_t byte_offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// Non-finite values, Newton failure, inverted elements.
class NumericalError : public Error {
 public:
  using Error::Error;
  [[nodiscard]] ExitCode exit_code() const noexcept override { return ExitCode::numerical; }
};

// Violated preconditions on shapes and widths.
class ContractError : public Error {
 public:
  using Error::Error;
  [[nodiscard]] ExitCode exit_code() const noexcept override { return ExitCode::contract; }
};

}  // namespace microdiff
