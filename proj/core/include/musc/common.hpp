#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace musc {

using Rng = std::mt19937_64;

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad user-supplied configuration (maps to CLI exit code 1).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed token sequence; `position` is the offending token index.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t position)
      : Error(what + " at position " + std::to_string(position)),
        position_(position) {}
  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

// Dataset / report record that does not match its schema.
class SchemaError : public Error {
 public:
  SchemaError(const std::string& what, std::size_t line, std::string field)
      : Error("line " + std::to_string(line) + ": " + what +
              (field.empty() ? "" : " (field '" + field + "')")),
        line_(line),
        field_(std::move(field)) {}
  std::size_t line() const noexcept { return line_; }
  const std::string& field() const noexcept { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

// splitmix64 finalizer; used to derive independent per-item seeds from a root.
std::uint64_t mix_seed(std::uint64_t x) noexcept;
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index) noexcept;

// Neumaier-compensated sum; result does not depend on summation order to
// within one ulp for the sizes used here.
double compensated_sum(std::span<const double> values) noexcept;

class CompensatedAccumulator {
 public:
  void add(double v) noexcept;
  double value() const noexcept { return sum_ + compensation_; }

 private:
  double sum_ = 0.0;
  double compensation_ = 0.0;
};

std::string sha256_hex(std::string_view data);
std::string sha256_file_hex(const std::string& path);

// Numerically stable log(sigmoid(x)) and sigmoid(x).
double log_sigmoid(double x) noexcept;
double sigmoid(double x) noexcept;

}  // namespace musc
