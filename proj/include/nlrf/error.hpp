#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace nlrf {

/// Failure categories surfaced by the library. Each maps to a distinct
/// caller-visible condition; the CLI turns all of them into exit code 1.
enum class Errc {
  EmptyLine,
  ParseError,
  EmptyDataset,
  FormatError,
  DuplicateRule,
  ConfidenceRange,
  UnsupportedConfidence,
  VocabOverflow,
  ShapeError,
  NonFiniteGradient,
  NonFiniteLoss,
  IncompatibleCheckpoint,
  CorruptCheckpoint,
  EmptySubset,
  TooFewInstances,
  TooFewSamples,
  InvalidConfig,
  Io,
};

constexpr std::string_view to_string(Errc code) noexcept {
  switch (code) {
    case Errc::EmptyLine: return "EmptyLine";
    case Errc::ParseError: return "ParseError";
    case Errc::EmptyDataset: return "EmptyDataset";
    case Errc::FormatError: return "FormatError";
    case Errc::DuplicateRule: return "DuplicateRule";
    case Errc::ConfidenceRange: return "ConfidenceRange";
    case Errc::UnsupportedConfidence: return "UnsupportedConfidence";
    case Errc::VocabOverflow: return "VocabOverflow";
    case Errc::ShapeError: return "ShapeError";
    case Errc::NonFiniteGradient: return "NonFiniteGradient";
    case Errc::NonFiniteLoss: return "NonFiniteLoss";
    case Errc::IncompatibleCheckpoint: return "IncompatibleCheckpoint";
    case Errc::CorruptCheckpoint: return "CorruptCheckpoint";
    case Errc::EmptySubset: return "EmptySubset";
    case Errc::TooFewInstances: return "TooFewInstances";
    case Errc::TooFewSamples: return "TooFewSamples";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::Io: return "Io";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  /// Errors tied to a position in a text input (dataset line, DSL source).
  Error(Errc code, const std::string& message, std::size_t line, std::size_t column = 0)
      : std::runtime_error(std::string(to_string(code)) + ": line " + std::to_string(line) +
                           (column ? ", column " + std::to_string(column) : std::string()) +
                           ": " + message),
        code_(code),
        line_(line),
        column_(column) {}

  Errc code() const noexcept { return code_; }
  /// 1-based; 0 when the error has no source position.
  std::size_t line() const noexcept { return line_; }
  std::size_t column() const noexcept { return column_; }

 private:
  Errc code_;
  std::size_t line_ = 0;
  std::size_t column_ = 0;
};

}  // namespace nlrf
