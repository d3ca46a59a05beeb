#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace pcvd {

enum class ErrorCategory { Dimension, Config, Contract, Format, Io, Numeric };

inline const char* category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::Dimension: return "dimension";
    case ErrorCategory::Config: return "config";
    case ErrorCategory::Contract: return "contract";
    case ErrorCategory::Format: return "format";
    case ErrorCategory::Io: return "io";
    case ErrorCategory::Numeric: return "numeric";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}
  ErrorCategory category() const { return category_; }

 private:
  ErrorCategory category_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& w) : Error(ErrorCategory::Dimension, w) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorCategory::Config, w) {}
};
struct ContractError : Error {
  explicit ContractError(const std::string& w) : Error(ErrorCategory::Contract, w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorCategory::Io, w) {}
};
/// Training diverged (non-finite loss or gradient).
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error(ErrorCategory::Numeric, w) {}
};

/// Malformed or truncated archive; carries the byte offset where decoding failed.
struct FormatError : Error {
  FormatError(const std::string& w, std::uint64_t offset)
      : Error(ErrorCategory::Format, w + " (at byte offset " + std::to_string(offset) + ")"),
        offset(offset) {}
  std::uint64_t offset;
};

}  // namespace pcvd
