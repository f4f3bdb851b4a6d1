#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ctarnn {

// Malformed or truncated binary/text input. `offset` is the byte offset
// (or line number for line-oriented formats) where parsing failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"),
        message_(what),
        offset_(offset) {}
  std::uint64_t offset() const { return offset_; }
  const std::string& message() const { return message_; }

 private:
  std::string message_;
  std::uint64_t offset_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A verification step found a violated invariant (speaker leakage, NaN
// gradient, failed gradient check, ...).
class CheckFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ctarnn
