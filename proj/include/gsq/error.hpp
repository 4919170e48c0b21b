#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace gsq {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes or group layouts do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Input contained NaN or infinity where finite values are required.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// Value exceeds a non-saturating format's range.
class OverflowError : public Error {
 public:
  using Error::Error;
};

/// Malformed or corrupt file / encoded stream. Carries the byte offset of
/// the first offending byte.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Invalid configuration value or unknown configuration key.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace gsq
