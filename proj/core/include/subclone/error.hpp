#pragma once

#include <stdexcept>
#include <string>

namespace subclone {

// Base class for everything this library throws on purpose.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor extents or model dimensions do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or invalid argument values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents (checkpoints, sidecars, config files).
class ParseError : public Error {
 public:
  using Error::Error;
};

// Filesystem-level failure (missing file, short write).
class IoError : public Error {
 public:
  using Error::Error;
};

// Non-finite values where finite ones are required (NaN loss, NaN input).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace subclone
