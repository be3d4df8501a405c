#pragma once

#include <stdexcept>
#include <string>

namespace qprobe {

/// Base class for every error raised by the library. The category maps onto
/// CLI exit codes (see tools/qprobe.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed bytes or text: bad magic, truncated files, unparsable JSON.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Well-formed input whose declared shapes disagree.
class SchemaError : public Error {
 public:
  using Error::Error;
};

/// Well-formed input carrying invalid values (NaN, duplicate ids, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

/// A caller passed an argument outside the operation's domain.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// Incompatible combination of dataset and training/eval configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A computation would exceed its enumeration guard.
class ResourceError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Broken internal invariant (shape mismatch between congruent buffers).
class InternalError : public Error {
 public:
  using Error::Error;
};

}  // namespace qprobe
