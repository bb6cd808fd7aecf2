#pragma once

#include <stdexcept>
#include <string>

namespace nowcast {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad command-line usage; the CLI maps it to exit code 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Tensor container / checkpoint decoding failures.
class FormatError : public Error {
 public:
  enum class Kind { io, bad_magic, unsupported_version, unsupported_dtype, bad_shape, truncated };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace nowcast
