#pragma once

#include <stdexcept>
#include <string>

namespace cascade {

// Error classes map one-to-one onto CLI exit codes.
enum class ErrorKind {
  InvalidArgument = 2,
  Schema = 3,
  Degenerate = 4,
  Numerical = 5,
  Io = 6,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace cascade
