#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cimsim {

enum class ErrorKind {
  out_of_range,
  invalid_argument,
  bit_width,
  zero_conductance,
  capacity_exceeded,
  invalid_placement,
  not_programmed,
  divergence,
  io,
  schema,
};

std::string_view to_string(ErrorKind kind);

/// Every failure raised by the simulator carries a machine-readable kind so the
/// CLI can report `error kind=<kind>` lines.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace cimsim
