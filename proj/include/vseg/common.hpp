#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace vseg {

// Thrown on contract violations (bad shapes, invalid configs, ...).
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Thrown on runtime failures (I/O, NaN loss, collision retries exhausted, ...).
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void check_arg(bool cond, const std::string& msg) {
  if (!cond) throw InvalidArgument(msg);
}

inline void check_runtime(bool cond, const std::string& msg) {
  if (!cond) throw RuntimeFailure(msg);
}

}  // namespace vseg
