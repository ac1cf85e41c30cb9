#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace dplab {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mismatched tensor shapes or infeasible layer geometry.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Argument outside its documented domain.
class ValueError : public Error {
 public:
  using Error::Error;
};

/// Invalid or incomplete experiment/model configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file (bad magic, truncation, size mismatch).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Operation invoked in the wrong mode or lifecycle state.
class StateError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline void msg_append(std::ostringstream&) {}

template <typename T, typename... Rest>
void msg_append(std::ostringstream& os, const T& part, const Rest&... rest) {
  os << part;
  msg_append(os, rest...);
}

}  // namespace detail

/// Builds an error message from heterogeneous parts.
template <typename... Parts>
std::string msg(const Parts&... parts) {
  std::ostringstream os;
  detail::msg_append(os, parts...);
  return os.str();
}

}  // namespace dplab
