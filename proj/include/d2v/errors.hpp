#pragma once

#include <stdexcept>
#include <string>

namespace d2v {

/// Error classes map one-to-one onto CLI exit codes.
enum class ErrorKind { Config, Input, Numeric, State };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorKind::Config, what) {}
};

struct InputError : Error {
  explicit InputError(const std::string& what) : Error(ErrorKind::Input, what) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error(ErrorKind::Numeric, what) {}
};

struct StateError : Error {
  explicit StateError(const std::string& what) : Error(ErrorKind::State, what) {}
};

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return 2;
    case ErrorKind::Input: return 3;
    case ErrorKind::Numeric: return 4;
    case ErrorKind::State: return 5;
  }
  return 1;
}

}  // namespace d2v
