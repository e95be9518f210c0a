#pragma once

#include <stdexcept>
#include <string>

namespace bnn {

// Every failure raised by the library carries a category so the CLI can map
// it onto a process exit code.
enum class ErrorKind {
  invalid_argument,
  shape,
  config,
  data,
  numerical,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  // 2 config error, 3 data error, 4 numerical failure, 1 anything else.
  int exit_code() const noexcept {
    switch (kind_) {
      case ErrorKind::config: return 2;
      case ErrorKind::data: return 3;
      case ErrorKind::numerical: return 4;
      default: return 1;
    }
  }

 private:
  ErrorKind kind_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& m) : Error(ErrorKind::shape, m) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& m) : Error(ErrorKind::config, m) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& m) : Error(ErrorKind::data, m) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& m) : Error(ErrorKind::numerical, m) {}
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& m) : Error(ErrorKind::invalid_argument, m) {}
};

}  // namespace bnn
