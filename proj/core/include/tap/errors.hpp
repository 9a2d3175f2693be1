#pragma once

#include <stdexcept>
#include <string>

namespace tap {

// Base for every error raised by the library. The CLI maps the concrete
// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

// A caller broke a documented precondition (non-scalar loss, empty lists, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced during a computation, or an optimizer fed a NaN gradient.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace tap
