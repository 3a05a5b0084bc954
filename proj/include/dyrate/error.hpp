#pragma once

#include <stdexcept>
#include <string>

namespace dyrate {

// Base of every error the library throws. The CLI maps the concrete type to
// an exit code (config 2, numeric 3, io 4).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace dyrate
