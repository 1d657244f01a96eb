#pragma once

#include <stdexcept>
#include <string>

namespace dectseg {

/// Base class of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Grid, tensor or box extents that do not fit together.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A value outside its admissible domain (alpha > 1, label > 4, NaN ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Malformed or unsupported file content.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Invalid or mismatching configuration (network config, run config).
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace dectseg
