#pragma once

#include <stdexcept>
#include <string>

namespace exitrate {

// Exception hierarchy. Each family maps to one CLI exit code:
//   UsageError   -> 1  (bad flags, incompatible configuration)
//   DataError    -> 2  (malformed/corrupt/inconsistent containers, shape mismatches)
//   NumericError -> 3  (non-finite values, variance below floor, divergence)
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 2; }
};

class UsageError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 1; }
};

class DataError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

class ShapeError : public DataError {
 public:
  using DataError::DataError;
};

class IoError : public DataError {
 public:
  using DataError::DataError;
};

class FormatError : public DataError {
 public:
  using DataError::DataError;
};

class SizeMismatchError : public DataError {
 public:
  using DataError::DataError;
};

class InvariantError : public DataError {
 public:
  using DataError::DataError;
};

class NumericError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

namespace detail {

inline std::string dims(std::size_t a, std::size_t b) {
  return std::to_string(a) + " vs " + std::to_string(b);
}

inline void require_same(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": dimension mismatch (" + dims(a, b) + ")");
}

}  // namespace detail

}  // namespace exitrate
