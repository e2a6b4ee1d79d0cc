#pragma once

#include <stdexcept>
#include <string>

namespace splitexpand {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A layer received a tensor whose dims do not match its expectation.
class ShapeError : public Error {
 public:
  ShapeError(std::string layer, const std::string& what)
      : Error("layer '" + layer + "': " + what), layer_(std::move(layer)) {}
  const std::string& layer() const noexcept { return layer_; }

 private:
  std::string layer_;
};

// Image height/width not divisible by 2^depth.
class InputSizeError : public Error {
 public:
  using Error::Error;
};

class ModelFormatError : public Error {
 public:
  enum class Kind { io, bad_magic, bad_version, bad_dtype, truncated, missing_weight, dim_mismatch, bad_topology };

  ModelFormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

// Invalid arguments or configuration supplied by a caller.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent input data (images, point files, label maps).
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace splitexpand
