#pragma once

#include <stdexcept>
#include <string>

namespace gcrl {

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Shape or dimensionality violation in a tensor op.
class ShapeError : public Error {
public:
  using Error::Error;
};

// A value outside its documented domain (probability out of range, token
// out of vocabulary, non-finite where finite is required, ...).
class ValueError : public Error {
public:
  using Error::Error;
};

// File and stream failures; message carries the path and, where known,
// the byte offset.
class IoError : public Error {
public:
  using Error::Error;
};

// Configuration rejection; `field()` is the dotted path of the bad field.
class ConfigError : public Error {
public:
  ConfigError(std::string field_path, const std::string& msg)
      : Error(field_path + ": " + msg), field_(std::move(field_path)) {}
  const std::string& field() const { return field_; }

private:
  std::string field_;
};

} // namespace gcrl
