#pragma once

#include <stdexcept>
#include <string>

namespace colony {

// Tensor/shape contract violations (mismatched dims, odd pooling input, ...).
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Label value outside {0, 1, 2, 3}.
struct LabelError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// An operation was invoked out of order, e.g. backward() before forward().
struct StateError : std::logic_error {
  using std::logic_error::logic_error;
};

// Invalid configuration value. key() names the offending setting.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string key, const std::string& what)
      : std::invalid_argument(key + ": " + what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

// File-system or format failure. path() names the file involved.
class IoError : public std::runtime_error {
 public:
  IoError(std::string path, const std::string& what)
      : std::runtime_error(path + ": " + what), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

}  // namespace colony
