#pragma once

#include <stdexcept>
#include <string>

namespace ofa {

enum class ErrorKind {
  invalid_argument,
  dimension,
  config,
  io,
  format,
  version,
  internal,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Shape mismatch. The message names the offending axis.
class DimensionError : public Error {
 public:
  DimensionError(const std::string& op, int axis, long expected, long actual)
      : Error(ErrorKind::dimension, op + ": axis " + std::to_string(axis) + " expected " +
                                        std::to_string(expected) + ", got " + std::to_string(actual)),
        axis_(axis) {}
  explicit DimensionError(const std::string& what) : Error(ErrorKind::dimension, what) {}
  int axis() const noexcept { return axis_; }

 private:
  int axis_ = -1;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

class IoError : public Error {
 public:
  IoError(const std::string& path, const std::string& what)
      : Error(ErrorKind::io, path + ": " + what), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error(ErrorKind::format, what) {}
};

class VersionError : public Error {
 public:
  explicit VersionError(const std::string& what) : Error(ErrorKind::version, what) {}
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw Error(ErrorKind::invalid_argument, what);
}

}  // namespace ofa
