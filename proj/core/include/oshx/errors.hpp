#pragma once

#include <stdexcept>
#include <string>

namespace oshx {

/// Tensor/layer shape disagreement. The message names both shapes.
class ShapeError : public std::runtime_error {
public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid architecture, preset, or task configuration.
class ConfigError : public std::runtime_error {
public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// API misuse: bad arguments, out-of-range labels, unknown split names.
class UsageError : public std::runtime_error {
public:
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Filesystem and stream failures.
class IoError : public std::runtime_error {
public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

/// A file is not in the expected container format (bad magic, bad version).
class FormatError : public std::runtime_error {
public:
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

/// A file has the right format but inconsistent contents (truncation,
/// length mismatch between index and payload).
class CorruptError : public std::runtime_error {
public:
  explicit CorruptError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Training aborted on a non-finite loss. Carries the failing location.
class DivergedError : public std::runtime_error {
public:
  DivergedError(int epoch, int batch_index, double loss_value)
      : std::runtime_error("non-finite loss " + std::to_string(loss_value) +
                           " at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch_index)),
        epoch(epoch), batch_index(batch_index), loss_value(loss_value) {}
  int epoch;
  int batch_index;
  double loss_value;
};

} // namespace oshx
