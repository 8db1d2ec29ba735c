// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gruaunet {

/// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller handed in something the contract forbids (bad shapes, bad config,
/// malformed manifest rows). The CLI maps these to exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ManifestError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// NaN/Inf showed up where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint container problems. Each failure mode has its own type so
/// callers (and tests) can tell them apart.
class CheckpointError : public Error {
 public:
  using Error::Error;
};
class BadMagicError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class VersionMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class TruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

namespace detail {

template <class... Args>
std::string concat(const Args&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

inline std::function<void(const std::string&)>& warning_sink() {
  static std::function<void(const std::string&)> sink = [](const std::string& msg) {
    std::cerr << "warning: " << msg << '\n';
  };
  return sink;
}

inline std::mutex& warning_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace detail

inline void warn(const std::string& msg) {
  std::lock_guard lock(detail::warning_mutex());
  detail::warning_sink()(msg);
}

/// Replaces the warning sink; returns the previous one.
inline std::function<void(const std::string&)> set_warning_sink(
    std::function<void(const std::string&)> sink) {
  std::lock_guard lock(detail::warning_mutex());
  auto old = std::move(detail::warning_sink());
  detail::warning_sink() = std::move(sink);
  return old;
}

/// RAII capture of warnings, mostly for tests.
class ScopedWarningCapture {
 public:
  ScopedWarningCapture()
      : previous_(set_warning_sink([this](const std::string& m) { messages_.push_back(m); })) {}
  ~ScopedWarningCapture() { set_warning_sink(std::move(previous_)); }
  ScopedWarningCapture(const ScopedWarningCapture&) = delete;
  ScopedWarningCapture& operator=(const ScopedWarningCapture&) = delete;

  const std::vector<std::string>& messages() const { return messages_; }

 private:
  std::vector<std::string> messages_;
  std::function<void(const std::string&)> previous_;
};

}  // namespace gruaunet
