// Copyright 2026 The podsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace podsim {

/// Invalid configuration: bad counts, out-of-range parameters, missing keys.
/// `line` is the 1-based source line when the value came from a config file.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what, int line = 0)
      : std::runtime_error(what), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

/// API misuse, e.g. polling a handle that has already been consumed.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace podsim
