// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The mohge Authors.

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mohge {

// Invalid configuration or incompatible inputs (plan/config, weights/config).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite value encountered during a forward/backward pass or training.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, std::size_t step = 0)
      : std::runtime_error(what), step_(step) {}

  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace mohge
