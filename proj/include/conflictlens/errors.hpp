// Copyright 2026 The ConflictLens Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace conflictlens {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes disagree (matmul, adam_step, v_measure inputs, ...).
class DimensionError : public Error {
 public:
  using Error::Error;
};

// An index (label, layer, head, position) is out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

// Malformed binary input. `offset` is the byte offset of the offending record.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, std::size_t step)
      : Error(what + " (at step " + std::to_string(step) + ")"), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

// Inputs that cannot support the requested statistic: single-label probe
// data, |C| = 1 conflicts, zero variance correlations, too few points.
class DegenerateDataError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DependencyError : public Error {
 public:
  DependencyError(const std::string& stage, const std::string& missing_stage)
      : Error("stage '" + stage + "' requires artifacts from stage '" +
              missing_stage + "'; run `conflictlens " + missing_stage +
              "` first"),
        missing_stage_(missing_stage) {}
  const std::string& missing_stage() const noexcept { return missing_stage_; }

 private:
  std::string missing_stage_;
};

}  // namespace conflictlens
