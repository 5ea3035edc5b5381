#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace cmi {

/// Base class for all errors raised by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input file.
class CsvError : public Error {
 public:
  using Error::Error;
};

/// Dataset content violates a structural invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A model design matrix (or normal-equation system) is rank deficient.
class RankDeficiencyError : public Error {
 public:
  RankDeficiencyError(const std::string& msg, std::vector<std::string> columns)
      : Error(msg), columns_(std::move(columns)) {}
  const std::vector<std::string>& columns() const { return columns_; }

 private:
  std::vector<std::string> columns_;
};

/// A pipeline stage failed; the message carries the stage label.
class PipelineError : public Error {
 public:
  PipelineError(const std::string& stage, const std::string& msg)
      : Error("[" + stage + "] " + msg), stage_(stage) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

}  // namespace cmi
