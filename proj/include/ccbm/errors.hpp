#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ccbm {

/// Precondition violated by the caller (bad dimensions, empty inputs, ...).
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Newton iteration did not reach the gradient tolerance.
class OptimizationFailure : public std::runtime_error {
 public:
  OptimizationFailure(const std::string& what, std::vector<double> last_iterate,
                      double gradient_norm)
      : std::runtime_error(what),
        last_iterate_(std::move(last_iterate)),
        gradient_norm_(gradient_norm) {}

  const std::vector<double>& last_iterate() const { return last_iterate_; }
  double gradient_norm() const { return gradient_norm_; }

 private:
  std::vector<double> last_iterate_;
  double gradient_norm_;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Base for everything the concept oracle can fail with.
class OracleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Transport failed on every retry; the run has to stop.
class OracleUnavailable : public OracleError {
 public:
  using OracleError::OracleError;
};

/// The oracle answered, but never with something we could parse.
class OracleParseError : public OracleError {
 public:
  using OracleError::OracleError;
};

class InitializationError : public OracleError {
 public:
  using OracleError::OracleError;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EmptyVocabularyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UndefinedMetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Too few shared observations to decide whether two concepts match.
class InconclusiveMatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CombinatorialBudgetExceeded : public std::runtime_error {
 public:
  CombinatorialBudgetExceeded(const std::string& what, double count)
      : std::runtime_error(what), count_(count) {}
  double count() const { return count_; }

 private:
  double count_;
};

}  // namespace ccbm
