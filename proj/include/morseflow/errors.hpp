#pragma once

#include <stdexcept>
#include <string>

namespace morseflow {

// Exit-code classes used by the CLI: config errors map to 2, numerical
// failures to 3, acceptance verdicts to 4.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

struct AcceptanceError : std::runtime_error {
  explicit AcceptanceError(const std::string& what) : std::runtime_error(what) {}
};

struct ArgumentError : std::invalid_argument {
  explicit ArgumentError(const std::string& what) : std::invalid_argument(what) {}
};

#define MORSEFLOW_NUMERICAL_ERROR(NAME)                                        \
  struct NAME : NumericalError {                                               \
    explicit NAME(const std::string& what) : NumericalError(#NAME ": " + what) {} \
  }

MORSEFLOW_NUMERICAL_ERROR(NoConvergence);
MORSEFLOW_NUMERICAL_ERROR(Degenerate);
MORSEFLOW_NUMERICAL_ERROR(StepRejected);
MORSEFLOW_NUMERICAL_ERROR(IndexMismatch);
MORSEFLOW_NUMERICAL_ERROR(EigenvalueCollision);
MORSEFLOW_NUMERICAL_ERROR(NoNearbyOrbit);
MORSEFLOW_NUMERICAL_ERROR(ProjectionFailed);
MORSEFLOW_NUMERICAL_ERROR(InjectivityRadiusExceeded);
MORSEFLOW_NUMERICAL_ERROR(IterationDiverged);
MORSEFLOW_NUMERICAL_ERROR(LinearSolveFailed);
MORSEFLOW_NUMERICAL_ERROR(HypothesisViolated);
MORSEFLOW_NUMERICAL_ERROR(NoRoot);
MORSEFLOW_NUMERICAL_ERROR(NotMonotone);
MORSEFLOW_NUMERICAL_ERROR(DegenerateComplex);
MORSEFLOW_NUMERICAL_ERROR(NotNested);
MORSEFLOW_NUMERICAL_ERROR(UnknownReference);
MORSEFLOW_NUMERICAL_ERROR(UnknownRun);

#undef MORSEFLOW_NUMERICAL_ERROR

}  // namespace morseflow
