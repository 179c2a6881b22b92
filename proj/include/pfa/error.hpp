#pragma once

#include <stdexcept>
#include <string>

namespace pfa {

// Failure categories surfaced by the library. The command-line tool maps
// these onto process exit codes: anything numerical exits with 3, every
// other library error exits with 2 (usage problems are caught by the
// argument parser and exit with 1).
enum class ErrorCode {
  MissingFile,
  IoError,
  ParseError,
  ShapeMismatch,
  ShapeError,
  InvalidShape,
  UnsupportedDtype,
  DuplicateLayerId,
  NonFiniteTensor,
  InvalidInput,
  InvalidParams,
  InvalidCount,
  InvalidRecipe,
  EmptyInput,
  TooFewSamples,
  MissingIndices,
  LayerMismatch,
  GammaOutOfRange,
  TauOutOfRange,
  InfeasibleBudget,
  DegenerateSpectrum,
  NumericalFailure,
  DivergedLoss,
};

const char* to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

  // True for failures of the arithmetic itself (as opposed to bad inputs).
  static bool is_numerical(ErrorCode code) noexcept {
    return code == ErrorCode::NumericalFailure || code == ErrorCode::DivergedLoss;
  }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace pfa
