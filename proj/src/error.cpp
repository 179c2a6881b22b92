#include "pfa/error.hpp"

namespace pfa {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::ShapeError: return "ShapeError";
    case ErrorCode::InvalidShape: return "InvalidShape";
    case ErrorCode::UnsupportedDtype: return "UnsupportedDtype";
    case ErrorCode::DuplicateLayerId: return "DuplicateLayerId";
    case ErrorCode::NonFiniteTensor: return "NonFiniteTensor";
    case ErrorCode::InvalidInput: return "InvalidInput";
    case ErrorCode::InvalidParams: return "InvalidParams";
    case ErrorCode::InvalidCount: return "InvalidCount";
    case ErrorCode::InvalidRecipe: return "InvalidRecipe";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::TooFewSamples: return "TooFewSamples";
    case ErrorCode::MissingIndices: return "MissingIndices";
    case ErrorCode::LayerMismatch: return "LayerMismatch";
    case ErrorCode::GammaOutOfRange: return "GammaOutOfRange";
    case ErrorCode::TauOutOfRange: return "TauOutOfRange";
    case ErrorCode::InfeasibleBudget: return "InfeasibleBudget";
    case ErrorCode::DegenerateSpectrum: return "DegenerateSpectrum";
    case ErrorCode::NumericalFailure: return "NumericalFailure";
    case ErrorCode::DivergedLoss: return "DivergedLoss";
  }
  return "UnknownError";
}

}  // namespace pfa
