#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tdhnode {

enum class ErrorCode {
  DuplicateMarkerInTrajectory,
  CycleDetected,
  UnknownMarkerName,
  IrreversibilityViolation,
  IndexOutOfRange,
  DimensionMismatch,
  ShapeMismatch,
  NonFiniteLaplacian,
  NonFiniteState,
  NoRecordedForward,
  EmptyCohort,
  NonFiniteLoss,
  VersionMismatch,
  PathwayHashMismatch,
  CorruptFile,
  MalformedRecord,
  NonIncreasingTimestamps,
  ConfigInvalid,
  EmptyEvaluationSet,
  IoError,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::DuplicateMarkerInTrajectory: return "DuplicateMarkerInTrajectory";
    case ErrorCode::CycleDetected: return "CycleDetected";
    case ErrorCode::UnknownMarkerName: return "UnknownMarkerName";
    case ErrorCode::IrreversibilityViolation: return "IrreversibilityViolation";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFiniteLaplacian: return "NonFiniteLaplacian";
    case ErrorCode::NonFiniteState: return "NonFiniteState";
    case ErrorCode::NoRecordedForward: return "NoRecordedForward";
    case ErrorCode::EmptyCohort: return "EmptyCohort";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::PathwayHashMismatch: return "PathwayHashMismatch";
    case ErrorCode::CorruptFile: return "CorruptFile";
    case ErrorCode::MalformedRecord: return "MalformedRecord";
    case ErrorCode::NonIncreasingTimestamps: return "NonIncreasingTimestamps";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::EmptyEvaluationSet: return "EmptyEvaluationSet";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

/// Every failure the library reports carries one of the codes above so that
/// callers (and tests) can branch on the kind without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace tdhnode
