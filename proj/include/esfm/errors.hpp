#pragma once

#include <stdexcept>
#include <string>

namespace esfm {

enum class ErrorCode {
  InvalidArgument,
  // measurements
  DuplicateObservation,
  IndexOutOfRange,
  TrackTooShort,
  EmptyCamera,
  SingularIntrinsics,
  NonUpperTriangular,
  // geometry
  DegenerateQuaternion,
  SingularCameraBlock,
  TooFewViews,
  PointAtInfinity,
  DegenerateSystem,
  TooFewPoints,
  DegenerateConfiguration,
  MissingGroundTruth,
  // model / autograd
  InvalidWidths,
  WidthMismatch,
  IncompleteTape,
  NonSmoothPoint,
  // optimization
  ShapeMismatch,
  NonFiniteLoss,
  EmptySubset,
  ModeMismatch,
  DisconnectedScene,
  // bundle adjustment
  SingularNormalEquations,
  // synth
  InfeasibleConfig,
  // io
  ParseError,
  HeaderMismatch,
  CountMismatch,
  IOError,
  VersionMismatch,
  CorruptCheckpoint,
};

const char* error_code_name(ErrorCode code);

// All recoverable failures are reported through this exception. `index_a` /
// `index_b` carry the offending camera/track (or line number) when the error
// refers to a specific element, -1 otherwise.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, std::string message, long index_a = -1, long index_b = -1)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
        code_(code),
        index_a_(index_a),
        index_b_(index_b) {}

  ErrorCode code() const { return code_; }
  long index_a() const { return index_a_; }
  long index_b() const { return index_b_; }

 private:
  ErrorCode code_;
  long index_a_;
  long index_b_;
};

}  // namespace esfm
