#include "esfm/errors.hpp"

namespace esfm {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::DuplicateObservation: return "DuplicateObservation";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::TrackTooShort: return "TrackTooShort";
    case ErrorCode::EmptyCamera: return "EmptyCamera";
    case ErrorCode::SingularIntrinsics: return "SingularIntrinsics";
    case ErrorCode::NonUpperTriangular: return "NonUpperTriangular";
    case ErrorCode::DegenerateQuaternion: return "DegenerateQuaternion";
    case ErrorCode::SingularCameraBlock: return "SingularCameraBlock";
    case ErrorCode::TooFewViews: return "TooFewViews";
    case ErrorCode::PointAtInfinity: return "PointAtInfinity";
    case ErrorCode::DegenerateSystem: return "DegenerateSystem";
    case ErrorCode::TooFewPoints: return "TooFewPoints";
    case ErrorCode::DegenerateConfiguration: return "DegenerateConfiguration";
    case ErrorCode::MissingGroundTruth: return "MissingGroundTruth";
    case ErrorCode::InvalidWidths: return "InvalidWidths";
    case ErrorCode::WidthMismatch: return "WidthMismatch";
    case ErrorCode::IncompleteTape: return "IncompleteTape";
    case ErrorCode::NonSmoothPoint: return "NonSmoothPoint";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::EmptySubset: return "EmptySubset";
    case ErrorCode::ModeMismatch: return "ModeMismatch";
    case ErrorCode::DisconnectedScene: return "DisconnectedScene";
    case ErrorCode::SingularNormalEquations: return "SingularNormalEquations";
    case ErrorCode::InfeasibleConfig: return "InfeasibleConfig";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::HeaderMismatch: return "HeaderMismatch";
    case ErrorCode::CountMismatch: return "CountMismatch";
    case ErrorCode::IOError: return "IOError";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::CorruptCheckpoint: return "CorruptCheckpoint";
  }
  return "UnknownError";
}

}  // namespace esfm
