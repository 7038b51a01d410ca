#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "esfm/geometry.hpp"
#include "esfm/measurements.hpp"
#include "esfm/optim.hpp"

namespace esfm {

/// In-memory form of a tracks file.
struct Scene {
  MeasurementTensor tensor;  // raw pixel coordinates
  CameraMode mode = CameraMode::Projective;
  std::optional<std::vector<Eigen::Matrix3d>> intrinsics;  // CALIBRATED files
  std::optional<CameraSet> gt_cameras;                     // optional GT block
};

/// Text format, line oriented, '#' starts a comment:
///   ESFM-TRACKS 1
///   <m> <n> <p> <CALIBRATED|PROJECTIVE>
///   K <fx> <fy> <cx> <cy> <skew>            m lines, CALIBRATED only
///   O <i> <j> <x> <y>                       p lines, 0-based indices
///   GT <qw> <qx> <qy> <qz> <tx> <ty> <tz>   m lines, optional
Scene read_tracks(const std::string& path);

/// Inverse of read_tracks; reals carry 17 significant digits so the
/// round-trip is bitwise.
void write_tracks(const Scene& scene, const std::string& path);

/// ASCII point-cloud export: scene points in white, camera centers in red.
void write_ply(const PointCloud& points, const CameraSet& cams, const std::string& path);

struct Checkpoint {
  ModelParams params;
  std::optional<AdamState> adam;
  uint64_t seed = 0;
};

void save_checkpoint(const ModelParams& params, const AdamState* adam, uint64_t seed,
                     const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

struct ShapeExpectation {
  CameraMode mode;
  ModelDims dims;
};

/// load_checkpoint plus a shape/mode validation against the expectation.
Checkpoint load_checkpoint_expect(const std::string& path, const ShapeExpectation& expect);

}  // namespace esfm
