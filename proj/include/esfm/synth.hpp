#pragma once

#include <cstdint>
#include <vector>

#include "esfm/geometry.hpp"
#include "esfm/measurements.hpp"

namespace esfm {

struct SynthConfig {
  int m = 10;
  int n = 200;
  double camera_radius = 4.0;
  double lookat_jitter = 0.1;
  double point_radius = 1.0;
  double visibility = 0.7;       // target fraction of filled (i, j) entries
  double pixel_noise = 0.0;      // Gaussian sigma, pixels
  double image_size = 1000.0;    // focal length and 2x principal point
  uint64_t seed = 1;
  CameraMode mode = CameraMode::Calibrated;
};

struct SynthScene {
  MeasurementTensor tensor;       // pixel coordinates
  CameraSet gt_cameras;           // calibrated poses, also the projective GT source
  PointCloud gt_points;
  std::vector<Eigen::Matrix3d> intrinsics;  // one (shared-value) K per camera
  CameraMode mode = CameraMode::Calibrated;
};

/// Cameras on a jittered look-at sphere, points uniform in a ball,
/// observations as exact projections plus optional pixel noise. The sampled
/// visibility mask is repaired so every track keeps >= 2 views and every
/// camera >= 1 observation; all depths are positive by construction.
/// Deterministic per seed.
SynthScene generate_scene(const SynthConfig& cfg);

/// Unstructured random tensor with coordinates uniform in [-1, 1]; no
/// geometric consistency, intended for gradient and equivariance harnesses.
MeasurementTensor random_tensor(int m, int n, double visibility, uint64_t seed);

}  // namespace esfm
