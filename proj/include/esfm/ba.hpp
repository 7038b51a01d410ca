#pragma once

#include <utility>
#include <vector>

#include "esfm/geometry.hpp"
#include "esfm/measurements.hpp"

namespace esfm {

struct BAConfig {
  double huber_delta = 0.1;
  int max_iterations = 100;
  double initial_lambda = 1e-3;
  double lambda_up = 10.0;
  double lambda_down = 0.5;
  double tolerance = 1e-10;  // relative robust-cost decrease
};

struct BAResult {
  CameraSet cameras;
  PointCloud points;
  std::vector<double> cost_history;  // robust cost at the start and after each accepted step
  int excluded_measurements = 0;     // non-positive initial depth
  std::vector<int> excluded_points;  // tracks with < 2 usable views, held fixed
};

/// Huber robustifier on the residual norm: r^2/2 inside delta, affine
/// outside, C1 across the boundary. Returns (value, first derivative).
std::pair<double, double> huber_rho(double r, double delta);

/// Levenberg-Marquardt refinement of cameras and points under the robustified
/// reprojection cost, with additive damping and Schur elimination of the
/// point blocks. Calibrated cameras move on a 3-parameter rotation tangent
/// plus translation; projective cameras move in all 12 entries and are
/// renormalized after convergence. Accepted steps strictly decrease the cost.
BAResult run_bundle_adjustment(const CameraSet& cams, const PointCloud& pts,
                               const MeasurementTensor& t, const BAConfig& cfg);

}  // namespace esfm
