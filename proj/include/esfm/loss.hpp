#pragma once

#include <Eigen/Core>
#include <map>
#include <optional>
#include <utility>

#include "esfm/geometry.hpp"
#include "esfm/measurements.hpp"

namespace esfm {

enum class ResidualBranch { Reprojection, Hinge };

struct MeasurementResidual {
  double s = 0.0;
  ResidualBranch branch = ResidualBranch::Reprojection;
  double depth = 0.0;
};

struct LossBreakdown {
  double total = 0.0;             // masked mean of the per-measurement terms
  double mean_reprojection = 0.0; // over measurements on the reprojection branch
  int hinge_count = 0;            // measurements with depth below the threshold
  std::optional<std::map<std::pair<int, int>, double>> per_measurement;
};

/// One measurement's term: the l2 reprojection error when the depth
/// P3 * (X, 1) clears the threshold h, otherwise the hinge h - depth. The
/// exact boundary depth == h takes the reprojection branch. The camera must
/// already satisfy the projective normalization (calibrated [R | t] does by
/// construction).
MeasurementResidual measurement_residual(const Eigen::Matrix<double, 3, 4>& P,
                                         const Point3& X, const Eigen::Vector2d& x_obs,
                                         double h);

/// Masked mean of measurement_residual over the tensor. Projective cameras
/// are normalized before evaluation, so the value is invariant to rescaling
/// any P_i.
LossBreakdown compute_loss(const CameraSet& cams, const PointCloud& pts,
                           const MeasurementTensor& t, double h,
                           bool keep_per_measurement = false);

/// Mean l2 reprojection residual over all measurements in the tensor's own
/// (normalized) coordinates; non-finite projections count a large sentinel.
/// This is the validation score used for early stopping.
double mean_reprojection(const CameraSet& cams, const PointCloud& pts,
                         const MeasurementTensor& t);

}  // namespace esfm
