#pragma once

#include <Eigen/Core>
#include <optional>
#include <vector>

#include "esfm/errors.hpp"
#include "esfm/measurements.hpp"

namespace esfm {

enum class CameraMode { Calibrated, Projective };

/// (w, x, y, z) components, Hamilton product convention; the rotation acts on
/// column vectors as R(q) * v. q and -q represent the same rotation.
struct Quaternion {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

  double norm() const;
  Quaternion normalized() const;
  Eigen::Vector4d coeffs() const { return {w, x, y, z}; }
};

/// World-to-camera pose [R | t]; the camera center is -R^T t.
struct CalibratedPose {
  Quaternion rotation;
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  Eigen::Matrix<double, 3, 4> matrix() const;
  Eigen::Vector3d center() const;
};

/// General 3x4 camera. After normalize_projective_camera the left 3x3 block
/// has positive determinant and a unit-norm third row, so the third
/// homogeneous output coordinate is a usable depth proxy.
struct ProjectiveCamera {
  Eigen::Matrix<double, 3, 4> P = Eigen::Matrix<double, 3, 4>::Zero();
};

using Point3 = Eigen::Vector3d;

struct PointCloud {
  Eigen::Matrix3Xd points;  // column j is X_j

  int size() const { return static_cast<int>(points.cols()); }
};

/// Recovered cameras. Calibrated sets hold poses, projective sets hold raw
/// 3x4 matrices; matrix(i) presents both uniformly.
struct CameraSet {
  CameraMode mode = CameraMode::Calibrated;
  std::vector<CalibratedPose> poses;       // calibrated mode
  std::vector<ProjectiveCamera> cameras;   // projective mode

  int size() const {
    return mode == CameraMode::Calibrated ? static_cast<int>(poses.size())
                                          : static_cast<int>(cameras.size());
  }
  Eigen::Matrix<double, 3, 4> matrix(int i) const;
  Eigen::Vector3d center(int i) const;
};

struct Metrics {
  double mean_reprojection_px = 0.0;
  std::optional<double> rotation_error_deg;  // requires calibrated ground truth
  std::optional<double> location_error;      // in ground-truth units
};

/// Rotation matrix of q (normalized internally). Throws DegenerateQuaternion
/// when the norm is below 1e-12.
Eigen::Matrix3d quat_to_rotation(const Quaternion& q);

/// Nearest unit quaternion to a rotation matrix, w >= 0.
Quaternion rotation_to_quat(const Eigen::Matrix3d& R);

/// Scales P (flipping sign if needed) so the left block has positive
/// determinant and unit-norm third row.
ProjectiveCamera normalize_projective_camera(const Eigen::Matrix<double, 3, 4>& P);

struct Projection {
  Eigen::Vector2d point = Eigen::Vector2d::Zero();
  double depth = 0.0;
  bool valid = false;  // false when |depth| <= 1e-15; point is then unset
};

Projection project(const Eigen::Matrix<double, 3, 4>& P, const Point3& X);

/// Linear triangulation: stacks two rows (x * P3 - P1, y * P3 - P2) per view
/// and takes the smallest-singular-vector solution of the homogeneous system.
Point3 triangulate_dlt(const std::vector<Eigen::Matrix<double, 3, 4>>& cameras,
                       const std::vector<Eigen::Vector2d>& points2);

struct SimilarityTransform {
  double scale = 1.0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const {
    return scale * (rotation * p) + translation;
  }
};

/// Closed-form least-squares similarity src -> tgt with positive scale and
/// det(R) = +1. Requires >= 3 non-collinear correspondences.
SimilarityTransform similarity_align(const std::vector<Eigen::Vector3d>& source,
                                     const std::vector<Eigen::Vector3d>& target);

/// Reprojection error in pixels (masked mean of per-measurement l2 residuals
/// mapped back through `denorm`), plus rotation/location errors against the
/// ground truth when both camera sets are calibrated. Errors are measured
/// after aligning predicted camera centers to the ground-truth centers with a
/// similarity transform.
Metrics evaluate_metrics(const CameraSet& pred_cams, const PointCloud& pred_pts,
                         const CameraSet* gt_cams, const MeasurementTensor& tensor,
                         const std::vector<NormalizationTransform>& denorm);

}  // namespace esfm
