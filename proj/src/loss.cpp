#include "esfm/loss.hpp"

#include <cmath>
#include <vector>

namespace esfm {

MeasurementResidual measurement_residual(const Eigen::Matrix<double, 3, 4>& P,
                                         const Point3& X, const Eigen::Vector2d& x_obs,
                                         double h) {
  const Eigen::Vector4d Xh(X.x(), X.y(), X.z(), 1.0);
  const Eigen::Vector3d u = P * Xh;
  MeasurementResidual r;
  r.depth = u.z();
  if (u.z() >= h) {
    r.branch = ResidualBranch::Reprojection;
    r.s = (x_obs - Eigen::Vector2d(u.x() / u.z(), u.y() / u.z())).norm();
  } else {
    r.branch = ResidualBranch::Hinge;
    r.s = h - u.z();
  }
  return r;
}

LossBreakdown compute_loss(const CameraSet& cams, const PointCloud& pts,
                           const MeasurementTensor& t, double h,
                           bool keep_per_measurement) {
  if (h <= 0.0) throw Error(ErrorCode::InvalidArgument, "depth threshold must be positive");
  if (cams.size() != t.cameras() || pts.size() != t.tracks())
    throw Error(ErrorCode::ShapeMismatch, "camera/point counts do not match the tensor");

  std::vector<Eigen::Matrix<double, 3, 4>> P(t.cameras());
  for (int i = 0; i < t.cameras(); ++i)
    P[i] = cams.mode == CameraMode::Projective
               ? normalize_projective_camera(cams.cameras[i].P).P
               : cams.matrix(i);

  LossBreakdown out;
  if (keep_per_measurement) out.per_measurement.emplace();

  double sum = 0.0, reproj_sum = 0.0;
  int reproj_count = 0;
  for (int k = 0; k < t.observations(); ++k) {
    const int i = t.camera_of(k), j = t.track_of(k);
    const MeasurementResidual r =
        measurement_residual(P[i], pts.points.col(j), t.coords().col(k), h);
    sum += r.s;
    if (r.branch == ResidualBranch::Hinge) {
      ++out.hinge_count;
    } else {
      reproj_sum += r.s;
      ++reproj_count;
    }
    if (out.per_measurement) (*out.per_measurement)[{i, j}] = r.s;
  }
  out.total = sum / t.observations();
  out.mean_reprojection = reproj_count > 0 ? reproj_sum / reproj_count : 0.0;
  return out;
}

double mean_reprojection(const CameraSet& cams, const PointCloud& pts,
                         const MeasurementTensor& t) {
  double sum = 0.0;
  for (int k = 0; k < t.observations(); ++k) {
    const Projection pr = project(cams.matrix(t.camera_of(k)), pts.points.col(t.track_of(k)));
    double r = pr.valid ? (t.coords().col(k) - pr.point).norm() : 1e30;
    if (!std::isfinite(r)) r = 1e30;
    sum += r;
  }
  return sum / t.observations();
}

}  // namespace esfm
