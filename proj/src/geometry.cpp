#include "esfm/geometry.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cmath>

namespace esfm {

double Quaternion::norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

Quaternion Quaternion::normalized() const {
  const double n = norm();
  if (n <= 1e-12)
    throw Error(ErrorCode::DegenerateQuaternion, "quaternion norm below 1e-12");
  return {w / n, x / n, y / n, z / n};
}

Eigen::Matrix<double, 3, 4> CalibratedPose::matrix() const {
  Eigen::Matrix<double, 3, 4> P;
  P.leftCols<3>() = quat_to_rotation(rotation);
  P.col(3) = translation;
  return P;
}

Eigen::Vector3d CalibratedPose::center() const {
  return -quat_to_rotation(rotation).transpose() * translation;
}

Eigen::Matrix<double, 3, 4> CameraSet::matrix(int i) const {
  return mode == CameraMode::Calibrated ? poses[i].matrix() : cameras[i].P;
}

Eigen::Vector3d CameraSet::center(int i) const {
  if (mode == CameraMode::Calibrated) return poses[i].center();
  // Projective center: right null vector of P, dehomogenized.
  Eigen::JacobiSVD<Eigen::Matrix<double, 3, 4>> svd(cameras[i].P, Eigen::ComputeFullV);
  Eigen::Vector4d c = svd.matrixV().col(3);
  if (std::abs(c(3)) < 1e-12)
    throw Error(ErrorCode::PointAtInfinity, "camera center at infinity", i);
  return c.head<3>() / c(3);
}

Eigen::Matrix3d quat_to_rotation(const Quaternion& q) {
  const Quaternion u = q.normalized();
  const double w = u.w, x = u.x, y = u.y, z = u.z;
  Eigen::Matrix3d R;
  R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
       2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
       2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return R;
}

Quaternion rotation_to_quat(const Eigen::Matrix3d& R) {
  // Shepperd's method: pick the largest diagonal combination for stability.
  const double tr = R.trace();
  Quaternion q;
  if (tr > 0.0) {
    double s = std::sqrt(tr + 1.0) * 2.0;
    q.w = 0.25 * s;
    q.x = (R(2, 1) - R(1, 2)) / s;
    q.y = (R(0, 2) - R(2, 0)) / s;
    q.z = (R(1, 0) - R(0, 1)) / s;
  } else if (R(0, 0) > R(1, 1) && R(0, 0) > R(2, 2)) {
    double s = std::sqrt(1.0 + R(0, 0) - R(1, 1) - R(2, 2)) * 2.0;
    q.w = (R(2, 1) - R(1, 2)) / s;
    q.x = 0.25 * s;
    q.y = (R(0, 1) + R(1, 0)) / s;
    q.z = (R(0, 2) + R(2, 0)) / s;
  } else if (R(1, 1) > R(2, 2)) {
    double s = std::sqrt(1.0 + R(1, 1) - R(0, 0) - R(2, 2)) * 2.0;
    q.w = (R(0, 2) - R(2, 0)) / s;
    q.x = (R(0, 1) + R(1, 0)) / s;
    q.y = 0.25 * s;
    q.z = (R(1, 2) + R(2, 1)) / s;
  } else {
    double s = std::sqrt(1.0 + R(2, 2) - R(0, 0) - R(1, 1)) * 2.0;
    q.w = (R(1, 0) - R(0, 1)) / s;
    q.x = (R(0, 2) + R(2, 0)) / s;
    q.y = (R(1, 2) + R(2, 1)) / s;
    q.z = 0.25 * s;
  }
  if (q.w < 0.0) { q.w = -q.w; q.x = -q.x; q.y = -q.y; q.z = -q.z; }
  return q.normalized();
}

ProjectiveCamera normalize_projective_camera(const Eigen::Matrix<double, 3, 4>& P) {
  const Eigen::Matrix3d A = P.leftCols<3>();
  const double det = A.determinant();
  const double row3 = A.row(2).norm();
  if (row3 <= 1e-15 || std::abs(det) <= 1e-15 * std::pow(A.norm() + 1e-300, 3))
    throw Error(ErrorCode::SingularCameraBlock,
                "left 3x3 block is singular or has a vanishing third row");
  const double sign = det > 0.0 ? 1.0 : -1.0;
  ProjectiveCamera out;
  out.P = (sign / row3) * P;
  return out;
}

Projection project(const Eigen::Matrix<double, 3, 4>& P, const Point3& X) {
  const Eigen::Vector4d Xh(X.x(), X.y(), X.z(), 1.0);
  const Eigen::Vector3d u = P * Xh;
  Projection pr;
  pr.depth = u.z();
  if (std::abs(u.z()) > 1e-15) {
    pr.point = {u.x() / u.z(), u.y() / u.z()};
    pr.valid = true;
  }
  return pr;
}

Point3 triangulate_dlt(const std::vector<Eigen::Matrix<double, 3, 4>>& cameras,
                       const std::vector<Eigen::Vector2d>& points2) {
  const int k = static_cast<int>(cameras.size());
  if (k < 2 || points2.size() != cameras.size())
    throw Error(ErrorCode::TooFewViews, "triangulation needs >= 2 views");

  Eigen::MatrixXd A(2 * k, 4);
  for (int v = 0; v < k; ++v) {
    const auto& P = cameras[v];
    A.row(2 * v) = points2[v].x() * P.row(2) - P.row(0);
    A.row(2 * v + 1) = points2[v].y() * P.row(2) - P.row(1);
  }

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  int rank = 0;
  for (int i = 0; i < sv.size(); ++i)
    if (sv(i) > 1e-12 * sv(0)) ++rank;
  if (rank < 3)
    throw Error(ErrorCode::DegenerateSystem,
                "triangulation system has rank " + std::to_string(rank));

  Eigen::Vector4d Xh = svd.matrixV().col(3);
  if (std::abs(Xh(3)) < 1e-12)
    throw Error(ErrorCode::PointAtInfinity, "triangulated point at infinity");
  return Xh.head<3>() / Xh(3);
}

SimilarityTransform similarity_align(const std::vector<Eigen::Vector3d>& source,
                                     const std::vector<Eigen::Vector3d>& target) {
  const int k = static_cast<int>(source.size());
  if (k < 3 || target.size() != source.size())
    throw Error(ErrorCode::TooFewPoints, "similarity alignment needs >= 3 correspondences");

  Eigen::Vector3d mu_s = Eigen::Vector3d::Zero(), mu_t = Eigen::Vector3d::Zero();
  for (int i = 0; i < k; ++i) { mu_s += source[i]; mu_t += target[i]; }
  mu_s /= k;
  mu_t /= k;

  Eigen::Matrix3d sigma = Eigen::Matrix3d::Zero();
  double var_s = 0.0;
  for (int i = 0; i < k; ++i) {
    sigma += (target[i] - mu_t) * (source[i] - mu_s).transpose();
    var_s += (source[i] - mu_s).squaredNorm();
  }
  sigma /= k;
  var_s /= k;

  Eigen::JacobiSVD<Eigen::Matrix3d> svd(sigma, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  if (var_s <= 1e-24 || sv(1) <= 1e-9 * sv(0))
    throw Error(ErrorCode::DegenerateConfiguration,
                "correspondences are collinear or coincident");

  Eigen::Vector3d d = Eigen::Vector3d::Ones();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) d(2) = -1.0;

  SimilarityTransform T;
  T.rotation = svd.matrixU() * d.asDiagonal() * svd.matrixV().transpose();
  T.scale = (sv.array() * d.array()).sum() / var_s;
  if (T.scale <= 0.0)
    throw Error(ErrorCode::DegenerateConfiguration, "alignment produced a non-positive scale");
  T.translation = mu_t - T.scale * (T.rotation * mu_s);
  return T;
}

namespace {

double rotation_angle_deg(const Eigen::Matrix3d& A, const Eigen::Matrix3d& B) {
  const double c = ((A.transpose() * B).trace() - 1.0) / 2.0;
  return std::acos(std::clamp(c, -1.0, 1.0)) * 180.0 / M_PI;
}

}  // namespace

Metrics evaluate_metrics(const CameraSet& pred_cams, const PointCloud& pred_pts,
                         const CameraSet* gt_cams, const MeasurementTensor& tensor,
                         const std::vector<NormalizationTransform>& denorm) {
  const int m = tensor.cameras();
  if (pred_cams.size() != m || pred_pts.size() != tensor.tracks())
    throw Error(ErrorCode::ShapeMismatch, "camera/point counts do not match the tensor");
  if (static_cast<int>(denorm.size()) != m)
    throw Error(ErrorCode::ShapeMismatch, "expected one denormalization transform per camera");

  Metrics metrics;

  std::vector<Eigen::Matrix<double, 3, 4>> P(m);
  for (int i = 0; i < m; ++i) P[i] = pred_cams.matrix(i);

  double sum_px = 0.0;
  for (int k = 0; k < tensor.observations(); ++k) {
    const int i = tensor.camera_of(k);
    const Projection pr = project(P[i], pred_pts.points.col(tensor.track_of(k)));
    if (!pr.valid) {
      sum_px += 1e30;  // behind/at the camera plane; keep the mean finite
      continue;
    }
    const Eigen::Vector2d pred_px = denorm[i].apply_inverse(pr.point);
    const Eigen::Vector2d obs_px = denorm[i].apply_inverse(tensor.coords().col(k));
    sum_px += (pred_px - obs_px).norm();
  }
  metrics.mean_reprojection_px = sum_px / tensor.observations();

  if (gt_cams == nullptr) return metrics;
  if (gt_cams->mode != CameraMode::Calibrated || pred_cams.mode != CameraMode::Calibrated)
    throw Error(ErrorCode::MissingGroundTruth,
                "rotation/location errors require calibrated predictions and ground truth");
  if (gt_cams->size() != m)
    throw Error(ErrorCode::ShapeMismatch, "ground-truth camera count mismatch");

  std::vector<Eigen::Vector3d> pred_centers(m), gt_centers(m);
  for (int i = 0; i < m; ++i) {
    pred_centers[i] = pred_cams.center(i);
    gt_centers[i] = gt_cams->center(i);
  }
  const SimilarityTransform T = similarity_align(pred_centers, gt_centers);

  double rot_sum = 0.0, loc_sum = 0.0;
  for (int i = 0; i < m; ++i) {
    // A world-frame similarity X -> sRX + t turns camera rotation Rc into
    // Rc R^T, so the aligned prediction is R_pred * T.rotation^T.
    const Eigen::Matrix3d R_pred = quat_to_rotation(pred_cams.poses[i].rotation);
    const Eigen::Matrix3d R_gt = quat_to_rotation(gt_cams->poses[i].rotation);
    rot_sum += rotation_angle_deg(R_gt, R_pred * T.rotation.transpose());
    loc_sum += (T.apply(pred_centers[i]) - gt_centers[i]).norm();
  }
  metrics.rotation_error_deg = rot_sum / m;
  metrics.location_error = loc_sum / m;
  return metrics;
}

}  // namespace esfm
