#pragma once

#include <Eigen/Core>
#include <span>
#include <utility>
#include <vector>

#include "esfm/errors.hpp"

namespace esfm {

struct Observation {
  int camera_index = 0;
  int track_index = 0;
  double x = 0.0;
  double y = 0.0;
};

/// Sparse m x n x 2 tensor of 2D point tracks. Observations are stored once,
/// sorted by (camera, track); the camera-major and track-major index
/// structures address the same storage. Immutable after construction.
class MeasurementTensor {
 public:
  MeasurementTensor() = default;

  int cameras() const { return m_; }
  int tracks() const { return n_; }
  int observations() const { return p_; }

  /// 2 x p matrix; column k is the 2D position of observation k.
  const Eigen::Matrix2Xd& coords() const { return coords_; }
  int camera_of(int k) const { return cam_of_[k]; }
  int track_of(int k) const { return trk_of_[k]; }

  /// Camera-major view: observation indices of camera i are the contiguous
  /// range [row_begin(i), row_end(i)) in storage order.
  int row_begin(int i) const { return row_offsets_[i]; }
  int row_end(int i) const { return row_offsets_[i + 1]; }
  int camera_count(int i) const { return row_offsets_[i + 1] - row_offsets_[i]; }

  /// Track-major view: observation indices of track j, ordered by camera.
  std::span<const int> track_obs(int j) const {
    return {col_perm_.data() + col_offsets_[j],
            static_cast<size_t>(col_offsets_[j + 1] - col_offsets_[j])};
  }
  int track_count(int j) const { return col_offsets_[j + 1] - col_offsets_[j]; }

  bool operator==(const MeasurementTensor& o) const;

  friend MeasurementTensor build_measurements(const std::vector<Observation>& obs,
                                              int m, int n);

 private:
  int m_ = 0;
  int n_ = 0;
  int p_ = 0;
  Eigen::Matrix2Xd coords_;
  std::vector<int> cam_of_;
  std::vector<int> trk_of_;
  std::vector<int> row_offsets_;  // size m+1
  std::vector<int> col_offsets_;  // size n+1
  std::vector<int> col_perm_;     // size p, storage indices sorted by (track, camera)
};

/// Per-camera 3x3 map from raw homogeneous pixel coordinates to normalized
/// coordinates, with its inverse.
struct NormalizationTransform {
  Eigen::Matrix3d forward = Eigen::Matrix3d::Identity();
  Eigen::Matrix3d inverse = Eigen::Matrix3d::Identity();

  Eigen::Vector2d apply(const Eigen::Vector2d& pt) const;
  Eigen::Vector2d apply_inverse(const Eigen::Vector2d& pt) const;
};

/// Validates and indexes a set of observations. Rejects duplicates,
/// out-of-range indices, tracks seen in fewer than two cameras, and cameras
/// with no observations.
MeasurementTensor build_measurements(const std::vector<Observation>& obs, int m, int n);

/// Per camera, translates observed points so their centroid is the origin and
/// scales them so the mean distance from the origin is sqrt(2). A camera whose
/// points have zero spread is translated only.
std::pair<MeasurementTensor, std::vector<NormalizationTransform>>
hartley_normalize(const MeasurementTensor& t);

/// Replaces each observation by the dehomogenized K_i^-1 * (x, y, 1). One
/// upper-triangular intrinsic matrix with positive diagonal per camera.
std::pair<MeasurementTensor, std::vector<NormalizationTransform>>
intrinsics_normalize(const MeasurementTensor& t, const std::vector<Eigen::Matrix3d>& intrinsics);

/// Restriction of a tensor to a camera subset, as used when optimizing on
/// image subsets. Cameras are renumbered in the order given; tracks that fall
/// below two views inside the subset are dropped and the surviving tracks
/// renumbered. `kept_tracks[j']` is the original index of new track j'.
struct RestrictedTensor {
  MeasurementTensor tensor;
  std::vector<int> kept_cameras;
  std::vector<int> kept_tracks;
};
RestrictedTensor restrict_to_cameras(const MeasurementTensor& t,
                                     const std::vector<int>& camera_subset);

}  // namespace esfm
