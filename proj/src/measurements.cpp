#include "esfm/measurements.hpp"

#include <Eigen/LU>
#include <algorithm>
#include <cmath>
#include <numeric>

namespace esfm {

namespace {

Eigen::Vector2d apply_homography(const Eigen::Matrix3d& H, const Eigen::Vector2d& pt) {
  Eigen::Vector3d h = H * Eigen::Vector3d(pt.x(), pt.y(), 1.0);
  return {h.x() / h.z(), h.y() / h.z()};
}

}  // namespace

Eigen::Vector2d NormalizationTransform::apply(const Eigen::Vector2d& pt) const {
  return apply_homography(forward, pt);
}

Eigen::Vector2d NormalizationTransform::apply_inverse(const Eigen::Vector2d& pt) const {
  return apply_homography(inverse, pt);
}

bool MeasurementTensor::operator==(const MeasurementTensor& o) const {
  return m_ == o.m_ && n_ == o.n_ && p_ == o.p_ && cam_of_ == o.cam_of_ &&
         trk_of_ == o.trk_of_ && coords_ == o.coords_;
}

MeasurementTensor build_measurements(const std::vector<Observation>& obs, int m, int n) {
  if (m <= 0 || n <= 0)
    throw Error(ErrorCode::InvalidArgument, "camera and track counts must be positive");
  if (obs.empty())
    throw Error(ErrorCode::InvalidArgument, "observation list is empty");

  for (const Observation& o : obs) {
    if (o.camera_index < 0 || o.camera_index >= m || o.track_index < 0 || o.track_index >= n)
      throw Error(ErrorCode::IndexOutOfRange,
                  "observation (" + std::to_string(o.camera_index) + ", " +
                      std::to_string(o.track_index) + ") outside " + std::to_string(m) +
                      " x " + std::to_string(n),
                  o.camera_index, o.track_index);
  }

  // Canonical storage order is (camera, track); the build is therefore
  // independent of the input ordering.
  std::vector<int> order(obs.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return std::pair(obs[a].camera_index, obs[a].track_index) <
           std::pair(obs[b].camera_index, obs[b].track_index);
  });

  const int p = static_cast<int>(obs.size());
  MeasurementTensor t;
  t.m_ = m;
  t.n_ = n;
  t.p_ = p;
  t.coords_.resize(2, p);
  t.cam_of_.resize(p);
  t.trk_of_.resize(p);
  for (int k = 0; k < p; ++k) {
    const Observation& o = obs[order[k]];
    if (k > 0 && t.cam_of_[k - 1] == o.camera_index && t.trk_of_[k - 1] == o.track_index)
      throw Error(ErrorCode::DuplicateObservation,
                  "duplicate observation (" + std::to_string(o.camera_index) + ", " +
                      std::to_string(o.track_index) + ")",
                  o.camera_index, o.track_index);
    t.cam_of_[k] = o.camera_index;
    t.trk_of_[k] = o.track_index;
    t.coords_(0, k) = o.x;
    t.coords_(1, k) = o.y;
  }

  t.row_offsets_.assign(m + 1, 0);
  t.col_offsets_.assign(n + 1, 0);
  for (int k = 0; k < p; ++k) {
    ++t.row_offsets_[t.cam_of_[k] + 1];
    ++t.col_offsets_[t.trk_of_[k] + 1];
  }
  for (int i = 0; i < m; ++i) t.row_offsets_[i + 1] += t.row_offsets_[i];
  for (int j = 0; j < n; ++j) t.col_offsets_[j + 1] += t.col_offsets_[j];

  for (int j = 0; j < n; ++j)
    if (t.col_offsets_[j + 1] - t.col_offsets_[j] < 2)
      throw Error(ErrorCode::TrackTooShort,
                  "track " + std::to_string(j) + " is observed in fewer than 2 cameras", j);
  for (int i = 0; i < m; ++i)
    if (t.row_offsets_[i + 1] == t.row_offsets_[i])
      throw Error(ErrorCode::EmptyCamera, "camera " + std::to_string(i) + " has no observations", i);

  // Storage is (camera, track)-sorted, so a stable fill per track yields
  // camera order within each track.
  t.col_perm_.resize(p);
  std::vector<int> cursor(t.col_offsets_.begin(), t.col_offsets_.end() - 1);
  for (int k = 0; k < p; ++k) t.col_perm_[cursor[t.trk_of_[k]]++] = k;

  return t;
}

std::pair<MeasurementTensor, std::vector<NormalizationTransform>>
hartley_normalize(const MeasurementTensor& t) {
  const int m = t.cameras();
  std::vector<NormalizationTransform> transforms(m);
  std::vector<Observation> out;
  out.reserve(t.observations());

  for (int i = 0; i < m; ++i) {
    const int begin = t.row_begin(i), end = t.row_end(i);
    const int cnt = end - begin;
    Eigen::Vector2d centroid = Eigen::Vector2d::Zero();
    for (int k = begin; k < end; ++k) centroid += t.coords().col(k);
    centroid /= cnt;

    double mean_dist = 0.0;
    for (int k = begin; k < end; ++k) mean_dist += (t.coords().col(k) - centroid).norm();
    mean_dist /= cnt;

    const double scale = mean_dist > 1e-15 ? std::sqrt(2.0) / mean_dist : 1.0;

    Eigen::Matrix3d N = Eigen::Matrix3d::Identity();
    N(0, 0) = N(1, 1) = scale;
    N(0, 2) = -scale * centroid.x();
    N(1, 2) = -scale * centroid.y();
    Eigen::Matrix3d Ninv = Eigen::Matrix3d::Identity();
    Ninv(0, 0) = Ninv(1, 1) = 1.0 / scale;
    Ninv(0, 2) = centroid.x();
    Ninv(1, 2) = centroid.y();
    transforms[i] = {N, Ninv};

    for (int k = begin; k < end; ++k) {
      Eigen::Vector2d q = scale * (t.coords().col(k) - centroid);
      out.push_back({i, t.track_of(k), q.x(), q.y()});
    }
  }

  return {build_measurements(out, t.cameras(), t.tracks()), std::move(transforms)};
}

std::pair<MeasurementTensor, std::vector<NormalizationTransform>>
intrinsics_normalize(const MeasurementTensor& t, const std::vector<Eigen::Matrix3d>& intrinsics) {
  const int m = t.cameras();
  if (static_cast<int>(intrinsics.size()) != m)
    throw Error(ErrorCode::InvalidArgument, "expected one intrinsic matrix per camera");

  std::vector<NormalizationTransform> transforms(m);
  for (int i = 0; i < m; ++i) {
    const Eigen::Matrix3d& K = intrinsics[i];
    const double mag = K.cwiseAbs().maxCoeff();
    if (std::abs(K(1, 0)) > 1e-12 * mag || std::abs(K(2, 0)) > 1e-12 * mag ||
        std::abs(K(2, 1)) > 1e-12 * mag)
      throw Error(ErrorCode::NonUpperTriangular,
                  "intrinsics of camera " + std::to_string(i) + " are not upper-triangular", i);
    if (K(0, 0) <= 0.0 || K(1, 1) <= 0.0 || K(2, 2) <= 0.0)
      throw Error(ErrorCode::SingularIntrinsics,
                  "intrinsics of camera " + std::to_string(i) +
                      " must have a positive diagonal", i);
    transforms[i].forward = K.inverse();
    transforms[i].inverse = K;
  }

  std::vector<Observation> out;
  out.reserve(t.observations());
  for (int k = 0; k < t.observations(); ++k) {
    const int i = t.camera_of(k);
    Eigen::Vector2d q = transforms[i].apply(t.coords().col(k));
    out.push_back({i, t.track_of(k), q.x(), q.y()});
  }
  return {build_measurements(out, t.cameras(), t.tracks()), std::move(transforms)};
}

RestrictedTensor restrict_to_cameras(const MeasurementTensor& t,
                                     const std::vector<int>& camera_subset) {
  if (camera_subset.empty())
    throw Error(ErrorCode::EmptySubset, "camera subset is empty");
  std::vector<int> cam_map(t.cameras(), -1);
  for (size_t i = 0; i < camera_subset.size(); ++i) {
    const int c = camera_subset[i];
    if (c < 0 || c >= t.cameras())
      throw Error(ErrorCode::IndexOutOfRange, "camera " + std::to_string(c) + " out of range", c);
    if (cam_map[c] != -1)
      throw Error(ErrorCode::InvalidArgument, "camera subset contains duplicates");
    cam_map[c] = static_cast<int>(i);
  }

  // Tracks survive only if they keep >= 2 views inside the subset.
  std::vector<int> views_in_subset(t.tracks(), 0);
  for (int k = 0; k < t.observations(); ++k)
    if (cam_map[t.camera_of(k)] >= 0) ++views_in_subset[t.track_of(k)];

  std::vector<int> trk_map(t.tracks(), -1);
  std::vector<int> kept_tracks;
  for (int j = 0; j < t.tracks(); ++j)
    if (views_in_subset[j] >= 2) {
      trk_map[j] = static_cast<int>(kept_tracks.size());
      kept_tracks.push_back(j);
    }
  if (kept_tracks.empty())
    throw Error(ErrorCode::EmptySubset, "no track is seen twice inside the camera subset");

  std::vector<Observation> obs;
  for (int k = 0; k < t.observations(); ++k) {
    const int ci = cam_map[t.camera_of(k)];
    const int tj = trk_map[t.track_of(k)];
    if (ci >= 0 && tj >= 0)
      obs.push_back({ci, tj, t.coords()(0, k), t.coords()(1, k)});
  }

  // A subset camera can end up with zero observations once short tracks drop.
  std::vector<int> per_cam(camera_subset.size(), 0);
  for (const Observation& o : obs) ++per_cam[o.camera_index];
  for (size_t i = 0; i < per_cam.size(); ++i)
    if (per_cam[i] == 0)
      throw Error(ErrorCode::EmptySubset,
                  "camera " + std::to_string(camera_subset[i]) +
                      " has no surviving observations in the subset",
                  camera_subset[i]);

  RestrictedTensor r;
  r.tensor = build_measurements(obs, static_cast<int>(camera_subset.size()),
                                static_cast<int>(kept_tracks.size()));
  r.kept_cameras = camera_subset;
  r.kept_tracks = std::move(kept_tracks);
  return r;
}

}  // namespace esfm
