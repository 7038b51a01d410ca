#include "esfm/synth.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <random>

namespace esfm {

namespace {

Eigen::Vector3d random_unit_vector(std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::Vector3d v;
  do {
    v = {gauss(rng), gauss(rng), gauss(rng)};
  } while (v.norm() < 1e-6);
  return v.normalized();
}

Eigen::Vector3d random_in_ball(double radius, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uni(-radius, radius);
  while (true) {
    Eigen::Vector3d v(uni(rng), uni(rng), uni(rng));
    if (v.norm() <= radius) return v;
  }
}

/// World-to-camera rotation looking from `eye` toward `target`, +z forward.
Eigen::Matrix3d look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target) {
  const Eigen::Vector3d forward = (target - eye).normalized();
  Eigen::Vector3d up(0.0, 1.0, 0.0);
  if (std::abs(forward.dot(up)) > 0.99) up = {1.0, 0.0, 0.0};
  const Eigen::Vector3d right = up.cross(forward).normalized();
  const Eigen::Vector3d down = forward.cross(right);
  Eigen::Matrix3d R;
  R.row(0) = right;
  R.row(1) = down;
  R.row(2) = forward;
  return R;
}

}  // namespace

SynthScene generate_scene(const SynthConfig& cfg) {
  if (cfg.m < 2 || cfg.n < 8)
    throw Error(ErrorCode::InfeasibleConfig, "need at least 2 cameras and 8 points");
  if (cfg.visibility <= 0.0 || cfg.visibility > 1.0)
    throw Error(ErrorCode::InfeasibleConfig, "visibility fraction must be in (0, 1]");
  if (cfg.camera_radius <= cfg.point_radius)
    throw Error(ErrorCode::InfeasibleConfig,
                "camera radius must exceed the point-cloud radius to keep depths positive");
  if (cfg.image_size <= 0.0 || cfg.point_radius <= 0.0)
    throw Error(ErrorCode::InfeasibleConfig, "image size and point radius must be positive");

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uni01(0.0, 1.0);
  std::uniform_int_distribution<int> rand_cam(0, cfg.m - 1);

  SynthScene scene;
  scene.mode = cfg.mode;

  Eigen::Matrix3d K = Eigen::Matrix3d::Identity();
  K(0, 0) = K(1, 1) = cfg.image_size;
  K(0, 2) = K(1, 2) = cfg.image_size / 2.0;
  scene.intrinsics.assign(cfg.m, K);

  scene.gt_cameras.mode = CameraMode::Calibrated;
  scene.gt_cameras.poses.resize(cfg.m);
  for (int i = 0; i < cfg.m; ++i) {
    const Eigen::Vector3d center = cfg.camera_radius * random_unit_vector(rng);
    Eigen::Vector3d target(gauss(rng), gauss(rng), gauss(rng));
    target *= cfg.lookat_jitter;
    const Eigen::Matrix3d R = look_at(center, target);
    scene.gt_cameras.poses[i].rotation = rotation_to_quat(R);
    scene.gt_cameras.poses[i].translation = -R * center;
  }

  scene.gt_points.points.resize(3, cfg.n);
  for (int j = 0; j < cfg.n; ++j)
    scene.gt_points.points.col(j) = random_in_ball(cfg.point_radius, rng);

  // Visibility mask: i.i.d. Bernoulli, then repaired upward so every track
  // has >= 2 views and every camera >= 1 observation.
  std::vector<std::vector<bool>> visible(cfg.m, std::vector<bool>(cfg.n, false));
  std::vector<int> track_views(cfg.n, 0), cam_views(cfg.m, 0);
  for (int i = 0; i < cfg.m; ++i)
    for (int j = 0; j < cfg.n; ++j)
      if (uni01(rng) < cfg.visibility) {
        visible[i][j] = true;
        ++track_views[j];
        ++cam_views[i];
      }
  for (int j = 0; j < cfg.n; ++j) {
    int guard = 0;
    while (track_views[j] < 2) {
      if (++guard > 100 * cfg.m)
        throw Error(ErrorCode::InfeasibleConfig, "visibility repair failed");
      const int i = rand_cam(rng);
      if (!visible[i][j]) {
        visible[i][j] = true;
        ++track_views[j];
        ++cam_views[i];
      }
    }
  }
  std::uniform_int_distribution<int> rand_trk(0, cfg.n - 1);
  for (int i = 0; i < cfg.m; ++i)
    while (cam_views[i] == 0) {
      const int j = rand_trk(rng);
      visible[i][j] = true;
      ++track_views[j];
      ++cam_views[i];
    }

  std::vector<Observation> obs;
  for (int i = 0; i < cfg.m; ++i) {
    const Eigen::Matrix<double, 3, 4> P = K * scene.gt_cameras.poses[i].matrix();
    for (int j = 0; j < cfg.n; ++j) {
      if (!visible[i][j]) continue;
      const Projection pr = project(P, scene.gt_points.points.col(j));
      double x = pr.point.x(), y = pr.point.y();
      if (cfg.pixel_noise > 0.0) {
        x += cfg.pixel_noise * gauss(rng);
        y += cfg.pixel_noise * gauss(rng);
      }
      obs.push_back({i, j, x, y});
    }
  }

  scene.tensor = build_measurements(obs, cfg.m, cfg.n);
  return scene;
}

MeasurementTensor random_tensor(int m, int n, double visibility, uint64_t seed) {
  if (m < 2 || n < 2)
    throw Error(ErrorCode::InfeasibleConfig, "need at least 2 cameras and 2 tracks");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni01(0.0, 1.0);
  std::uniform_real_distribution<double> coord(-1.0, 1.0);
  std::uniform_int_distribution<int> rand_cam(0, m - 1);
  std::uniform_int_distribution<int> rand_trk(0, n - 1);

  std::vector<std::vector<bool>> visible(m, std::vector<bool>(n, false));
  std::vector<int> track_views(n, 0), cam_views(m, 0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      if (uni01(rng) < visibility) {
        visible[i][j] = true;
        ++track_views[j];
        ++cam_views[i];
      }
  for (int j = 0; j < n; ++j)
    while (track_views[j] < 2) {
      const int i = rand_cam(rng);
      if (!visible[i][j]) {
        visible[i][j] = true;
        ++track_views[j];
        ++cam_views[i];
      }
    }
  for (int i = 0; i < m; ++i)
    while (cam_views[i] == 0) {
      const int j = rand_trk(rng);
      visible[i][j] = true;
      ++track_views[j];
      ++cam_views[i];
    }

  std::vector<Observation> obs;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      if (visible[i][j]) obs.push_back({i, j, coord(rng), coord(rng)});
  return build_measurements(obs, m, n);
}

}  // namespace esfm
