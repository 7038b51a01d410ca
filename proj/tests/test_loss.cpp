#include <doctest.h>

#include <Eigen/LU>
#include <cmath>
#include <random>

#include "esfm/autograd.hpp"
#include "esfm/loss.hpp"
#include "esfm/synth.hpp"

using namespace esfm;

namespace {

Eigen::Matrix<double, 3, 4> identity_camera() {
  Eigen::Matrix<double, 3, 4> P = Eigen::Matrix<double, 3, 4>::Zero();
  P.leftCols<3>() = Eigen::Matrix3d::Identity();
  return P;
}

}  // namespace

TEST_CASE("measurement_residual: 3-4-5 reprojection, hinge, negative depth") {
  const Eigen::Matrix<double, 3, 4> P = identity_camera();

  MeasurementResidual r = measurement_residual(P, {0, 0, 1}, {0.3, 0.4}, 1e-4);
  CHECK(r.branch == ResidualBranch::Reprojection);
  CHECK(r.depth == 1.0);
  CHECK(r.s == doctest::Approx(0.5).epsilon(1e-15));

  r = measurement_residual(P, {0, 0, 5e-5}, {0.0, 0.0}, 1e-4);
  CHECK(r.branch == ResidualBranch::Hinge);
  CHECK(r.s == doctest::Approx(5e-5).epsilon(1e-12));

  r = measurement_residual(P, {0, 0, -1}, {0.0, 0.0}, 1e-4);
  CHECK(r.branch == ResidualBranch::Hinge);
  CHECK(r.s == doctest::Approx(1.0001).epsilon(1e-15));

  // exact boundary goes to the reprojection branch
  r = measurement_residual(P, {0, 0, 1e-4}, {0.0, 0.0}, 1e-4);
  CHECK(r.branch == ResidualBranch::Reprojection);
}

TEST_CASE("compute_loss: ground truth of a noiseless scene scores zero") {
  SynthConfig cfg;
  cfg.m = 6;
  cfg.n = 30;
  cfg.seed = 3;
  const SynthScene scene = generate_scene(cfg);
  const auto [t, transforms] = intrinsics_normalize(scene.tensor, scene.intrinsics);
  const LossBreakdown loss = compute_loss(scene.gt_cameras, scene.gt_points, t, 1e-4);
  CHECK(loss.total < 1e-12);
  CHECK(loss.hinge_count == 0);
}

TEST_CASE("compute_loss: mean of two known residuals") {
  // camera [I|0] twice (distinct translations to avoid degeneracy is not
  // needed for the loss); single track seen twice with engineered residuals
  CameraSet cams;
  cams.mode = CameraMode::Calibrated;
  CalibratedPose pose;
  cams.poses = {pose, pose};
  PointCloud pts;
  pts.points = Eigen::Vector3d(0, 0, 1);

  std::vector<Observation> obs = {{0, 0, 0.3, 0.4}, {1, 0, 0.0, 0.3}};
  const MeasurementTensor t = build_measurements(obs, 2, 1);
  const LossBreakdown loss = compute_loss(cams, pts, t, 1e-4, true);
  CHECK(loss.total == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(loss.per_measurement->at({0, 0}) == doctest::Approx(0.5));
  CHECK(loss.per_measurement->at({1, 0}) == doctest::Approx(0.3));

  // breakdown consistency: total equals the mean of the per-measurement map
  double sum = 0.0;
  for (const auto& [key, s] : *loss.per_measurement) sum += s;
  CHECK(std::abs(loss.total - sum / t.observations()) < 1e-12);
}

TEST_CASE("compute_loss: dense double-loop oracle on random scenes") {
  std::mt19937_64 rng(44);
  std::normal_distribution<double> gauss(0.0, 1.0);

  for (int trial = 0; trial < 20; ++trial) {
    const int m = 3 + static_cast<int>(rng() % 4);
    const int n = 6 + static_cast<int>(rng() % 8);
    const MeasurementTensor t = random_tensor(m, n, 0.7, rng());

    CameraSet cams;
    cams.mode = CameraMode::Projective;
    for (int i = 0; i < m; ++i) {
      Eigen::Matrix<double, 3, 4> P;
      do {
        for (int r = 0; r < 3; ++r)
          for (int c = 0; c < 4; ++c) P(r, c) = gauss(rng);
      } while (std::abs(P.leftCols<3>().determinant()) < 1e-3);
      ProjectiveCamera cam;
      cam.P = P;
      cams.cameras.push_back(cam);
    }
    PointCloud pts;
    pts.points.resize(3, n);
    for (int j = 0; j < n; ++j) pts.points.col(j) = Eigen::Vector3d(gauss(rng), gauss(rng), gauss(rng));

    const double h = 1e-4;
    const LossBreakdown fast = compute_loss(cams, pts, t, h);

    // independent dense evaluation over all (i, j) with explicit masking
    std::vector<std::vector<bool>> mask(m, std::vector<bool>(n, false));
    std::vector<std::vector<Eigen::Vector2d>> coord(m, std::vector<Eigen::Vector2d>(n));
    for (int k = 0; k < t.observations(); ++k) {
      mask[t.camera_of(k)][t.track_of(k)] = true;
      coord[t.camera_of(k)][t.track_of(k)] = t.coords().col(k);
    }
    double sum = 0.0;
    int count = 0;
    for (int i = 0; i < m; ++i) {
      const Eigen::Matrix<double, 3, 4> Pn = normalize_projective_camera(cams.cameras[i].P).P;
      for (int j = 0; j < n; ++j) {
        if (!mask[i][j]) continue;
        const Eigen::Vector4d Xh(pts.points(0, j), pts.points(1, j), pts.points(2, j), 1.0);
        const Eigen::Vector3d u = Pn * Xh;
        double s;
        if (u.z() >= h) {
          const double dx = coord[i][j].x() - u.x() / u.z();
          const double dy = coord[i][j].y() - u.y() / u.z();
          s = std::sqrt(dx * dx + dy * dy);
        } else {
          s = h - u.z();
        }
        sum += s;
        ++count;
      }
    }
    CHECK(count == t.observations());
    CHECK(std::abs(fast.total - sum / count) < 1e-13);
  }
}

TEST_CASE("compute_loss: projective scale invariance") {
  const MeasurementTensor t = random_tensor(3, 8, 0.8, 45);
  std::mt19937_64 rng(46);
  std::normal_distribution<double> gauss(0.0, 1.0);
  CameraSet cams;
  cams.mode = CameraMode::Projective;
  for (int i = 0; i < 3; ++i) {
    ProjectiveCamera cam;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) cam.P(r, c) = gauss(rng);
    cams.cameras.push_back(cam);
  }
  PointCloud pts;
  pts.points = Eigen::Matrix3Xd::Random(3, 8);

  const LossBreakdown base = compute_loss(cams, pts, t, 1e-4);
  CameraSet scaled = cams;
  scaled.cameras[0].P *= -7.0;
  scaled.cameras[1].P *= 0.01;
  const LossBreakdown rescaled = compute_loss(scaled, pts, t, 1e-4);
  CHECK(std::abs(base.total - rescaled.total) < 1e-12);
}

TEST_CASE("attach_loss agrees with compute_loss on model outputs") {
  const MeasurementTensor t = random_tensor(5, 12, 0.7, 47);
  ModelDims dims;
  dims.encoder_width = 16;
  for (CameraMode mode : {CameraMode::Calibrated, CameraMode::Projective}) {
    const ModelParams params = init_params(mode, dims, 48);
    GradientTape tape;
    model_forward(params, t, tape);
    const LossBreakdown a = attach_loss(tape, 1e-4);
    const LossBreakdown b = compute_loss(tape.cameras, tape.points, t, 1e-4);
    // the tape projects with the guarded quaternion normalization, the public
    // pose re-normalizes exactly; the two differ at the epsilon level
    CHECK(std::abs(a.total - b.total) < 1e-9);
    CHECK(a.hinge_count == b.hinge_count);
  }
}
