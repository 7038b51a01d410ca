#include <doctest.h>

#include <Eigen/LU>
#include <algorithm>
#include <numeric>
#include <random>

#include "esfm/autograd.hpp"
#include "esfm/equinet.hpp"
#include "esfm/synth.hpp"

using namespace esfm;

namespace {

EquivariantLayerParams random_layer(int din, int dout, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  EquivariantLayerParams L;
  auto fill = [&](Eigen::MatrixXd& A) {
    A.resize(dout, din);
    for (long i = 0; i < A.size(); ++i) A.data()[i] = gauss(rng);
  };
  fill(L.W1);
  fill(L.W2);
  fill(L.W3);
  fill(L.W4);
  L.b.resize(dout);
  for (long i = 0; i < dout; ++i) L.b(i) = gauss(rng);
  return L;
}

/// Dense realization of the parameter-shared layer, restricted to the mask:
/// a (p*dout) x (p*din) matrix whose (a, b) blocks follow the identity /
/// column-mean / row-mean / global-mean sharing scheme.
Eigen::MatrixXd dense_realization(const EquivariantLayerParams& L, const MeasurementTensor& t) {
  const int p = t.observations();
  const int din = L.in_width(), dout = L.out_width();
  Eigen::MatrixXd D = Eigen::MatrixXd::Zero(p * dout, p * din);
  for (int a = 0; a < p; ++a) {
    const int ia = t.camera_of(a), ja = t.track_of(a);
    for (int bb = 0; bb < p; ++bb) {
      const int ib = t.camera_of(bb), jb = t.track_of(bb);
      Eigen::MatrixXd block = Eigen::MatrixXd::Zero(dout, din);
      if (a == bb) block += L.W1;
      if (ja == jb) block += L.W2 / t.track_count(ja);
      if (ia == ib) block += L.W3 / t.camera_count(ia);
      block += L.W4 / p;
      D.block(a * dout, bb * din, dout, din) = block;
    }
  }
  return D;
}

MeasurementTensor permuted_tensor(const MeasurementTensor& t, const std::vector<int>& tau_cams,
                                  const std::vector<int>& tau_pts) {
  std::vector<Observation> obs;
  for (int k = 0; k < t.observations(); ++k)
    obs.push_back({tau_cams[t.camera_of(k)], tau_pts[t.track_of(k)], t.coords()(0, k),
                   t.coords()(1, k)});
  return build_measurements(obs, t.cameras(), t.tracks());
}

}  // namespace

TEST_CASE("init_params: determinism, bound, zero biases") {
  ModelDims dims;
  dims.encoder_width = 256;
  const ModelParams a = init_params(CameraMode::Calibrated, dims, 42);
  const ModelParams b = init_params(CameraMode::Calibrated, dims, 42);
  const ModelParams c = init_params(CameraMode::Calibrated, dims, 43);

  auto arrays_a = collect_arrays(const_cast<ModelParams&>(a));
  auto arrays_b = collect_arrays(const_cast<ModelParams&>(b));
  auto arrays_c = collect_arrays(const_cast<ModelParams&>(c));
  REQUIRE(arrays_a.size() == arrays_b.size());
  bool all_equal = true, differs_from_c = false;
  for (size_t i = 0; i < arrays_a.size(); ++i) {
    for (long k = 0; k < arrays_a[i].size; ++k) {
      if (arrays_a[i].data[k] != arrays_b[i].data[k]) all_equal = false;
      if (arrays_a[i].data[k] != arrays_c[i].data[k]) differs_from_c = true;
    }
  }
  CHECK(all_equal);
  CHECK(differs_from_c);

  // second encoder layer has fan-in 256
  const double bound = std::sqrt(6.0 / 256.0);
  CHECK(a.encoder[1].W1.cwiseAbs().maxCoeff() <= bound);
  CHECK(a.encoder[1].W2.cwiseAbs().maxCoeff() <= bound);
  CHECK(a.encoder[1].W1.cwiseAbs().maxCoeff() > 0.5 * bound);  // actually random
  CHECK(a.encoder[0].b.cwiseAbs().maxCoeff() == 0.0);
  CHECK(a.cam_head.layers[0].b.cwiseAbs().maxCoeff() == 0.0);

  // calibrated camera head ends at width 7, projective at 12
  CHECK(a.cam_head.layers.back().W.rows() == 7);
  const ModelParams proj = init_params(CameraMode::Projective, dims, 1);
  CHECK(proj.cam_head.layers.back().W.rows() == 12);
  CHECK(a.pt_head.layers.back().W.rows() == 3);

  CHECK_THROWS_AS(init_params(CameraMode::Calibrated, ModelDims{0, 3, 0, 2}, 1), Error);
}

TEST_CASE("equivariant_layer_forward: identity and global-mean special cases") {
  // full 2x2 tensor, scalar features from the x coordinate are not used here;
  // build a width-1 feature map by hand
  std::vector<Observation> obs = {{0, 0, 0, 0}, {0, 1, 0, 0}, {1, 0, 0, 0}, {1, 1, 0, 0}};
  const MeasurementTensor t = build_measurements(obs, 2, 2);

  SparseFeatureMap f;
  f.pattern = &t;
  f.values.resize(1, 4);
  f.values << 1.0, 2.0, 3.0, 4.0;

  EquivariantLayerParams L;
  L.W1 = Eigen::MatrixXd::Identity(1, 1);
  L.W2 = L.W3 = L.W4 = Eigen::MatrixXd::Zero(1, 1);
  L.b = Eigen::VectorXd::Zero(1);
  const SparseFeatureMap id = equivariant_layer_forward(L, f);
  CHECK((id.values - f.values).cwiseAbs().maxCoeff() == 0.0);

  L.W1.setZero();
  L.W4 = Eigen::MatrixXd::Identity(1, 1);
  const SparseFeatureMap glob = equivariant_layer_forward(L, f);
  for (int k = 0; k < 4; ++k) CHECK(glob.values(0, k) == doctest::Approx(2.5).epsilon(1e-15));

  L.W1 = Eigen::MatrixXd::Identity(2, 2);  // width mismatch
  L.W2 = L.W3 = L.W4 = Eigen::MatrixXd::Zero(2, 2);
  L.b = Eigen::VectorXd::Zero(2);
  CHECK_THROWS_AS(equivariant_layer_forward(L, f), Error);
}

TEST_CASE("equivariant layer matches the dense realization") {
  std::mt19937_64 rng(77);
  std::normal_distribution<double> gauss(0.0, 1.0);

  auto run_case = [&](const MeasurementTensor& t, int din, int dout, uint64_t seed) {
    const EquivariantLayerParams L = random_layer(din, dout, seed);
    SparseFeatureMap f;
    f.pattern = &t;
    f.values.resize(din, t.observations());
    for (long i = 0; i < f.values.size(); ++i) f.values.data()[i] = gauss(rng);

    const SparseFeatureMap out = equivariant_layer_forward(L, f);

    const Eigen::MatrixXd D = dense_realization(L, t);
    Eigen::VectorXd flat(din * t.observations());
    for (int k = 0; k < t.observations(); ++k) flat.segment(k * din, din) = f.values.col(k);
    Eigen::VectorXd expect = D * flat;
    for (int k = 0; k < t.observations(); ++k) expect.segment(k * dout, dout) += L.b;

    for (int k = 0; k < t.observations(); ++k)
      CHECK((out.values.col(k) - expect.segment(k * dout, dout)).cwiseAbs().maxCoeff() < 1e-13);
  };

  // full 3x4 tensor
  std::vector<Observation> full;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) full.push_back({i, j, gauss(rng), gauss(rng)});
  run_case(build_measurements(full, 3, 4), 5, 3, 1001);

  // sparse 3x4 tensor, 8 non-empty entries (the fewest a valid 3x4 tensor
  // can have, every track needing two views)
  std::vector<Observation> sparse = {{0, 0, 1, 1}, {0, 2, 1, 1}, {1, 0, 1, 1}, {1, 1, 1, 1},
                                     {2, 1, 1, 1}, {2, 2, 1, 1}, {2, 3, 1, 1}, {0, 3, 1, 1}};
  run_case(build_measurements(sparse, 3, 4), 4, 6, 1002);
}

TEST_CASE("model_forward: shapes, unit quaternions, determinism") {
  const MeasurementTensor t = random_tensor(3, 8, 0.8, 21);
  ModelDims dims;
  dims.encoder_width = 32;
  const ModelParams params = init_params(CameraMode::Calibrated, dims, 5);

  const ModelOutput out = model_forward(params, t);
  REQUIRE(out.cameras.size() == 3);
  REQUIRE(out.points.size() == 8);
  for (const CalibratedPose& pose : out.cameras.poses)
    CHECK(pose.rotation.norm() == doctest::Approx(1.0).epsilon(1e-9));

  const ModelOutput again = model_forward(params, t);
  for (int i = 0; i < 3; ++i) {
    CHECK(out.cameras.poses[i].rotation.coeffs() == again.cameras.poses[i].rotation.coeffs());
    CHECK(out.cameras.poses[i].translation == again.cameras.poses[i].translation);
  }
  CHECK(out.points.points == again.points.points);
}

TEST_CASE("model_forward: projective cameras satisfy the normalization invariants") {
  const MeasurementTensor t = random_tensor(4, 10, 0.7, 22);
  ModelDims dims;
  dims.encoder_width = 32;
  const ModelParams params = init_params(CameraMode::Projective, dims, 6);
  const ModelOutput out = model_forward(params, t);
  for (const ProjectiveCamera& cam : out.cameras.cameras) {
    CHECK(cam.P.leftCols<3>().determinant() > 0.0);
    CHECK(std::abs(cam.P.block<1, 3>(2, 0).norm() - 1.0) < 1e-12);
  }
}

TEST_CASE("model_forward: permutation equivariance end to end") {
  const int m = 8, n = 20;
  const MeasurementTensor t = random_tensor(m, n, 0.6, 23);
  ModelDims dims;
  dims.encoder_width = 24;

  for (CameraMode mode : {CameraMode::Calibrated, CameraMode::Projective}) {
    const ModelParams params = init_params(mode, dims, 9);
    const ModelOutput base = model_forward(params, t);

    std::mt19937_64 rng(24);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<int> tau_cams(m), tau_pts(n);
      std::iota(tau_cams.begin(), tau_cams.end(), 0);
      std::iota(tau_pts.begin(), tau_pts.end(), 0);
      std::shuffle(tau_cams.begin(), tau_cams.end(), rng);
      std::shuffle(tau_pts.begin(), tau_pts.end(), rng);

      const MeasurementTensor tp = permuted_tensor(t, tau_cams, tau_pts);
      const ModelOutput perm = model_forward(params, tp);

      double max_dev = 0.0;
      for (int i = 0; i < m; ++i) {
        if (mode == CameraMode::Calibrated) {
          max_dev = std::max(max_dev,
                             (perm.cameras.poses[tau_cams[i]].rotation.coeffs() -
                              base.cameras.poses[i].rotation.coeffs()).cwiseAbs().maxCoeff());
          max_dev = std::max(max_dev,
                             (perm.cameras.poses[tau_cams[i]].translation -
                              base.cameras.poses[i].translation).cwiseAbs().maxCoeff());
        } else {
          max_dev = std::max(max_dev, (perm.cameras.cameras[tau_cams[i]].P -
                                       base.cameras.cameras[i].P).cwiseAbs().maxCoeff());
        }
      }
      for (int j = 0; j < n; ++j)
        max_dev = std::max(max_dev, (perm.points.points.col(tau_pts[j]) -
                                     base.points.points.col(j)).cwiseAbs().maxCoeff());
      CHECK(max_dev < 1e-9);

      // loss invariance under the joint permutation
      GradientTape tape_base, tape_perm;
      model_forward(params, t, tape_base);
      model_forward(params, tp, tape_perm);
      const double loss_base = attach_loss(tape_base, 1e-4).total;
      const double loss_perm = attach_loss(tape_perm, 1e-4).total;
      CHECK(std::abs(loss_base - loss_perm) < 1e-9);
    }
  }
}

TEST_CASE("model_forward: sparsity pattern is preserved through the encoder") {
  const MeasurementTensor t = random_tensor(5, 9, 0.5, 25);
  ModelDims dims;
  dims.encoder_width = 16;
  const ModelParams params = init_params(CameraMode::Calibrated, dims, 10);
  GradientTape tape;
  model_forward(params, t, tape);
  for (const TapeEncoderLayer& layer : tape.encoder) {
    CHECK(layer.normalized.cols() == t.observations());
    CHECK(layer.normalized.allFinite());
  }
}

TEST_CASE("std normalization flag changes the forward and keeps equivariance") {
  const MeasurementTensor t = random_tensor(4, 9, 0.8, 26);
  ModelDims dims;
  dims.encoder_width = 16;
  ModelParams params = init_params(CameraMode::Calibrated, dims, 11);
  const ModelOutput plain = model_forward(params, t);
  params.std_normalize_features = true;
  const ModelOutput scaled = model_forward(params, t);
  CHECK((plain.points.points - scaled.points.points).cwiseAbs().maxCoeff() > 1e-9);
}
