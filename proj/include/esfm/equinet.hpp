#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <vector>

#include "esfm/geometry.hpp"
#include "esfm/measurements.hpp"

namespace esfm {

/// One permutation-equivariant affine layer. The map applied to each
/// non-empty entry (i, j) is
///   W1 * f_ij + W2 * colmean_j + W3 * rowmean_i + W4 * globalmean + b,
/// where the means run over the non-empty entries of the tensor.
struct EquivariantLayerParams {
  Eigen::MatrixXd W1, W2, W3, W4;  // d_out x d_in
  Eigen::VectorXd b;               // d_out

  int in_width() const { return static_cast<int>(W1.cols()); }
  int out_width() const { return static_cast<int>(W1.rows()); }
};

struct DenseLayerParams {
  Eigen::MatrixXd W;
  Eigen::VectorXd b;
};

/// Elementwise multilayer map applied identically to each pooled row.
struct HeadParams {
  std::vector<DenseLayerParams> layers;
};

struct ModelWeights {
  std::vector<EquivariantLayerParams> encoder;
  HeadParams cam_head;
  HeadParams pt_head;
};

struct ModelParams : ModelWeights {
  CameraMode mode = CameraMode::Calibrated;
  // Optional per-channel division by the feature standard deviation after the
  // mean subtraction that follows every encoder layer.
  bool std_normalize_features = false;

  int encoder_width() const {
    return encoder.empty() ? 0 : encoder.back().out_width();
  }
};

/// Gradients mirror the parameter arrays one-to-one.
using ParamGradients = ModelWeights;

struct ModelDims {
  int encoder_width = 256;
  int encoder_layers = 3;
  int head_hidden = 0;  // 0 means encoder_width
  int head_layers = 2;
};

/// Per-observation feature vectors following the sparsity pattern of a
/// MeasurementTensor; column k of `values` belongs to observation k.
struct SparseFeatureMap {
  const MeasurementTensor* pattern = nullptr;
  Eigen::MatrixXd values;  // d x p
};

/// Weights i.i.d. uniform on [-sqrt(6/fan_in), +sqrt(6/fan_in)], biases zero.
/// Deterministic for a fixed seed.
ModelParams init_params(CameraMode mode, const ModelDims& dims, uint64_t seed);

SparseFeatureMap equivariant_layer_forward(const EquivariantLayerParams& params,
                                           const SparseFeatureMap& f);

// --- parameter array traversal (canonical order, shared by the optimizer,
// --- checkpoints and the finite-difference harness) ---

struct ArrayRef {
  double* data;
  long size;
};

template <class Weights>
std::vector<ArrayRef> collect_arrays(Weights& w) {
  std::vector<ArrayRef> out;
  for (auto& L : w.encoder) {
    out.push_back({L.W1.data(), L.W1.size()});
    out.push_back({L.W2.data(), L.W2.size()});
    out.push_back({L.W3.data(), L.W3.size()});
    out.push_back({L.W4.data(), L.W4.size()});
    out.push_back({L.b.data(), L.b.size()});
  }
  for (auto* head : {&w.cam_head, &w.pt_head})
    for (auto& l : head->layers) {
      out.push_back({l.W.data(), l.W.size()});
      out.push_back({l.b.data(), l.b.size()});
    }
  return out;
}

long param_count(const ModelWeights& w);
ParamGradients zeros_like(const ModelWeights& w);

// --- forward pass with tape recording ---

struct TapeEncoderLayer {
  Eigen::MatrixXd input;        // d_in x p
  Eigen::MatrixXd col_mean;     // d_in x n
  Eigen::MatrixXd row_mean;     // d_in x m
  Eigen::VectorXd global_mean;  // d_in
  Eigen::MatrixXd normalized;   // d_out x p, after mean subtraction (pre-ReLU)
  Eigen::VectorXd feat_std;     // d_out, recorded when std normalization is on
  Eigen::MatrixXd affine_out;   // d_out x p, recorded when std normalization is on
};

struct TapeDenseLayer {
  Eigen::MatrixXd input;    // d_in x cols
  Eigen::MatrixXd pre_act;  // d_out x cols
};

struct TapeCamera {
  // calibrated assembly
  Eigen::Vector4d q_raw = Eigen::Vector4d::Zero();
  double q_norm = 0.0;
  Eigen::Vector4d q_hat = Eigen::Vector4d::Zero();
  // projective assembly
  Eigen::Matrix<double, 3, 4> P_raw = Eigen::Matrix<double, 3, 4>::Zero();
  double row3_norm = 0.0;
  double sign = 1.0;
  // the exact matrix the loss projects with
  Eigen::Matrix<double, 3, 4> P = Eigen::Matrix<double, 3, 4>::Zero();
};

struct TapeObservation {
  Eigen::Vector3d u = Eigen::Vector3d::Zero();  // P * (X, 1)
  bool hinge = false;
  double residual = 0.0;                        // l2 norm, reprojection branch
  Eigen::Vector2d pred = Eigen::Vector2d::Zero();
};

/// Recorded forward intermediates of one model evaluation, sufficient for the
/// exact reverse pass. Owned buffers are reused across epochs.
struct GradientTape {
  const MeasurementTensor* tensor = nullptr;
  CameraMode mode = CameraMode::Calibrated;
  bool std_normalize_features = false;

  std::vector<TapeEncoderLayer> encoder;
  Eigen::MatrixXd cam_pool;  // d x m
  Eigen::MatrixXd pt_pool;   // d x n
  std::vector<TapeDenseLayer> cam_head;
  std::vector<TapeDenseLayer> pt_head;
  Eigen::MatrixXd cam_out;   // 7|12 x m
  Eigen::MatrixXd pt_out;    // 3 x n
  std::vector<TapeCamera> cam_records;

  CameraSet cameras;
  PointCloud points;

  // loss stage, appended by attach_loss
  bool has_loss = false;
  double depth_threshold = 0.0;
  std::vector<TapeObservation> observations;

  // smoothness bookkeeping for the finite-difference harness
  double min_depth_margin = 0.0;      // min |depth - h| over measurements
  double min_relu_margin = 0.0;       // min |pre-activation| over ReLU inputs
  double max_abs_intermediate = 0.0;  // cancellation-noise scale of the pass
};

/// Runs the encoder, pooling and both heads, assembling cameras and points
/// and recording every intermediate on the tape.
void model_forward(const ModelParams& params, const MeasurementTensor& t, GradientTape& tape);

struct ModelOutput {
  CameraSet cameras;
  PointCloud points;
  GradientTape tape;
};
ModelOutput model_forward(const ModelParams& params, const MeasurementTensor& t);

}  // namespace esfm
