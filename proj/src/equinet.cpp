#include "esfm/equinet.hpp"

#include <Eigen/LU>
#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace esfm {

namespace {

constexpr double kQuatEps = 1e-12;
constexpr double kStdEps = 1e-8;

void init_matrix(Eigen::MatrixXd& A, int rows, int cols, std::mt19937_64& rng) {
  A.resize(rows, cols);
  const double bound = std::sqrt(6.0 / cols);
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (long i = 0; i < A.size(); ++i) A.data()[i] = dist(rng);
}

HeadParams init_head(int in, int hidden, int out, int layers, std::mt19937_64& rng) {
  HeadParams head;
  head.layers.resize(layers);
  for (int l = 0; l < layers; ++l) {
    const int din = l == 0 ? in : hidden;
    const int dout = l == layers - 1 ? out : hidden;
    init_matrix(head.layers[l].W, dout, din, rng);
    head.layers[l].b = Eigen::VectorXd::Zero(dout);
  }
  return head;
}

/// Column/row/global means of F over the tensor's sparsity pattern.
void masked_means(const MeasurementTensor& t, const Eigen::MatrixXd& F,
                  Eigen::MatrixXd& col_mean, Eigen::MatrixXd& row_mean,
                  Eigen::VectorXd& global_mean) {
  const int p = t.observations();
  col_mean.setZero(F.rows(), t.tracks());
  row_mean.setZero(F.rows(), t.cameras());
  for (int k = 0; k < p; ++k) {
    col_mean.col(t.track_of(k)) += F.col(k);
    row_mean.col(t.camera_of(k)) += F.col(k);
  }
  global_mean = F.rowwise().sum() / p;
  for (int j = 0; j < t.tracks(); ++j) {
    const int c = t.track_count(j);
    if (c > 0) col_mean.col(j) /= c;
  }
  for (int i = 0; i < t.cameras(); ++i) {
    const int c = t.camera_count(i);
    if (c > 0) row_mean.col(i) /= c;
  }
}

/// out = W1 F + W2 colmean + W3 rowmean + W4 globalmean + b, scattered back
/// onto the sparsity pattern.
void equivariant_affine(const EquivariantLayerParams& L, const MeasurementTensor& t,
                        const Eigen::MatrixXd& F, const Eigen::MatrixXd& col_mean,
                        const Eigen::MatrixXd& row_mean, const Eigen::VectorXd& global_mean,
                        Eigen::MatrixXd& out) {
  const int p = t.observations();
  out.resize(L.out_width(), p);
  out.noalias() = L.W1 * F;

  Eigen::MatrixXd col_term;
  col_term.noalias() = L.W2 * col_mean;  // d_out x n
  Eigen::MatrixXd row_term;
  row_term.noalias() = L.W3 * row_mean;  // d_out x m
  Eigen::VectorXd global_term = L.W4 * global_mean + L.b;
  for (int k = 0; k < p; ++k)
    out.col(k) += col_term.col(t.track_of(k)) + row_term.col(t.camera_of(k)) + global_term;
}

void dense_head_forward(const HeadParams& head, const Eigen::MatrixXd& input,
                        std::vector<TapeDenseLayer>& tape, Eigen::MatrixXd& out) {
  const int layers = static_cast<int>(head.layers.size());
  tape.resize(layers);
  const Eigen::MatrixXd* cur = &input;
  for (int l = 0; l < layers; ++l) {
    tape[l].input = *cur;
    tape[l].pre_act.noalias() = head.layers[l].W * (*cur);
    tape[l].pre_act.colwise() += head.layers[l].b;
    if (l + 1 < layers) {
      tape[l + 1].input = tape[l].pre_act.cwiseMax(0.0);
      cur = &tape[l + 1].input;
    }
  }
  out = tape[layers - 1].pre_act;
}

Eigen::Matrix3d rotation_from_unit_quat(const Eigen::Vector4d& q) {
  const double w = q(0), x = q(1), y = q(2), z = q(3);
  Eigen::Matrix3d R;
  R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
       2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
       2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return R;
}

}  // namespace

ModelParams init_params(CameraMode mode, const ModelDims& dims, uint64_t seed) {
  if (dims.encoder_width < 1 || dims.encoder_layers < 1 || dims.head_layers < 1 ||
      dims.head_hidden < 0)
    throw Error(ErrorCode::InvalidWidths, "model widths and layer counts must be positive");

  const int w = dims.encoder_width;
  const int hidden = dims.head_hidden > 0 ? dims.head_hidden : w;
  std::mt19937_64 rng(seed);

  ModelParams params;
  params.mode = mode;
  params.encoder.resize(dims.encoder_layers);
  for (int l = 0; l < dims.encoder_layers; ++l) {
    const int din = l == 0 ? 2 : w;
    auto& L = params.encoder[l];
    init_matrix(L.W1, w, din, rng);
    init_matrix(L.W2, w, din, rng);
    init_matrix(L.W3, w, din, rng);
    init_matrix(L.W4, w, din, rng);
    L.b = Eigen::VectorXd::Zero(w);
  }
  const int cam_out = mode == CameraMode::Calibrated ? 7 : 12;
  params.cam_head = init_head(w, hidden, cam_out, dims.head_layers, rng);
  params.pt_head = init_head(w, hidden, 3, dims.head_layers, rng);
  return params;
}

long param_count(const ModelWeights& w) {
  long total = 0;
  for (const ArrayRef& a : collect_arrays(const_cast<ModelWeights&>(w))) total += a.size;
  return total;
}

ParamGradients zeros_like(const ModelWeights& w) {
  ParamGradients g;
  g.encoder.resize(w.encoder.size());
  for (size_t l = 0; l < w.encoder.size(); ++l) {
    g.encoder[l].W1 = Eigen::MatrixXd::Zero(w.encoder[l].W1.rows(), w.encoder[l].W1.cols());
    g.encoder[l].W2 = Eigen::MatrixXd::Zero(w.encoder[l].W2.rows(), w.encoder[l].W2.cols());
    g.encoder[l].W3 = Eigen::MatrixXd::Zero(w.encoder[l].W3.rows(), w.encoder[l].W3.cols());
    g.encoder[l].W4 = Eigen::MatrixXd::Zero(w.encoder[l].W4.rows(), w.encoder[l].W4.cols());
    g.encoder[l].b = Eigen::VectorXd::Zero(w.encoder[l].b.size());
  }
  auto zero_head = [](const HeadParams& h) {
    HeadParams out;
    out.layers.resize(h.layers.size());
    for (size_t l = 0; l < h.layers.size(); ++l) {
      out.layers[l].W = Eigen::MatrixXd::Zero(h.layers[l].W.rows(), h.layers[l].W.cols());
      out.layers[l].b = Eigen::VectorXd::Zero(h.layers[l].b.size());
    }
    return out;
  };
  g.cam_head = zero_head(w.cam_head);
  g.pt_head = zero_head(w.pt_head);
  return g;
}

SparseFeatureMap equivariant_layer_forward(const EquivariantLayerParams& params,
                                           const SparseFeatureMap& f) {
  if (f.pattern == nullptr)
    throw Error(ErrorCode::InvalidArgument, "feature map has no sparsity pattern");
  if (params.in_width() != f.values.rows())
    throw Error(ErrorCode::WidthMismatch,
                "layer expects width " + std::to_string(params.in_width()) + ", got " +
                    std::to_string(f.values.rows()));

  Eigen::MatrixXd col_mean, row_mean;
  Eigen::VectorXd global_mean;
  masked_means(*f.pattern, f.values, col_mean, row_mean, global_mean);

  SparseFeatureMap out;
  out.pattern = f.pattern;
  equivariant_affine(params, *f.pattern, f.values, col_mean, row_mean, global_mean, out.values);
  return out;
}

void model_forward(const ModelParams& params, const MeasurementTensor& t, GradientTape& tape) {
  if (params.encoder.empty() || params.encoder.front().in_width() != 2)
    throw Error(ErrorCode::WidthMismatch, "encoder must start at width 2");

  const int m = t.cameras(), n = t.tracks(), p = t.observations();
  const int layers = static_cast<int>(params.encoder.size());

  tape.tensor = &t;
  tape.mode = params.mode;
  tape.std_normalize_features = params.std_normalize_features;
  tape.has_loss = false;
  tape.encoder.resize(layers);
  tape.min_relu_margin = std::numeric_limits<double>::infinity();
  tape.max_abs_intermediate = 1.0;

  // encoder: affine -> subtract per-channel mean (-> divide by std) -> ReLU,
  // with no ReLU after the final layer
  for (int l = 0; l < layers; ++l) {
    TapeEncoderLayer& rec = tape.encoder[l];
    if (l == 0) {
      rec.input = t.coords();
    } else {
      const Eigen::MatrixXd& prev = tape.encoder[l - 1].normalized;
      tape.min_relu_margin = std::min(tape.min_relu_margin, prev.cwiseAbs().minCoeff());
      rec.input = prev.cwiseMax(0.0);
    }
    masked_means(t, rec.input, rec.col_mean, rec.row_mean, rec.global_mean);
    equivariant_affine(params.encoder[l], t, rec.input, rec.col_mean, rec.row_mean,
                       rec.global_mean, rec.normalized);
    const Eigen::VectorXd mu = rec.normalized.rowwise().mean();
    rec.normalized.colwise() -= mu;
    if (params.std_normalize_features) {
      rec.affine_out = rec.normalized;  // centered pre-division values
      rec.feat_std = (rec.normalized.array().square().rowwise().mean()).sqrt();
      rec.normalized.array().colwise() /= (rec.feat_std.array() + kStdEps);
    }
    tape.max_abs_intermediate =
        std::max(tape.max_abs_intermediate, rec.normalized.cwiseAbs().maxCoeff());
  }

  const Eigen::MatrixXd& features = tape.encoder.back().normalized;
  const int d = static_cast<int>(features.rows());

  // masked row/column mean pooling
  tape.cam_pool.setZero(d, m);
  tape.pt_pool.setZero(d, n);
  for (int k = 0; k < p; ++k) {
    tape.cam_pool.col(t.camera_of(k)) += features.col(k);
    tape.pt_pool.col(t.track_of(k)) += features.col(k);
  }
  for (int i = 0; i < m; ++i) tape.cam_pool.col(i) /= t.camera_count(i);
  for (int j = 0; j < n; ++j) tape.pt_pool.col(j) /= t.track_count(j);

  dense_head_forward(params.cam_head, tape.cam_pool, tape.cam_head, tape.cam_out);
  dense_head_forward(params.pt_head, tape.pt_pool, tape.pt_head, tape.pt_out);
  for (const auto* head : {&tape.cam_head, &tape.pt_head})
    for (size_t l = 0; l < head->size(); ++l) {
      if (l + 1 < head->size())
        tape.min_relu_margin =
            std::min(tape.min_relu_margin, (*head)[l].pre_act.cwiseAbs().minCoeff());
      tape.max_abs_intermediate =
          std::max(tape.max_abs_intermediate, (*head)[l].pre_act.cwiseAbs().maxCoeff());
    }

  const int cam_rows = params.mode == CameraMode::Calibrated ? 7 : 12;
  if (tape.cam_out.rows() != cam_rows || tape.pt_out.rows() != 3)
    throw Error(ErrorCode::WidthMismatch, "head output widths do not match the camera mode");

  tape.cam_records.assign(m, TapeCamera{});
  tape.cameras.mode = params.mode;
  tape.cameras.poses.clear();
  tape.cameras.cameras.clear();
  if (params.mode == CameraMode::Calibrated) {
    tape.cameras.poses.resize(m);
    for (int i = 0; i < m; ++i) {
      TapeCamera& rec = tape.cam_records[i];
      rec.q_raw = tape.cam_out.col(i).head<4>();
      rec.q_norm = rec.q_raw.norm();
      rec.q_hat = rec.q_raw / (rec.q_norm + kQuatEps);
      rec.P.leftCols<3>() = rotation_from_unit_quat(rec.q_hat);
      rec.P.col(3) = tape.cam_out.col(i).tail<3>();
      tape.cameras.poses[i].rotation = {rec.q_hat(0), rec.q_hat(1), rec.q_hat(2), rec.q_hat(3)};
      tape.cameras.poses[i].translation = rec.P.col(3);
    }
  } else {
    tape.cameras.cameras.resize(m);
    for (int i = 0; i < m; ++i) {
      TapeCamera& rec = tape.cam_records[i];
      // 12-vector filled row-major into the 3x4 matrix
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c) rec.P_raw(r, c) = tape.cam_out(4 * r + c, i);
      const double det = rec.P_raw.leftCols<3>().determinant();
      rec.sign = det >= 0.0 ? 1.0 : -1.0;
      rec.row3_norm = rec.P_raw.block<1, 3>(2, 0).norm();
      // exact scaling whenever the third row is usable; floor guards the
      // measure-zero degenerate output
      rec.P = (rec.sign / std::max(rec.row3_norm, kQuatEps)) * rec.P_raw;
      tape.cameras.cameras[i].P = rec.P;
    }
  }

  tape.points.points = tape.pt_out;
}

ModelOutput model_forward(const ModelParams& params, const MeasurementTensor& t) {
  ModelOutput out;
  model_forward(params, t, out.tape);
  out.cameras = out.tape.cameras;
  out.points = out.tape.points;
  return out;
}

}  // namespace esfm
