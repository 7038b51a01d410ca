#pragma once

#include <cstdint>

#include "esfm/equinet.hpp"
#include "esfm/loss.hpp"

namespace esfm {

/// Evaluates the objective on a recorded forward pass and appends the
/// residual records the reverse pass needs. Matches compute_loss on the same
/// cameras/points exactly (same reduction order).
LossBreakdown attach_loss(GradientTape& tape, double h, bool keep_per_measurement = false);

/// Exact reverse-mode gradient of the recorded loss with respect to every
/// model parameter. With `normalize_projection_grads` the adjoint vector
/// arriving at each projection node u_ij = P_i (X_j, 1) is rescaled to unit
/// norm (g / (|g| + 1e-8)) before it propagates into the camera and point.
ParamGradients backward(const GradientTape& tape, const ModelParams& params,
                        bool normalize_projection_grads);

struct FiniteDiffOptions {
  double epsilon = 1e-6;
  int sample_size = 200;
  uint64_t seed = 0x5eedf00d;
};

/// Central-difference check of backward() (hook off) over a random parameter
/// subsample. Returns the max relative error with denominator
/// max(|analytic|, |numeric|, 1e-12). Throws NonSmoothPoint when any
/// measurement sits within 10*epsilon of the depth threshold or any ReLU
/// input within 10*epsilon of its kink; callers re-sample the scene.
double finite_diff_check(const ModelParams& params, const MeasurementTensor& t,
                         double h, const FiniteDiffOptions& opts = {});

}  // namespace esfm
