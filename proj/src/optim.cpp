#include "esfm/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "esfm/loss.hpp"

namespace esfm {

namespace {

constexpr double kNormEps = 1e-8;

struct EpochStep {
  GradientTape tape;

  double forward_loss(const ModelParams& params, const MeasurementTensor& t, double h) {
    model_forward(params, t, tape);
    const LossBreakdown loss = attach_loss(tape, h);
    if (!std::isfinite(loss.total)) throw Error(ErrorCode::NonFiniteLoss, "loss diverged");
    return loss.total;
  }

  void update(ModelParams& params, const TrainConfig& cfg, AdamState& adam) {
    const ParamGradients grads = backward(tape, params, cfg.normalize_projection_grads);
    adam_step(adam, params, grads, cfg.normalize_global_grad);
  }

  double run(ModelParams& params, const MeasurementTensor& t, const TrainConfig& cfg,
             AdamState& adam) {
    const double loss = forward_loss(params, t, cfg.depth_threshold);
    update(params, cfg, adam);
    return loss;
  }
};

SceneResult finalize(const ModelParams& best, const MeasurementTensor& t,
                     std::vector<double> history) {
  SceneResult result;
  result.params = best;
  const ModelOutput out = model_forward(best, t);
  result.cameras = out.cameras;
  result.points = triangulate_tracks(out.cameras, t, out.points);
  result.loss_history = std::move(history);
  return result;
}

/// Core epoch loop shared by single-scene optimization and fine-tuning.
SceneResult optimize_from(ModelParams params, const MeasurementTensor& t, int epochs,
                          const TrainConfig& cfg) {
  AdamState adam = make_adam_state(params, cfg.learning_rate);
  EpochStep step;

  ModelParams best = params;
  double best_loss = std::numeric_limits<double>::infinity();
  std::vector<double> history;
  history.reserve(epochs);

  for (int e = 0; e < epochs; ++e) {
    const double loss = step.forward_loss(params, t, cfg.depth_threshold);
    history.push_back(loss);
    // the snapshot captures the parameters this loss was measured at
    if (loss < best_loss) {
      best_loss = loss;
      best = params;
    }
    step.update(params, cfg, adam);
  }
  return finalize(best, t, std::move(history));
}

}  // namespace

AdamState make_adam_state(const ModelParams& params, double learning_rate) {
  AdamState s;
  s.first_moment = zeros_like(params);
  s.second_moment = zeros_like(params);
  s.learning_rate = learning_rate;
  return s;
}

void adam_step(AdamState& state, ModelParams& params, const ParamGradients& grads,
               bool global_normalize) {
  std::vector<ArrayRef> p = collect_arrays(static_cast<ModelWeights&>(params));
  std::vector<ArrayRef> g = collect_arrays(const_cast<ParamGradients&>(grads));
  std::vector<ArrayRef> m = collect_arrays(state.first_moment);
  std::vector<ArrayRef> v = collect_arrays(state.second_moment);
  if (p.size() != g.size() || p.size() != m.size())
    throw Error(ErrorCode::ShapeMismatch, "gradient layout does not match the parameters");
  for (size_t a = 0; a < p.size(); ++a)
    if (p[a].size != g[a].size)
      throw Error(ErrorCode::ShapeMismatch, "gradient array size mismatch");

  double scale = 1.0;
  if (global_normalize) {
    double sq = 0.0;
    for (const ArrayRef& a : g)
      sq += Eigen::Map<const Eigen::VectorXd>(a.data, a.size).squaredNorm();
    scale = 1.0 / (std::sqrt(sq) + kNormEps);
  }

  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, state.step);
  const double bc2 = 1.0 - std::pow(state.beta2, state.step);
  const double lr = state.learning_rate;

  for (size_t a = 0; a < p.size(); ++a) {
    Eigen::Map<Eigen::ArrayXd> pa(p[a].data, p[a].size);
    Eigen::Map<const Eigen::ArrayXd> ga(g[a].data, g[a].size);
    Eigen::Map<Eigen::ArrayXd> ma(m[a].data, m[a].size);
    Eigen::Map<Eigen::ArrayXd> va(v[a].data, v[a].size);
    ma = state.beta1 * ma + (1.0 - state.beta1) * (scale * ga);
    va = state.beta2 * va + (1.0 - state.beta2) * (scale * ga).square();
    pa -= lr * (ma / bc1) / ((va / bc2).sqrt() + state.epsilon);
  }
}

PointCloud triangulate_tracks(const CameraSet& cams, const MeasurementTensor& t,
                              const PointCloud& fallback) {
  PointCloud out;
  out.points.resize(3, t.tracks());
  std::vector<Eigen::Matrix<double, 3, 4>> P(t.cameras());
  for (int i = 0; i < t.cameras(); ++i) P[i] = cams.matrix(i);

  std::vector<Eigen::Matrix<double, 3, 4>> track_cams;
  std::vector<Eigen::Vector2d> track_pts;
  for (int j = 0; j < t.tracks(); ++j) {
    track_cams.clear();
    track_pts.clear();
    for (int k : t.track_obs(j)) {
      track_cams.push_back(P[t.camera_of(k)]);
      track_pts.push_back(t.coords().col(k));
    }
    try {
      out.points.col(j) = triangulate_dlt(track_cams, track_pts);
    } catch (const Error&) {
      out.points.col(j) = fallback.points.col(j);
    }
  }
  return out;
}

SceneResult optimize_single_scene(const MeasurementTensor& t, const TrainConfig& cfg,
                                  uint64_t seed) {
  const int probes = cfg.init_probes;
  const long probe_budget = static_cast<long>(probes) * cfg.probe_epochs;
  if (probes <= 1 || probe_budget > cfg.epochs) {
    ModelParams params = init_params(cfg.mode, cfg.dims, seed);
    params.std_normalize_features = cfg.std_normalize_features;
    return optimize_from(std::move(params), t, cfg.epochs, cfg);
  }

  // Short runs from distinct inits; the first probe uses the caller's seed.
  struct Probe {
    ModelParams params;
    AdamState adam;
    ModelParams best;
    double best_loss = std::numeric_limits<double>::infinity();
  };

  EpochStep step;
  std::vector<double> history;
  history.reserve(cfg.epochs);

  Probe chosen;
  for (int k = 0; k < probes; ++k) {
    Probe probe;
    probe.params = init_params(cfg.mode, cfg.dims, seed + static_cast<uint64_t>(k));
    probe.params.std_normalize_features = cfg.std_normalize_features;
    probe.adam = make_adam_state(probe.params, cfg.learning_rate);
    for (int e = 0; e < cfg.probe_epochs; ++e) {
      const double loss = step.forward_loss(probe.params, t, cfg.depth_threshold);
      history.push_back(loss);
      if (loss < probe.best_loss) {
        probe.best_loss = loss;
        probe.best = probe.params;
      }
      step.update(probe.params, cfg, probe.adam);
    }
    if (probe.best_loss < chosen.best_loss) chosen = std::move(probe);
  }

  // continue the most promising trajectory for the remaining budget
  ModelParams params = std::move(chosen.params);
  AdamState adam = std::move(chosen.adam);
  ModelParams best = std::move(chosen.best);
  double best_loss = chosen.best_loss;
  for (long e = probe_budget; e < cfg.epochs; ++e) {
    const double loss = step.forward_loss(params, t, cfg.depth_threshold);
    history.push_back(loss);
    if (loss < best_loss) {
      best_loss = loss;
      best = params;
    }
    step.update(params, cfg, adam);
  }
  return finalize(best, t, std::move(history));
}

SceneResult fine_tune(const ModelParams& params, const MeasurementTensor& t, int epochs,
                      const TrainConfig& cfg) {
  if (params.mode != cfg.mode)
    throw Error(ErrorCode::ModeMismatch, "model and scene camera modes differ");
  return optimize_from(params, t, epochs, cfg);
}

ModelParams train_multi_scene(const std::vector<MeasurementTensor>& train,
                              const std::vector<MeasurementTensor>& val,
                              const TrainConfig& cfg) {
  if (train.empty() || val.empty())
    throw Error(ErrorCode::InvalidArgument, "need at least one training and one validation scene");

  ModelParams params = init_params(cfg.mode, cfg.dims, cfg.seed);
  params.std_normalize_features = cfg.std_normalize_features;
  AdamState adam = make_adam_state(params, cfg.learning_rate);
  EpochStep step;

  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  auto validate = [&](const ModelParams& candidate) {
    double sum = 0.0;
    for (const MeasurementTensor& scene : val) {
      const ModelOutput out = model_forward(candidate, scene);
      sum += mean_reprojection(out.cameras, out.points, scene);
    }
    return sum / val.size();
  };

  // the untrained model is a candidate too, so the returned checkpoint can
  // never score worse than doing nothing
  ModelParams best = params;
  double best_score = validate(params);
  int rounds_since_best = 0;

  std::vector<int> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int e = 1; e <= cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (int s : order) {
      const MeasurementTensor& scene = train[s];
      const int m = scene.cameras();
      const int hi = std::min(cfg.subset_max, m);
      const int lo = std::min(cfg.subset_min, m);
      std::uniform_int_distribution<int> size_dist(lo, hi);

      for (int attempt = 0;; ++attempt) {
        const int size = size_dist(rng);
        std::vector<int> all(m);
        std::iota(all.begin(), all.end(), 0);
        std::shuffle(all.begin(), all.end(), rng);
        std::vector<int> subset(all.begin(), all.begin() + size);
        std::sort(subset.begin(), subset.end());
        try {
          const RestrictedTensor sub = restrict_to_cameras(scene, subset);
          step.run(params, sub.tensor, cfg, adam);
          break;
        } catch (const Error& err) {
          if (err.code() != ErrorCode::EmptySubset || attempt >= 100) throw;
        }
      }
    }

    if (e % cfg.validation_period == 0 || e == cfg.epochs) {
      const double score = validate(params);
      if (score < best_score) {
        best_score = score;
        best = params;
        rounds_since_best = 0;
      } else if (cfg.early_stop_patience > 0 && ++rounds_since_best >= cfg.early_stop_patience) {
        break;
      }
    }
  }
  return best;
}

std::vector<int> sequential_order(const MeasurementTensor& t) {
  const int m = t.cameras();
  if (m < 2) throw Error(ErrorCode::InvalidArgument, "need at least 2 cameras");

  // pairwise shared-track counts
  Eigen::MatrixXi shared = Eigen::MatrixXi::Zero(m, m);
  for (int j = 0; j < t.tracks(); ++j) {
    const auto obs = t.track_obs(j);
    for (size_t a = 0; a < obs.size(); ++a)
      for (size_t b = a + 1; b < obs.size(); ++b) {
        const int ca = t.camera_of(obs[a]), cb = t.camera_of(obs[b]);
        ++shared(ca, cb);
        ++shared(cb, ca);
      }
  }

  int best_a = 0, best_b = 1, best_count = -1;
  for (int a = 0; a < m; ++a)
    for (int b = a + 1; b < m; ++b)
      if (shared(a, b) > best_count) {
        best_count = shared(a, b);
        best_a = a;
        best_b = b;
      }
  if (best_count <= 0)
    throw Error(ErrorCode::DisconnectedScene, "no image pair shares a track");

  std::vector<int> order = {best_a, best_b};
  std::vector<bool> selected(m, false);
  selected[best_a] = selected[best_b] = true;

  // tracks with >= 1 view in the selected set
  std::vector<bool> track_touched(t.tracks(), false);
  auto touch = [&](int cam) {
    for (int k = t.row_begin(cam); k < t.row_end(cam); ++k)
      track_touched[t.track_of(k)] = true;
  };
  touch(best_a);
  touch(best_b);

  while (static_cast<int>(order.size()) < m) {
    int best_cam = -1, best_shared = -1;
    for (int c = 0; c < m; ++c) {
      if (selected[c]) continue;
      int count = 0;
      for (int k = t.row_begin(c); k < t.row_end(c); ++k)
        if (track_touched[t.track_of(k)]) ++count;
      if (count > best_shared) {  // ties keep the lowest index
        best_shared = count;
        best_cam = c;
      }
    }
    if (best_shared <= 0)
      throw Error(ErrorCode::DisconnectedScene,
                  "image " + std::to_string(best_cam) + " shares no track with the selected set",
                  best_cam);
    order.push_back(best_cam);
    selected[best_cam] = true;
    touch(best_cam);
  }
  return order;
}

SceneResult sequential_schedule(const MeasurementTensor& t, const TrainConfig& cfg,
                                uint64_t seed) {
  const std::vector<int> order = sequential_order(t);
  const int m = t.cameras();

  ModelParams params = init_params(cfg.mode, cfg.dims, seed);
  params.std_normalize_features = cfg.std_normalize_features;
  AdamState adam = make_adam_state(params, cfg.learning_rate);
  EpochStep step;
  std::vector<double> history;
  history.reserve(cfg.epochs);

  // growing phase: one block per added image, starting from the best pair
  int spent = 0;
  for (int count = 2; count <= m && spent < cfg.epochs; ++count) {
    std::vector<int> subset(order.begin(), order.begin() + count);
    std::sort(subset.begin(), subset.end());
    const RestrictedTensor sub = restrict_to_cameras(t, subset);
    const int block = std::min(cfg.sequential_block_epochs, cfg.epochs - spent);
    for (int e = 0; e < block; ++e)
      history.push_back(step.run(params, sub.tensor, cfg, adam));
    spent += block;
  }

  // full optimization for the remaining budget, with best tracking on the
  // full tensor only (subset losses are not comparable)
  ModelParams best = params;
  {
    GradientTape probe;
    model_forward(params, t, probe);
    double best_loss = attach_loss(probe, cfg.depth_threshold).total;
    for (int e = spent; e < cfg.epochs; ++e) {
      const double loss = step.forward_loss(params, t, cfg.depth_threshold);
      history.push_back(loss);
      if (loss < best_loss) {
        best_loss = loss;
        best = params;
      }
      step.update(params, cfg, adam);
    }
  }
  return finalize(best, t, std::move(history));
}

}  // namespace esfm
