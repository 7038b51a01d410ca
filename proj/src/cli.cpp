#include "esfm/cli.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "esfm/autograd.hpp"
#include "esfm/ba.hpp"
#include "esfm/loss.hpp"
#include "esfm/optim.hpp"
#include "esfm/scene_io.hpp"
#include "esfm/synth.hpp"

namespace esfm {

namespace {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

CameraMode parse_mode(const std::string& name) {
  if (name == "calibrated") return CameraMode::Calibrated;
  if (name == "projective") return CameraMode::Projective;
  throw CLI::ValidationError("--mode", "must be 'calibrated' or 'projective'");
}

std::string mode_name(CameraMode mode) {
  return mode == CameraMode::Calibrated ? "calibrated" : "projective";
}

struct NormalizedScene {
  Scene raw;
  CameraMode mode = CameraMode::Projective;
  MeasurementTensor tensor;  // normalized coordinates
  std::vector<NormalizationTransform> transforms;
};

NormalizedScene load_and_normalize(const std::string& path, const std::string& mode_flag) {
  NormalizedScene out;
  out.raw = read_tracks(path);
  out.mode = mode_flag.empty() ? out.raw.mode : parse_mode(mode_flag);
  if (out.mode == CameraMode::Calibrated) {
    if (!out.raw.intrinsics)
      throw Error(ErrorCode::ModeMismatch,
                  "calibrated reconstruction needs a CALIBRATED scene file with K lines");
    std::tie(out.tensor, out.transforms) =
        intrinsics_normalize(out.raw.tensor, *out.raw.intrinsics);
  } else {
    std::tie(out.tensor, out.transforms) = hartley_normalize(out.raw.tensor);
  }
  return out;
}

json metrics_to_json(const Metrics& m) {
  json j;
  j["reprojection_px"] = m.mean_reprojection_px;
  j["rotation_error_deg"] = m.rotation_error_deg ? json(*m.rotation_error_deg) : json();
  j["location_error"] = m.location_error ? json(*m.location_error) : json();
  return j;
}

json cameras_to_json(const CameraSet& cams) {
  json arr = json::array();
  for (int i = 0; i < cams.size(); ++i) {
    json row = json::array();
    if (cams.mode == CameraMode::Calibrated) {
      const CalibratedPose& pose = cams.poses[i];
      for (double v : {pose.rotation.w, pose.rotation.x, pose.rotation.y, pose.rotation.z,
                       pose.translation.x(), pose.translation.y(), pose.translation.z()})
        row.push_back(v);
    } else {
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c) row.push_back(cams.cameras[i].P(r, c));
    }
    arr.push_back(std::move(row));
  }
  return arr;
}

CameraSet cameras_from_json(const json& arr, CameraMode mode) {
  CameraSet cams;
  cams.mode = mode;
  for (const json& row : arr) {
    if (mode == CameraMode::Calibrated) {
      if (row.size() != 7) throw Error(ErrorCode::ParseError, "camera row needs 7 numbers");
      CalibratedPose pose;
      pose.rotation = Quaternion{row[0].get<double>(), row[1].get<double>(),
                                 row[2].get<double>(), row[3].get<double>()}
                          .normalized();
      pose.translation = {row[4].get<double>(), row[5].get<double>(), row[6].get<double>()};
      cams.poses.push_back(pose);
    } else {
      if (row.size() != 12) throw Error(ErrorCode::ParseError, "camera row needs 12 numbers");
      ProjectiveCamera cam;
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c) cam.P(r, c) = row[4 * r + c].get<double>();
      cams.cameras.push_back(cam);
    }
  }
  return cams;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IOError, "cannot open " + path);
  try {
    return json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::ParseError, std::string("invalid JSON in ") + path + ": " + e.what());
  }
}

void write_json_file(const json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IOError, "cannot write " + path);
  out << j.dump(2) << '\n';
  if (!out) throw Error(ErrorCode::IOError, "write failed for " + path);
}

void print_metrics_row(const std::string& label, const Metrics& before,
                       const Metrics* after) {
  std::printf("%-12s reproj_px(no BA) %10.4f", label.c_str(), before.mean_reprojection_px);
  if (after != nullptr) std::printf("   reproj_px(BA) %10.4f", after->mean_reprojection_px);
  const Metrics& src = after != nullptr ? *after : before;
  if (src.rotation_error_deg) std::printf("   R_error_deg %8.4f", *src.rotation_error_deg);
  if (src.location_error) std::printf("   t_error %10.6f", *src.location_error);
  std::printf("\n");
}

// ---------------------------------------------------------------------------

int run_synth(const std::string& config_path, const std::string& out_path) {
  const json cfg_json = read_json_file(config_path);
  SynthConfig cfg;
  cfg.m = cfg_json.value("m", cfg.m);
  cfg.n = cfg_json.value("n", cfg.n);
  cfg.camera_radius = cfg_json.value("camera_radius", cfg.camera_radius);
  cfg.lookat_jitter = cfg_json.value("lookat_jitter", cfg.lookat_jitter);
  cfg.point_radius = cfg_json.value("point_radius", cfg.point_radius);
  cfg.visibility = cfg_json.value("visibility", cfg.visibility);
  cfg.pixel_noise = cfg_json.value("pixel_noise", cfg.pixel_noise);
  cfg.image_size = cfg_json.value("image_size", cfg.image_size);
  cfg.seed = cfg_json.value("seed", cfg.seed);
  cfg.mode = parse_mode(cfg_json.value("mode", std::string("calibrated")));

  const SynthScene synth = generate_scene(cfg);
  Scene scene;
  scene.tensor = synth.tensor;
  scene.mode = synth.mode;
  if (synth.mode == CameraMode::Calibrated) scene.intrinsics = synth.intrinsics;
  scene.gt_cameras = synth.gt_cameras;
  write_tracks(scene, out_path);
  std::printf("wrote %s: m=%d n=%d p=%d mode=%s\n", out_path.c_str(), synth.tensor.cameras(),
              synth.tensor.tracks(), synth.tensor.observations(),
              mode_name(synth.mode).c_str());
  return 0;
}

struct ReconstructArgs {
  std::string scene_path, mode_flag, out_ply, out_report;
  int epochs = 20000;
  uint64_t seed = 0;
  bool sequential = false;
  bool no_ba = false;
  int width = 256;
  int layers = 3;
  double learning_rate = 1e-3;
  double depth_threshold = 1e-4;
  double huber_delta = 0.1;
  int ba_iterations = 100;
  int probes = 6;
  int probe_epochs = 500;
};

int run_reconstruct(const ReconstructArgs& args) {
  const NormalizedScene scene = load_and_normalize(args.scene_path, args.mode_flag);
  const CameraSet* gt =
      scene.raw.gt_cameras && scene.mode == CameraMode::Calibrated
          ? &*scene.raw.gt_cameras
          : nullptr;

  TrainConfig cfg;
  cfg.mode = scene.mode;
  cfg.epochs = args.epochs;
  cfg.learning_rate = args.learning_rate;
  cfg.depth_threshold = args.depth_threshold;
  cfg.dims.encoder_width = args.width;
  cfg.dims.encoder_layers = args.layers;
  cfg.init_probes = args.probes;
  cfg.probe_epochs = args.probe_epochs;
  cfg.seed = args.seed;

  const auto t_opt = Clock::now();
  const SceneResult result = args.sequential
                                 ? sequential_schedule(scene.tensor, cfg, args.seed)
                                 : optimize_single_scene(scene.tensor, cfg, args.seed);
  const double opt_seconds = seconds_since(t_opt);

  const auto t_eval = Clock::now();
  const Metrics before =
      evaluate_metrics(result.cameras, result.points, gt, scene.tensor, scene.transforms);

  std::optional<Metrics> after;
  BAResult ba;
  double ba_seconds = 0.0;
  if (!args.no_ba) {
    BAConfig ba_cfg;
    ba_cfg.huber_delta = args.huber_delta;
    ba_cfg.max_iterations = args.ba_iterations;
    const auto t_ba = Clock::now();
    ba = run_bundle_adjustment(result.cameras, result.points, scene.tensor, ba_cfg);
    ba_seconds = seconds_since(t_ba);
    after = evaluate_metrics(ba.cameras, ba.points, gt, scene.tensor, scene.transforms);
  }
  const double eval_seconds = seconds_since(t_eval) - ba_seconds;

  print_metrics_row(args.sequential ? "sequential" : "reconstruct", before,
                    after ? &*after : nullptr);

  const CameraSet& final_cams = after ? ba.cameras : result.cameras;
  const PointCloud& final_pts = after ? ba.points : result.points;
  if (!args.out_ply.empty()) write_ply(final_pts, final_cams, args.out_ply);

  if (!args.out_report.empty()) {
    json report;
    report["mode"] = mode_name(scene.mode);
    report["scene"] = {{"m", scene.tensor.cameras()},
                       {"n", scene.tensor.tracks()},
                       {"p", scene.tensor.observations()}};
    report["seed"] = args.seed;
    report["config"] = {{"epochs", args.epochs},
                        {"learning_rate", args.learning_rate},
                        {"depth_threshold", args.depth_threshold},
                        {"width", args.width},
                        {"layers", args.layers},
                        {"sequential", args.sequential},
                        {"ba", !args.no_ba},
                        {"huber_delta", args.huber_delta},
                        {"ba_iterations", args.ba_iterations},
                        {"probes", args.probes},
                        {"probe_epochs", args.probe_epochs}};
    json loss;
    loss["epochs"] = result.loss_history.size();
    if (!result.loss_history.empty()) {
      loss["first"] = result.loss_history.front();
      loss["last"] = result.loss_history.back();
      loss["best"] = *std::min_element(result.loss_history.begin(), result.loss_history.end());
    }
    report["loss"] = loss;
    report["metrics_before_ba"] = metrics_to_json(before);
    report["metrics_after_ba"] = after ? metrics_to_json(*after) : json();
    if (after) {
      report["ba"] = {{"accepted_steps", ba.cost_history.size() - 1},
                      {"initial_cost", ba.cost_history.front()},
                      {"final_cost", ba.cost_history.back()},
                      {"excluded_measurements", ba.excluded_measurements},
                      {"excluded_points", ba.excluded_points.size()}};
    } else {
      report["ba"] = json();
    }
    report["timings_sec"] = {{"optimize", opt_seconds}, {"ba", ba_seconds},
                             {"evaluate", eval_seconds}};
    report["cameras"] = cameras_to_json(final_cams);
    write_json_file(report, args.out_report);
  }
  return 0;
}

std::vector<std::string> tracks_in_dir(const std::string& dir) {
  std::vector<std::string> files;
  if (!std::filesystem::is_directory(dir))
    throw Error(ErrorCode::IOError, dir + " is not a directory");
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".tracks")
      files.push_back(entry.path().string());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error(ErrorCode::IOError, "no .tracks files in " + dir);
  return files;
}

int run_train(const std::string& train_dir, const std::string& val_dir,
              const std::string& config_path, const std::string& out_path) {
  const json cfg_json = read_json_file(config_path);
  TrainConfig cfg;
  cfg.mode = parse_mode(cfg_json.value("mode", std::string("calibrated")));
  cfg.epochs = cfg_json.value("epochs", 200);
  cfg.learning_rate = cfg_json.value("learning_rate", cfg.learning_rate);
  cfg.depth_threshold = cfg_json.value("depth_threshold", cfg.depth_threshold);
  cfg.subset_min = cfg_json.value("subset_min", cfg.subset_min);
  cfg.subset_max = cfg_json.value("subset_max", cfg.subset_max);
  cfg.validation_period = cfg_json.value("validation_period", cfg.validation_period);
  cfg.early_stop_patience = cfg_json.value("patience", cfg.early_stop_patience);
  cfg.dims.encoder_width = cfg_json.value("width", 512);
  cfg.dims.encoder_layers = cfg_json.value("layers", cfg.dims.encoder_layers);
  cfg.std_normalize_features = cfg_json.value("std_normalize", false);
  cfg.seed = cfg_json.value("seed", cfg.seed);

  std::vector<MeasurementTensor> train_scenes, val_scenes;
  for (const std::string& path : tracks_in_dir(train_dir))
    train_scenes.push_back(load_and_normalize(path, mode_name(cfg.mode)).tensor);
  for (const std::string& path : tracks_in_dir(val_dir))
    val_scenes.push_back(load_and_normalize(path, mode_name(cfg.mode)).tensor);

  std::printf("training on %zu scenes, validating on %zu, %d epochs\n", train_scenes.size(),
              val_scenes.size(), cfg.epochs);
  const ModelParams best = train_multi_scene(train_scenes, val_scenes, cfg);
  save_checkpoint(best, nullptr, cfg.seed, out_path);
  std::printf("saved checkpoint %s\n", out_path.c_str());
  return 0;
}

int run_finetune(const std::string& model_path, const ReconstructArgs& args) {
  const Checkpoint ckpt = load_checkpoint(model_path);
  const NormalizedScene scene = load_and_normalize(args.scene_path, args.mode_flag);
  if (ckpt.params.mode != scene.mode)
    throw Error(ErrorCode::ModeMismatch, "checkpoint mode differs from the scene mode");
  const CameraSet* gt =
      scene.raw.gt_cameras && scene.mode == CameraMode::Calibrated
          ? &*scene.raw.gt_cameras
          : nullptr;

  TrainConfig cfg;
  cfg.mode = scene.mode;
  cfg.learning_rate = args.learning_rate;
  cfg.depth_threshold = args.depth_threshold;

  const auto t_opt = Clock::now();
  const SceneResult result = fine_tune(ckpt.params, scene.tensor, args.epochs, cfg);
  const double opt_seconds = seconds_since(t_opt);

  const Metrics before =
      evaluate_metrics(result.cameras, result.points, gt, scene.tensor, scene.transforms);
  std::optional<Metrics> after;
  if (!args.no_ba) {
    BAConfig ba_cfg;
    ba_cfg.huber_delta = args.huber_delta;
    ba_cfg.max_iterations = args.ba_iterations;
    const BAResult ba = run_bundle_adjustment(result.cameras, result.points, scene.tensor, ba_cfg);
    after = evaluate_metrics(ba.cameras, ba.points, gt, scene.tensor, scene.transforms);
    if (!args.out_ply.empty()) write_ply(ba.points, ba.cameras, args.out_ply);
  } else if (!args.out_ply.empty()) {
    write_ply(result.points, result.cameras, args.out_ply);
  }
  print_metrics_row("finetune", before, after ? &*after : nullptr);
  std::printf("fine-tuned %d epochs in %.2f s\n", args.epochs, opt_seconds);
  return 0;
}

int run_eval(const std::string& scene_path, const std::string& cameras_from,
             const std::string& mode_flag) {
  const NormalizedScene scene = load_and_normalize(scene_path, mode_flag);
  const CameraSet* gt =
      scene.raw.gt_cameras && scene.mode == CameraMode::Calibrated
          ? &*scene.raw.gt_cameras
          : nullptr;

  CameraSet cams;
  PointCloud pts;
  if (cameras_from.size() > 5 && cameras_from.substr(cameras_from.size() - 5) == ".json") {
    const json report = read_json_file(cameras_from);
    if (!report.contains("cameras") || !report.contains("mode"))
      throw Error(ErrorCode::ParseError, "report lacks 'cameras'/'mode' fields");
    const CameraMode mode = parse_mode(report["mode"].get<std::string>());
    if (mode != scene.mode)
      throw Error(ErrorCode::ModeMismatch, "report mode differs from the scene mode");
    cams = cameras_from_json(report["cameras"], mode);
    if (cams.size() != scene.tensor.cameras())
      throw Error(ErrorCode::ShapeMismatch, "report camera count differs from the scene");
    PointCloud fallback;
    fallback.points = Eigen::Matrix3Xd::Zero(3, scene.tensor.tracks());
    pts = triangulate_tracks(cams, scene.tensor, fallback);
  } else {
    const Checkpoint ckpt = load_checkpoint(cameras_from);
    if (ckpt.params.mode != scene.mode)
      throw Error(ErrorCode::ModeMismatch, "checkpoint mode differs from the scene mode");
    const ModelOutput out = model_forward(ckpt.params, scene.tensor);
    cams = out.cameras;
    pts = triangulate_tracks(cams, scene.tensor, out.points);
  }

  const Metrics metrics = evaluate_metrics(cams, pts, gt, scene.tensor, scene.transforms);
  print_metrics_row("eval", metrics, nullptr);
  return 0;
}

int run_gradcheck(uint64_t seed, double epsilon, double threshold) {
  // unstructured random scene, resampled until every branch is comfortably
  // away from its kink
  for (int attempt = 0; attempt < 50; ++attempt) {
    const uint64_t s = seed + 1000ULL * attempt;
    const MeasurementTensor t = random_tensor(4, 6, 0.8, s);
    ModelDims dims;
    dims.encoder_width = 16;
    dims.encoder_layers = 3;
    ModelParams params = init_params(CameraMode::Calibrated, dims, s + 1);

    GradientTape tape;
    model_forward(params, t, tape);
    attach_loss(tape, 1e-4);
    double min_residual = std::numeric_limits<double>::infinity();
    for (const TapeObservation& rec : tape.observations)
      if (!rec.hinge) min_residual = std::min(min_residual, rec.residual);
    if (min_residual < 1e-3) continue;

    try {
      FiniteDiffOptions opts;
      opts.epsilon = epsilon;
      opts.seed = s + 2;
      const double err = finite_diff_check(params, t, 1e-4, opts);
      std::printf("gradcheck: max relative error %.3e over %d parameters (eps %.1e)\n", err,
                  opts.sample_size, epsilon);
      return err <= threshold ? 0 : 4;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NonSmoothPoint) throw;
    }
  }
  throw Error(ErrorCode::NonSmoothPoint, "could not sample a smooth configuration");
}

}  // namespace

int dispatch(const std::vector<std::string>& args) {
  CLI::App app{"equivariant structure-from-motion"};
  app.require_subcommand(1);

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic tracks file");
  std::string synth_config, synth_out;
  synth_cmd->add_option("--config", synth_config, "JSON generator config")->required();
  synth_cmd->add_option("--out", synth_out, "output .tracks path")->required();

  // reconstruct
  auto* rec_cmd = app.add_subcommand("reconstruct", "single-scene reconstruction");
  ReconstructArgs rec;
  rec_cmd->add_option("--scene", rec.scene_path)->required();
  rec_cmd->add_option("--mode", rec.mode_flag, "calibrated|projective (default: file mode)");
  rec_cmd->add_option("--epochs", rec.epochs);
  rec_cmd->add_option("--seed", rec.seed);
  rec_cmd->add_flag("--sequential", rec.sequential, "greedy image-ordering schedule");
  rec_cmd->add_flag("--no-ba", rec.no_ba, "skip bundle adjustment");
  rec_cmd->add_option("--width", rec.width, "encoder width");
  rec_cmd->add_option("--layers", rec.layers, "encoder layers");
  rec_cmd->add_option("--lr", rec.learning_rate);
  rec_cmd->add_option("--depth-threshold", rec.depth_threshold, "depth hinge threshold");
  rec_cmd->add_option("--huber-delta", rec.huber_delta);
  rec_cmd->add_option("--ba-iterations", rec.ba_iterations);
  rec_cmd->add_option("--probes", rec.probes, "short init probes before the main run");
  rec_cmd->add_option("--probe-epochs", rec.probe_epochs);
  rec_cmd->add_option("--out-ply", rec.out_ply);
  rec_cmd->add_option("--out-report", rec.out_report);

  // train
  auto* train_cmd = app.add_subcommand("train", "multi-scene training");
  std::string train_dir, val_dir, train_config, train_out;
  train_cmd->add_option("--train-dir", train_dir)->required();
  train_cmd->add_option("--val-dir", val_dir)->required();
  train_cmd->add_option("--config", train_config)->required();
  train_cmd->add_option("--out", train_out)->required();

  // finetune
  auto* ft_cmd = app.add_subcommand("finetune", "fine-tune a trained model on one scene");
  std::string ft_model;
  ReconstructArgs ft;
  ft.epochs = 500;
  ft_cmd->add_option("--model", ft_model)->required();
  ft_cmd->add_option("--scene", ft.scene_path)->required();
  ft_cmd->add_option("--mode", ft.mode_flag);
  ft_cmd->add_option("--epochs", ft.epochs);
  ft_cmd->add_flag("--no-ba", ft.no_ba);
  ft_cmd->add_option("--lr", ft.learning_rate);
  ft_cmd->add_option("--depth-threshold", ft.depth_threshold);
  ft_cmd->add_option("--huber-delta", ft.huber_delta);
  ft_cmd->add_option("--ba-iterations", ft.ba_iterations);
  ft_cmd->add_option("--out-ply", ft.out_ply);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "recompute metrics for stored cameras");
  std::string eval_scene, eval_from, eval_mode;
  eval_cmd->add_option("--scene", eval_scene)->required();
  eval_cmd->add_option("--cameras-from", eval_from, "model .ckpt or report .json")->required();
  eval_cmd->add_option("--mode", eval_mode);

  // gradcheck
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient check");
  uint64_t grad_seed = 7;
  double grad_eps = 1e-6, grad_threshold = 1e-5;
  grad_cmd->add_option("--seed", grad_seed);
  grad_cmd->add_option("--eps", grad_eps);
  grad_cmd->add_option("--threshold", grad_threshold);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*synth_cmd) return run_synth(synth_config, synth_out);
    if (*rec_cmd) return run_reconstruct(rec);
    if (*train_cmd) return run_train(train_dir, val_dir, train_config, train_out);
    if (*ft_cmd) return run_finetune(ft_model, ft);
    if (*eval_cmd) return run_eval(eval_scene, eval_from, eval_mode);
    if (*grad_cmd) return run_gradcheck(grad_seed, grad_eps, grad_threshold);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.code() == ErrorCode::NonFiniteLoss ? 4 : 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 2;
}

}  // namespace esfm
