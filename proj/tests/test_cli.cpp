#include <doctest.h>

#include <Eigen/LU>
#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "esfm/cli.hpp"
#include "esfm/scene_io.hpp"

using namespace esfm;
using nlohmann::json;

namespace {

struct TempDir {
  std::filesystem::path dir;
  TempDir() {
    static int counter = 0;
    dir = std::filesystem::temp_directory_path() /
          ("esfm_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(dir);
  }
  ~TempDir() { std::filesystem::remove_all(dir); }
  std::string path(const std::string& name) const { return (dir / name).string(); }
};

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  out << content;
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  return json::parse(in);
}

/// The documented report schema: required keys and their JSON types.
void check_report_schema(const json& r) {
  REQUIRE(r.contains("mode"));
  CHECK(r["mode"].is_string());
  REQUIRE(r.contains("scene"));
  CHECK(r["scene"]["m"].is_number_integer());
  CHECK(r["scene"]["n"].is_number_integer());
  CHECK(r["scene"]["p"].is_number_integer());
  REQUIRE(r.contains("seed"));
  REQUIRE(r.contains("config"));
  for (const char* key : {"epochs", "learning_rate", "depth_threshold", "width", "layers",
                          "sequential", "ba"})
    CHECK(r["config"].contains(key));
  REQUIRE(r.contains("loss"));
  CHECK(r["loss"]["epochs"].is_number_integer());
  REQUIRE(r.contains("metrics_before_ba"));
  CHECK(r["metrics_before_ba"]["reprojection_px"].is_number());
  REQUIRE(r.contains("metrics_after_ba"));
  REQUIRE(r.contains("ba"));
  REQUIRE(r.contains("timings_sec"));
  CHECK(r["timings_sec"]["optimize"].is_number());
  REQUIRE(r.contains("cameras"));
  CHECK(r["cameras"].is_array());
}

}  // namespace

TEST_CASE("cli: usage errors exit with code 2") {
  CHECK(dispatch({}) == 2);
  CHECK(dispatch({"no-such-command"}) == 2);
  CHECK(dispatch({"reconstruct"}) == 2);  // missing required --scene
}

TEST_CASE("cli: data errors exit with code 3") {
  TempDir tmp;
  CHECK(dispatch({"reconstruct", "--scene", tmp.path("missing.tracks"), "--epochs", "1"}) == 3);

  write_file(tmp.path("bad.tracks"), "not a tracks file\n");
  CHECK(dispatch({"reconstruct", "--scene", tmp.path("bad.tracks"), "--epochs", "1"}) == 3);
}

TEST_CASE("cli: synth then reconstruct end to end, report validates") {
  TempDir tmp;
  write_file(tmp.path("synth.json"),
             R"({"m": 6, "n": 24, "visibility": 0.8, "seed": 5, "mode": "calibrated"})");
  REQUIRE(dispatch({"synth", "--config", tmp.path("synth.json"), "--out",
                    tmp.path("scene.tracks")}) == 0);

  REQUIRE(dispatch({"reconstruct", "--scene", tmp.path("scene.tracks"), "--epochs", "40",
                    "--seed", "1", "--width", "12", "--out-ply", tmp.path("recon.ply"),
                    "--out-report", tmp.path("report.json")}) == 0);

  CHECK(std::filesystem::exists(tmp.path("recon.ply")));
  const json report = read_json(tmp.path("report.json"));
  check_report_schema(report);
  CHECK(report["scene"]["m"] == 6);
  CHECK(report["config"]["epochs"] == 40);
  CHECK(report["cameras"].size() == 6);

  // eval from the report reproduces a metric from the stored cameras
  CHECK(dispatch({"eval", "--scene", tmp.path("scene.tracks"), "--cameras-from",
                  tmp.path("report.json")}) == 0);
}

TEST_CASE("cli: reconstruct with --epochs 0 --no-ba reports the random-init forward") {
  TempDir tmp;
  write_file(tmp.path("synth.json"), R"({"m": 5, "n": 20, "seed": 9, "mode": "calibrated"})");
  REQUIRE(dispatch({"synth", "--config", tmp.path("synth.json"), "--out",
                    tmp.path("scene.tracks")}) == 0);
  REQUIRE(dispatch({"reconstruct", "--scene", tmp.path("scene.tracks"), "--epochs", "0",
                    "--seed", "3", "--width", "12", "--no-ba", "--out-report",
                    tmp.path("r0.json")}) == 0);
  const json report = read_json(tmp.path("r0.json"));
  CHECK(report["loss"]["epochs"] == 0);
  CHECK(report["metrics_after_ba"].is_null());
  CHECK(report["ba"].is_null());
  CHECK(report["metrics_before_ba"]["reprojection_px"].is_number());

  // identical command -> identical report (timings aside)
  REQUIRE(dispatch({"reconstruct", "--scene", tmp.path("scene.tracks"), "--epochs", "0",
                    "--seed", "3", "--width", "12", "--no-ba", "--out-report",
                    tmp.path("r1.json")}) == 0);
  json a = read_json(tmp.path("r0.json"));
  json b = read_json(tmp.path("r1.json"));
  a.erase("timings_sec");
  b.erase("timings_sec");
  CHECK(a == b);
}

TEST_CASE("cli: projective reconstruction on a projective file") {
  TempDir tmp;
  write_file(tmp.path("synth.json"), R"({"m": 5, "n": 20, "seed": 11, "mode": "projective"})");
  REQUIRE(dispatch({"synth", "--config", tmp.path("synth.json"), "--out",
                    tmp.path("scene.tracks")}) == 0);
  CHECK(dispatch({"reconstruct", "--scene", tmp.path("scene.tracks"), "--epochs", "20",
                  "--seed", "2", "--width", "12", "--no-ba", "--out-report",
                  tmp.path("p.json")}) == 0);
  const json report = read_json(tmp.path("p.json"));
  CHECK(report["mode"] == "projective");
  CHECK(report["cameras"][0].size() == 12);
  CHECK(report["metrics_before_ba"]["rotation_error_deg"].is_null());

  // calibrated mode on a projective file is a data error
  CHECK(dispatch({"reconstruct", "--scene", tmp.path("scene.tracks"), "--mode", "calibrated",
                  "--epochs", "1"}) == 3);
}

TEST_CASE("cli: train then finetune on tiny scenes") {
  TempDir tmp;
  std::filesystem::create_directories(tmp.path("train"));
  std::filesystem::create_directories(tmp.path("val"));
  for (int s = 0; s < 2; ++s) {
    write_file(tmp.path("synth.json"),
               "{\"m\": 12, \"n\": 30, \"seed\": " + std::to_string(40 + s) +
                   ", \"mode\": \"calibrated\"}");
    REQUIRE(dispatch({"synth", "--config", tmp.path("synth.json"), "--out",
                      tmp.path("train/scene" + std::to_string(s) + ".tracks")}) == 0);
  }
  write_file(tmp.path("synth.json"), R"({"m": 12, "n": 30, "seed": 50, "mode": "calibrated"})");
  REQUIRE(dispatch({"synth", "--config", tmp.path("synth.json"), "--out",
                    tmp.path("val/scene.tracks")}) == 0);

  write_file(tmp.path("train.json"),
             R"({"mode": "calibrated", "epochs": 4, "width": 12, "validation_period": 2,)"
             R"( "seed": 1})");
  REQUIRE(dispatch({"train", "--train-dir", tmp.path("train"), "--val-dir", tmp.path("val"),
                    "--config", tmp.path("train.json"), "--out", tmp.path("model.ckpt")}) == 0);
  CHECK(std::filesystem::exists(tmp.path("model.ckpt")));

  CHECK(dispatch({"finetune", "--model", tmp.path("model.ckpt"), "--scene",
                  tmp.path("val/scene.tracks"), "--epochs", "5"}) == 0);

  CHECK(dispatch({"eval", "--scene", tmp.path("val/scene.tracks"), "--cameras-from",
                  tmp.path("model.ckpt")}) == 0);
}

TEST_CASE("cli: gradcheck passes at the documented threshold") {
  CHECK(dispatch({"gradcheck", "--seed", "7"}) == 0);
}
