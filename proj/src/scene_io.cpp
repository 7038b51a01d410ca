#include "esfm/scene_io.hpp"

#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace esfm {

namespace {

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct LineReader {
  std::istream& in;
  int line_no = 0;

  /// Next content line with comments stripped; false at EOF.
  bool next(std::string& out) {
    std::string raw;
    while (std::getline(in, raw)) {
      ++line_no;
      const size_t hash = raw.find('#');
      if (hash != std::string::npos) raw.erase(hash);
      size_t end = raw.find_last_not_of(" \t\r");
      if (end == std::string::npos) continue;
      raw.erase(end + 1);
      out = raw;
      return true;
    }
    return false;
  }
};

[[noreturn]] void parse_fail(int line, const std::string& what) {
  throw Error(ErrorCode::ParseError, what + " (line " + std::to_string(line) + ")", line);
}

}  // namespace

Scene read_tracks(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IOError, "cannot open " + path);
  LineReader reader{in};

  std::string line;
  if (!reader.next(line)) parse_fail(reader.line_no, "missing header");
  if (line != "ESFM-TRACKS 1")
    throw Error(ErrorCode::HeaderMismatch, "expected 'ESFM-TRACKS 1', got '" + line + "'");

  if (!reader.next(line)) parse_fail(reader.line_no, "missing dimensions line");
  long m = 0, n = 0, p = 0;
  char mode_buf[32] = {0};
  if (std::sscanf(line.c_str(), "%ld %ld %ld %31s", &m, &n, &p, mode_buf) != 4)
    parse_fail(reader.line_no, "malformed dimensions line");
  Scene scene;
  if (std::strcmp(mode_buf, "CALIBRATED") == 0) {
    scene.mode = CameraMode::Calibrated;
  } else if (std::strcmp(mode_buf, "PROJECTIVE") == 0) {
    scene.mode = CameraMode::Projective;
  } else {
    parse_fail(reader.line_no, std::string("unknown mode '") + mode_buf + "'");
  }
  if (m <= 0 || n <= 0 || p <= 0) parse_fail(reader.line_no, "non-positive dimensions");

  if (scene.mode == CameraMode::Calibrated) {
    scene.intrinsics.emplace();
    scene.intrinsics->reserve(m);
    for (long i = 0; i < m; ++i) {
      if (!reader.next(line)) parse_fail(reader.line_no, "missing K line");
      double fx, fy, cx, cy, skew;
      if (std::sscanf(line.c_str(), "K %lf %lf %lf %lf %lf", &fx, &fy, &cx, &cy, &skew) != 5)
        parse_fail(reader.line_no, "malformed K line");
      Eigen::Matrix3d K = Eigen::Matrix3d::Identity();
      K(0, 0) = fx;
      K(1, 1) = fy;
      K(0, 2) = cx;
      K(1, 2) = cy;
      K(0, 1) = skew;
      scene.intrinsics->push_back(K);
    }
  }

  std::vector<Observation> obs;
  obs.reserve(p);
  std::optional<std::string> pending;
  for (long k = 0; k < p; ++k) {
    if (!reader.next(line)) {
      if (static_cast<long>(obs.size()) != p)
        throw Error(ErrorCode::CountMismatch,
                    "declared " + std::to_string(p) + " observations, found " +
                        std::to_string(obs.size()));
      break;
    }
    long i, j;
    double x, y;
    if (std::sscanf(line.c_str(), "O %ld %ld %lf %lf", &i, &j, &x, &y) != 4) {
      // a GT line arriving early means the O block is short
      if (line.rfind("GT ", 0) == 0)
        throw Error(ErrorCode::CountMismatch,
                    "declared " + std::to_string(p) + " observations, found " +
                        std::to_string(obs.size()));
      parse_fail(reader.line_no, "malformed O line");
    }
    obs.push_back({static_cast<int>(i), static_cast<int>(j), x, y});
  }
  if (static_cast<long>(obs.size()) != p)
    throw Error(ErrorCode::CountMismatch,
                "declared " + std::to_string(p) + " observations, found " +
                    std::to_string(obs.size()));

  // optional GT block: exactly m lines when present
  if (reader.next(line)) {
    CameraSet gt;
    gt.mode = CameraMode::Calibrated;
    for (long i = 0; i < m; ++i) {
      if (i > 0 && !reader.next(line))
        throw Error(ErrorCode::CountMismatch,
                    "GT block has " + std::to_string(i) + " of " + std::to_string(m) + " lines");
      double qw, qx, qy, qz, tx, ty, tz;
      if (std::sscanf(line.c_str(), "GT %lf %lf %lf %lf %lf %lf %lf", &qw, &qx, &qy, &qz, &tx,
                      &ty, &tz) != 7)
        parse_fail(reader.line_no, "malformed GT line");
      CalibratedPose pose;
      pose.rotation = Quaternion{qw, qx, qy, qz}.normalized();
      pose.translation = {tx, ty, tz};
      gt.poses.push_back(pose);
    }
    if (reader.next(line)) parse_fail(reader.line_no, "unexpected trailing content");
    scene.gt_cameras = std::move(gt);
  }

  try {
    scene.tensor = build_measurements(obs, static_cast<int>(m), static_cast<int>(n));
  } catch (const Error& e) {
    throw Error(e.code(), std::string(e.what()) + " while validating " + path,
                e.index_a(), e.index_b());
  }
  return scene;
}

void write_tracks(const Scene& scene, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IOError, "cannot write " + path);

  const MeasurementTensor& t = scene.tensor;
  out << "ESFM-TRACKS 1\n";
  out << t.cameras() << ' ' << t.tracks() << ' ' << t.observations() << ' '
      << (scene.mode == CameraMode::Calibrated ? "CALIBRATED" : "PROJECTIVE") << '\n';

  if (scene.mode == CameraMode::Calibrated) {
    if (!scene.intrinsics || static_cast<int>(scene.intrinsics->size()) != t.cameras())
      throw Error(ErrorCode::InvalidArgument, "calibrated scene needs intrinsics per camera");
    for (const Eigen::Matrix3d& K : *scene.intrinsics)
      out << "K " << fmt17(K(0, 0)) << ' ' << fmt17(K(1, 1)) << ' ' << fmt17(K(0, 2)) << ' '
          << fmt17(K(1, 2)) << ' ' << fmt17(K(0, 1)) << '\n';
  }

  for (int k = 0; k < t.observations(); ++k)
    out << "O " << t.camera_of(k) << ' ' << t.track_of(k) << ' ' << fmt17(t.coords()(0, k))
        << ' ' << fmt17(t.coords()(1, k)) << '\n';

  if (scene.gt_cameras) {
    if (scene.gt_cameras->size() != t.cameras())
      throw Error(ErrorCode::InvalidArgument, "GT block must cover every camera");
    for (const CalibratedPose& pose : scene.gt_cameras->poses)
      out << "GT " << fmt17(pose.rotation.w) << ' ' << fmt17(pose.rotation.x) << ' '
          << fmt17(pose.rotation.y) << ' ' << fmt17(pose.rotation.z) << ' '
          << fmt17(pose.translation.x()) << ' ' << fmt17(pose.translation.y()) << ' '
          << fmt17(pose.translation.z()) << '\n';
  }
  if (!out) throw Error(ErrorCode::IOError, "write failed for " + path);
}

void write_ply(const PointCloud& points, const CameraSet& cams, const std::string& path) {
  if (!points.points.allFinite())
    throw Error(ErrorCode::InvalidArgument, "point cloud contains non-finite coordinates");
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IOError, "cannot write " + path);

  const int total = points.size() + cams.size();
  out << "ply\nformat ascii 1.0\n";
  out << "element vertex " << total << '\n';
  out << "property double x\nproperty double y\nproperty double z\n";
  out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  out << "end_header\n";
  for (int j = 0; j < points.size(); ++j)
    out << fmt17(points.points(0, j)) << ' ' << fmt17(points.points(1, j)) << ' '
        << fmt17(points.points(2, j)) << " 255 255 255\n";
  for (int i = 0; i < cams.size(); ++i) {
    const Eigen::Vector3d c = cams.center(i);
    out << fmt17(c.x()) << ' ' << fmt17(c.y()) << ' ' << fmt17(c.z()) << " 255 0 0\n";
  }
  if (!out) throw Error(ErrorCode::IOError, "write failed for " + path);
}

namespace {

constexpr char kMagic[8] = {'E', 'S', 'F', 'M', 'C', 'K', 'P', '1'};
constexpr uint32_t kVersion = 1;

uint64_t fnv1a(const std::string& bytes) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

template <class T>
void put(std::string& buf, const T& v) {
  buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(const std::string& buf, size_t& pos) {
  if (pos + sizeof(T) > buf.size())
    throw Error(ErrorCode::CorruptCheckpoint, "truncated checkpoint");
  T v;
  std::memcpy(&v, buf.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

void put_arrays(std::string& buf, const ModelWeights& w) {
  for (const ArrayRef& a : collect_arrays(const_cast<ModelWeights&>(w)))
    buf.append(reinterpret_cast<const char*>(a.data), a.size * sizeof(double));
}

void take_arrays(const std::string& buf, size_t& pos, ModelWeights& w) {
  for (const ArrayRef& a : collect_arrays(w)) {
    const size_t bytes = a.size * sizeof(double);
    if (pos + bytes > buf.size())
      throw Error(ErrorCode::CorruptCheckpoint, "truncated checkpoint arrays");
    std::memcpy(a.data, buf.data() + pos, bytes);
    pos += bytes;
  }
}

struct ShapeTable {
  std::vector<std::pair<uint32_t, uint32_t>> encoder, cam_head, pt_head;
};

ShapeTable shape_of(const ModelWeights& w) {
  ShapeTable s;
  for (const auto& L : w.encoder)
    s.encoder.push_back({static_cast<uint32_t>(L.in_width()), static_cast<uint32_t>(L.out_width())});
  for (const auto& l : w.cam_head.layers)
    s.cam_head.push_back({static_cast<uint32_t>(l.W.cols()), static_cast<uint32_t>(l.W.rows())});
  for (const auto& l : w.pt_head.layers)
    s.pt_head.push_back({static_cast<uint32_t>(l.W.cols()), static_cast<uint32_t>(l.W.rows())});
  return s;
}

void put_shapes(std::string& buf, const std::vector<std::pair<uint32_t, uint32_t>>& shapes) {
  put<uint32_t>(buf, static_cast<uint32_t>(shapes.size()));
  for (auto [in, out] : shapes) {
    put<uint32_t>(buf, in);
    put<uint32_t>(buf, out);
  }
}

std::vector<std::pair<uint32_t, uint32_t>> take_shapes(const std::string& buf, size_t& pos) {
  const uint32_t count = take<uint32_t>(buf, pos);
  if (count > 1024) throw Error(ErrorCode::CorruptCheckpoint, "implausible layer count");
  std::vector<std::pair<uint32_t, uint32_t>> shapes(count);
  for (auto& [in, out] : shapes) {
    in = take<uint32_t>(buf, pos);
    out = take<uint32_t>(buf, pos);
  }
  return shapes;
}

ModelWeights weights_from_shapes(const ShapeTable& s) {
  ModelWeights w;
  for (auto [in, out] : s.encoder) {
    EquivariantLayerParams L;
    L.W1.resize(out, in);
    L.W2.resize(out, in);
    L.W3.resize(out, in);
    L.W4.resize(out, in);
    L.b.resize(out);
    w.encoder.push_back(std::move(L));
  }
  auto fill_head = [](const std::vector<std::pair<uint32_t, uint32_t>>& shapes) {
    HeadParams h;
    for (auto [in, out] : shapes) {
      DenseLayerParams l;
      l.W.resize(out, in);
      l.b.resize(out);
      h.layers.push_back(std::move(l));
    }
    return h;
  };
  w.cam_head = fill_head(s.cam_head);
  w.pt_head = fill_head(s.pt_head);
  return w;
}

}  // namespace

void save_checkpoint(const ModelParams& params, const AdamState* adam, uint64_t seed,
                     const std::string& path) {
  std::string buf;
  buf.append(kMagic, sizeof(kMagic));
  put<uint32_t>(buf, kVersion);
  put<uint8_t>(buf, params.mode == CameraMode::Calibrated ? 0 : 1);
  uint8_t flags = 0;
  if (params.std_normalize_features) flags |= 1;
  if (adam != nullptr) flags |= 2;
  put<uint8_t>(buf, flags);
  put<uint16_t>(buf, 0);
  put<uint64_t>(buf, seed);

  const ShapeTable shapes = shape_of(params);
  put_shapes(buf, shapes.encoder);
  put_shapes(buf, shapes.cam_head);
  put_shapes(buf, shapes.pt_head);

  put_arrays(buf, params);
  if (adam != nullptr) {
    put<uint64_t>(buf, static_cast<uint64_t>(adam->step));
    put_arrays(buf, adam->first_moment);
    put_arrays(buf, adam->second_moment);
  }
  put<uint64_t>(buf, fnv1a(buf));

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IOError, "cannot write " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw Error(ErrorCode::IOError, "write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IOError, "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string buf = ss.str();

  if (buf.size() < sizeof(kMagic) + sizeof(uint32_t) + sizeof(uint64_t))
    throw Error(ErrorCode::CorruptCheckpoint, "file too small");
  if (std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0)
    throw Error(ErrorCode::VersionMismatch, "not a checkpoint file");

  // checksum covers everything before the trailing hash
  const std::string payload = buf.substr(0, buf.size() - sizeof(uint64_t));
  uint64_t stored;
  std::memcpy(&stored, buf.data() + buf.size() - sizeof(uint64_t), sizeof(uint64_t));
  if (fnv1a(payload) != stored)
    throw Error(ErrorCode::CorruptCheckpoint, "checksum mismatch");

  size_t pos = sizeof(kMagic);
  const uint32_t version = take<uint32_t>(buf, pos);
  if (version != kVersion)
    throw Error(ErrorCode::VersionMismatch,
                "checkpoint version " + std::to_string(version) + ", expected " +
                    std::to_string(kVersion));
  const uint8_t mode = take<uint8_t>(buf, pos);
  const uint8_t flags = take<uint8_t>(buf, pos);
  take<uint16_t>(buf, pos);

  Checkpoint ckpt;
  ckpt.seed = take<uint64_t>(buf, pos);

  ShapeTable shapes;
  shapes.encoder = take_shapes(buf, pos);
  shapes.cam_head = take_shapes(buf, pos);
  shapes.pt_head = take_shapes(buf, pos);

  static_cast<ModelWeights&>(ckpt.params) = weights_from_shapes(shapes);
  ckpt.params.mode = mode == 0 ? CameraMode::Calibrated : CameraMode::Projective;
  ckpt.params.std_normalize_features = (flags & 1) != 0;
  take_arrays(buf, pos, ckpt.params);

  if ((flags & 2) != 0) {
    AdamState adam;
    adam.step = static_cast<long>(take<uint64_t>(buf, pos));
    adam.first_moment = weights_from_shapes(shapes);
    adam.second_moment = weights_from_shapes(shapes);
    take_arrays(buf, pos, adam.first_moment);
    take_arrays(buf, pos, adam.second_moment);
    ckpt.adam = std::move(adam);
  }

  if (pos != payload.size())
    throw Error(ErrorCode::CorruptCheckpoint, "trailing bytes in checkpoint");
  return ckpt;
}

Checkpoint load_checkpoint_expect(const std::string& path, const ShapeExpectation& expect) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.params.mode != expect.mode)
    throw Error(ErrorCode::ModeMismatch, "checkpoint camera mode differs from expectation");
  const ModelParams reference = init_params(expect.mode, expect.dims, 0);
  const ShapeTable a = shape_of(ckpt.params), b = shape_of(reference);
  if (a.encoder != b.encoder || a.cam_head != b.cam_head || a.pt_head != b.pt_head)
    throw Error(ErrorCode::ShapeMismatch, "checkpoint layer shapes differ from expectation");
  return ckpt;
}

}  // namespace esfm
