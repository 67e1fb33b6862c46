#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "tlnet/binary_io.hpp"
#include "tlnet/error.hpp"
#include "tlnet/point_cloud.hpp"

namespace tlnet {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Class metadata and label remapping
// ---------------------------------------------------------------------------

struct ClassInfo {
  std::string name;
  bool moving = false;
};

/// Raw dataset ids -> training ids in [0, K); anything unmapped becomes kIgnoreLabel.
struct LabelMap {
  std::unordered_map<std::uint32_t, std::int32_t> raw_to_train;
  std::vector<std::uint32_t> train_to_raw;

  int num_classes() const { return static_cast<int>(train_to_raw.size()); }

  std::int32_t to_train(std::uint32_t raw_semantic) const {
    auto it = raw_to_train.find(raw_semantic);
    return it == raw_to_train.end() ? kIgnoreLabel : it->second;
  }

  std::uint32_t to_raw(std::int32_t train) const {
    if (train < 0 || train >= num_classes()) return 0;
    return train_to_raw[std::size_t(train)];
  }

  static LabelMap identity(int num_classes) {
    LabelMap m;
    for (int c = 0; c < num_classes; ++c) {
      m.raw_to_train[std::uint32_t(c)] = c;
      m.train_to_raw.push_back(std::uint32_t(c));
    }
    return m;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["train_to_raw"] = train_to_raw;
    nlohmann::json r = nlohmann::json::object();
    for (auto [raw, train] : raw_to_train) r[std::to_string(raw)] = train;
    j["raw_to_train"] = r;
    return j;
  }

  static LabelMap from_json(const nlohmann::json& j) {
    LabelMap m;
    m.train_to_raw = j.at("train_to_raw").get<std::vector<std::uint32_t>>();
    for (auto& [raw, train] : j.at("raw_to_train").items()) {
      m.raw_to_train[std::uint32_t(std::stoul(raw))] = train.get<std::int32_t>();
    }
    return m;
  }
};

/// The 25-class multiple-scans task of SemanticKITTI.
inline LabelMap semantic_kitti_multiscan_map() {
  LabelMap m;
  const std::vector<std::pair<std::uint32_t, std::int32_t>> pairs = {
      {10, 0},  {11, 1},  {13, 4},  {15, 2},  {16, 4},  {18, 3},  {20, 4},  {30, 5},  {31, 6},  {32, 7},
      {40, 8},  {44, 9},  {48, 10}, {49, 11}, {50, 12}, {51, 13}, {60, 8},  {70, 14}, {71, 15}, {72, 16},
      {80, 17}, {81, 18}, {252, 19}, {253, 20}, {254, 21}, {255, 22}, {256, 23}, {257, 23}, {258, 24}, {259, 23}};
  for (auto [raw, train] : pairs) m.raw_to_train[raw] = train;
  m.train_to_raw = {10, 11, 15, 18, 20, 30, 31, 32, 40, 44, 48, 49, 50, 51, 70, 71, 72, 80, 81, 252, 253, 254, 255, 259, 258};
  return m;
}

inline std::vector<ClassInfo> semantic_kitti_multiscan_classes() {
  const char* names[] = {"car",          "bicycle",         "motorcycle",     "truck",          "other-vehicle",
                         "person",       "bicyclist",       "motorcyclist",   "road",           "parking",
                         "sidewalk",     "other-ground",    "building",       "fence",          "vegetation",
                         "trunk",        "terrain",         "pole",           "traffic-sign",   "moving-car",
                         "moving-bicyclist", "moving-person", "moving-motorcyclist", "moving-other-vehicle",
                         "moving-truck"};
  std::vector<ClassInfo> out;
  for (int i = 0; i < 25; ++i) out.push_back({names[i], i >= 19});
  return out;
}

// ---------------------------------------------------------------------------
// Scan and label files
// ---------------------------------------------------------------------------

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UserError("cannot open " + path);
  return std::vector<unsigned char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

/// `.bin` scan: 16 bytes per point, four little-endian f32 (x, y, z, reflectance).
inline PointCloud read_scan(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() % 16 != 0) {
    throw FormatError(path + ": size " + std::to_string(bytes.size()) + " is not a multiple of 16; trailing " +
                      std::to_string(bytes.size() % 16) + " bytes at offset " +
                      std::to_string(bytes.size() - bytes.size() % 16));
  }
  const std::size_t m = bytes.size() / 16;
  PointCloud cloud;
  cloud.positions.resize(Eigen::Index(m), 3);
  cloud.features.resize(Eigen::Index(m), 1);
  for (std::size_t i = 0; i < m; ++i) {
    const unsigned char* p = bytes.data() + 16 * i;
    for (int c = 0; c < 3; ++c) cloud.positions(Eigen::Index(i), c) = binary::f32_from_bytes(p + 4 * c);
    cloud.features(Eigen::Index(i), 0) = binary::f32_from_bytes(p + 12);
  }
  return cloud;
}

inline void write_scan(const std::string& path, const PointCloud& cloud) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UserError("cannot write " + path);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (int c = 0; c < 3; ++c) binary::put_f32(out, float(cloud.positions(Eigen::Index(i), c)));
    binary::put_f32(out, cloud.feature_dim() > 0 ? float(cloud.features(Eigen::Index(i), 0)) : 0.0f);
  }
}

struct RawLabel {
  std::uint32_t semantic;
  std::uint32_t instance;
};

/// Low 16 bits: semantic class, high 16 bits: instance id.
inline RawLabel split_label(std::uint32_t raw) { return {raw & 0xFFFFu, raw >> 16}; }

inline std::vector<std::uint32_t> read_raw_labels(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() % 4 != 0) {
    throw FormatError(path + ": size " + std::to_string(bytes.size()) + " is not a multiple of 4; trailing bytes at offset " +
                      std::to_string(bytes.size() - bytes.size() % 4));
  }
  std::vector<std::uint32_t> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = binary::u32_from_bytes(bytes.data() + 4 * i);
  return out;
}

/// Reads a `.label` file and remaps semantic ids. When `expected_points` is
/// given, a differing count is a consistency error.
inline std::vector<std::int32_t> read_labels(const std::string& path, const LabelMap& map,
                                             std::optional<std::size_t> expected_points = std::nullopt) {
  const auto raw = read_raw_labels(path);
  if (expected_points && raw.size() != *expected_points) {
    throw FormatError(path + ": " + std::to_string(raw.size()) + " labels for " + std::to_string(*expected_points) +
                      " points");
  }
  std::vector<std::int32_t> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = map.to_train(split_label(raw[i]).semantic);
  return out;
}

inline void write_raw_labels(const std::string& path, const std::vector<std::uint32_t>& raw) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UserError("cannot write " + path);
  for (auto v : raw) binary::put_u32(out, v);
}

// ---------------------------------------------------------------------------
// Poses: KITTI poses.txt (12 reals per line, row-major 3x4, camera frame) and
// calib.txt ("Tr:" velodyne -> camera). Velodyne pose = Tr^-1 * P * Tr.
// ---------------------------------------------------------------------------

inline Eigen::Matrix4d parse_3x4(const std::vector<double>& v) {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) m(r, c) = v[std::size_t(4 * r + c)];
  }
  return m;
}

inline std::vector<Eigen::Matrix4d> read_poses(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UserError("cannot open " + path);
  std::vector<Eigen::Matrix4d> poses;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ss(line);
    std::vector<double> v;
    double x;
    while (ss >> x) v.push_back(x);
    if (v.empty()) continue;
    if (v.size() != 12) throw FormatError(path + ":" + std::to_string(line_no) + ": expected 12 values, got " + std::to_string(v.size()));
    poses.push_back(parse_3x4(v));
  }
  return poses;
}

inline Eigen::Matrix4d read_calib_tr(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UserError("cannot open " + path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("Tr:", 0) != 0) continue;
    std::istringstream ss(line.substr(3));
    std::vector<double> v;
    double x;
    while (ss >> x) v.push_back(x);
    if (v.size() != 12) throw FormatError(path + ": Tr must have 12 values");
    return parse_3x4(v);
  }
  return Eigen::Matrix4d::Identity();
}

inline std::vector<Eigen::Matrix4d> velodyne_poses(const std::vector<Eigen::Matrix4d>& camera_poses, const Eigen::Matrix4d& tr) {
  const Eigen::Matrix4d tr_inv = tr.inverse();
  std::vector<Eigen::Matrix4d> out;
  out.reserve(camera_poses.size());
  for (const auto& p : camera_poses) out.push_back(tr_inv * p * tr);
  return out;
}

inline void write_poses(const std::string& path, const std::vector<Eigen::Matrix4d>& poses) {
  std::ofstream out(path);
  if (!out) throw UserError("cannot write " + path);
  out << std::setprecision(17);
  for (const auto& p : poses) {
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 4; ++c) out << p(r, c) << ((r == 2 && c == 3) ? '\n' : ' ');
    }
  }
}

inline void transform_positions(Mat<double>& positions, const Eigen::Matrix4d& transform) {
  const Eigen::Matrix3d rot = transform.topLeftCorner<3, 3>();
  const Eigen::Vector3d trans = transform.topRightCorner<3, 1>();
  for (Eigen::Index i = 0; i < positions.rows(); ++i) {
    const Eigen::Vector3d p = positions.row(i).transpose();
    positions.row(i) = (rot * p + trans).transpose();
  }
}

// ---------------------------------------------------------------------------
// Sequence assembly
// ---------------------------------------------------------------------------

struct SequenceConfig {
  int n = 4;
  int s = 3;
  double sigma = 0.6;
  bool use_reflectance = true;

  void validate() const {
    if (n < 1) throw UserError("sequence length n must be >= 1");
    if (s < 1) throw UserError("cloud scope s must be >= 1");
    if (!(sigma > 0.0)) throw UserError("sigma must be positive");
  }
};

/// n clouds in the anchor (last) cloud's frame, positions divided by sigma.
struct SequenceSample {
  std::string sequence_id;
  std::vector<std::size_t> indices;
  std::vector<PointCloud> clouds;
  double sigma = 0.6;
  std::int32_t ignore_label = kIgnoreLabel;
};

/// Dataset indices {t-(n-1)s, ..., t-s, t}, or nullopt when t-(n-1)s < 0.
inline std::optional<std::vector<std::size_t>> sequence_indices(std::size_t t, int n, int s) {
  const std::int64_t first = std::int64_t(t) - std::int64_t(n - 1) * s;
  if (first < 0) return std::nullopt;
  std::vector<std::size_t> out;
  for (int i = 0; i < n; ++i) out.push_back(std::size_t(first + std::int64_t(i) * s));
  return out;
}

/// `load(i)` returns cloud i in its own sensor frame; `poses[i]` maps it into the world.
inline std::optional<SequenceSample> assemble_sequence(const std::function<PointCloud(std::size_t)>& load, std::size_t anchor,
                                                      const SequenceConfig& config,
                                                      const std::vector<Eigen::Matrix4d>& poses,
                                                      const std::string& sequence_id = {}) {
  config.validate();
  const auto indices = sequence_indices(anchor, config.n, config.s);
  if (!indices) return std::nullopt;
  if (!poses.empty() && anchor >= poses.size()) throw UserError("assemble_sequence: missing pose for index " + std::to_string(anchor));
  SequenceSample sample;
  sample.sequence_id = sequence_id;
  sample.indices = *indices;
  sample.sigma = config.sigma;
  const Eigen::Matrix4d anchor_inv = poses.empty() ? Eigen::Matrix4d::Identity() : Eigen::Matrix4d(poses[anchor].inverse());
  for (std::size_t idx : *indices) {
    PointCloud cloud = load(idx);
    if (!poses.empty() && idx != anchor) {
      cloud.pose = anchor_inv * poses[idx];
      transform_positions(cloud.positions, cloud.pose);
    } else {
      cloud.pose = Eigen::Matrix4d::Identity();
    }
    cloud.positions /= config.sigma;
    if (!config.use_reflectance) cloud.features.resize(cloud.positions.rows(), 0);
    sample.clouds.push_back(std::move(cloud));
  }
  return sample;
}

// ---------------------------------------------------------------------------
// Augmentation: one rigid draw per sample, independent per-point noise.
// ---------------------------------------------------------------------------

struct AugmentConfig {
  bool rotate = true;
  bool mirror = true;
  double translation_range = 2.0;  // meters, uniform in [-r, r] on x and y
  double noise_std = 0.01;         // meters
};

struct AugmentDraw {
  double angle = 0.0;  // about the height (z) axis
  bool mirror = false; // y -> -y
  double tx = 0.0, ty = 0.0;
};

inline AugmentDraw draw_augmentation(const AugmentConfig& config, std::mt19937_64& rng) {
  AugmentDraw d;
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> shift(-config.translation_range, config.translation_range);
  std::bernoulli_distribution flip(0.5);
  if (config.rotate) d.angle = angle(rng);
  if (config.mirror) d.mirror = flip(rng);
  if (config.translation_range > 0.0) {
    d.tx = shift(rng);
    d.ty = shift(rng);
  }
  return d;
}

/// Applies the rigid part of `draw` to every cloud (translation converted to
/// sigma-scaled units), then per-point Gaussian noise.
inline void apply_augmentation(SequenceSample& sample, const AugmentDraw& draw, double noise_std, std::mt19937_64& rng) {
  const double c = std::cos(draw.angle), s = std::sin(draw.angle);
  const double inv_sigma = 1.0 / sample.sigma;
  std::normal_distribution<double> noise(0.0, noise_std > 0.0 ? noise_std * inv_sigma : 1.0);
  for (auto& cloud : sample.clouds) {
    for (Eigen::Index i = 0; i < cloud.positions.rows(); ++i) {
      double x = cloud.positions(i, 0), y = cloud.positions(i, 1);
      if (draw.mirror) y = -y;
      const double rx = c * x - s * y;
      const double ry = s * x + c * y;
      cloud.positions(i, 0) = rx + draw.tx * inv_sigma;
      cloud.positions(i, 1) = ry + draw.ty * inv_sigma;
      if (noise_std > 0.0) {
        for (Eigen::Index k = 0; k < cloud.positions.cols(); ++k) cloud.positions(i, k) += noise(rng);
      }
    }
  }
}

inline AugmentDraw augment(SequenceSample& sample, const AugmentConfig& config, std::mt19937_64& rng) {
  const AugmentDraw d = draw_augmentation(config, rng);
  apply_augmentation(sample, d, config.noise_std, rng);
  return d;
}

// ---------------------------------------------------------------------------
// Synthetic moving/static scenes
// ---------------------------------------------------------------------------

enum SynthClass : int { kGround = 0, kBuilding = 1, kCar = 2, kPedestrian = 3, kMovingCar = 4, kMovingPedestrian = 5 };

inline std::vector<ClassInfo> synth_classes() {
  return {{"ground", false}, {"building", false}, {"car", false},
          {"pedestrian", false}, {"moving-car", true}, {"moving-pedestrian", true}};
}

/// Raw ids on disk are class + 1; 0 is unlabeled.
inline LabelMap synth_label_map() {
  LabelMap m;
  for (int c = 0; c < 6; ++c) {
    m.raw_to_train[std::uint32_t(c + 1)] = c;
    m.train_to_raw.push_back(std::uint32_t(c + 1));
  }
  return m;
}

struct SynthSceneConfig {
  int static_structures = 2;   // buildings
  int static_objects = 4;      // parked cars / standing pedestrians
  int moving_objects = 4;
  double min_speed = 0.6;      // m/frame
  double max_speed = 1.0;
  int points_per_car = 120;
  int points_per_pedestrian = 50;
  int ground_points = 300;
  int points_per_structure = 120;
  double extent = 9.0;         // scene is [-extent, extent]^2
  double noise_std = 0.01;
  std::uint64_t seed = 0;
  int frames = 8;
  int scenes = 1;

  nlohmann::json to_json() const {
    return {{"static_structures", static_structures}, {"static_objects", static_objects}, {"moving_objects", moving_objects},
            {"min_speed", min_speed}, {"max_speed", max_speed}, {"points_per_car", points_per_car},
            {"points_per_pedestrian", points_per_pedestrian}, {"ground_points", ground_points},
            {"points_per_structure", points_per_structure}, {"extent", extent}, {"noise_std", noise_std},
            {"seed", seed}, {"frames", frames}, {"scenes", scenes}};
  }
};

struct SynthObject {
  int label = kCar;
  Eigen::Vector3d start = Eigen::Vector3d::Zero();
  Eigen::Vector3d velocity = Eigen::Vector3d::Zero();  // m/frame
  Mat<double> local_points;                            // object frame
  double reflectance = 0.5;
};

/// One generated scene: frames in the world frame (identity poses).
struct SynthScene {
  std::string id;
  std::vector<PointCloud> frames;
  std::vector<std::vector<std::uint32_t>> instance_ids;  // per frame, per point
  std::vector<SynthObject> objects;
};

namespace detail {

inline Mat<double> sample_box_surface(const Eigen::Vector3d& size, int count, std::mt19937_64& rng, bool include_bottom = false) {
  const double ax = size.x(), ay = size.y(), az = size.z();
  std::vector<double> areas = {ay * az, ay * az, ax * az, ax * az, ax * ay};
  if (include_bottom) areas.push_back(ax * ay);
  std::discrete_distribution<int> face(areas.begin(), areas.end());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Mat<double> pts(count, 3);
  for (int i = 0; i < count; ++i) {
    double x = (u(rng) - 0.5) * ax, y = (u(rng) - 0.5) * ay, z = u(rng) * az;
    switch (face(rng)) {
      case 0: x = -0.5 * ax; break;
      case 1: x = 0.5 * ax; break;
      case 2: y = -0.5 * ay; break;
      case 3: y = 0.5 * ay; break;
      case 4: z = az; break;
      default: z = 0.0; break;
    }
    pts.row(i) << x, y, z;
  }
  return pts;
}

inline Mat<double> sample_cylinder_surface(double radius, double height, int count, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Mat<double> pts(count, 3);
  for (int i = 0; i < count; ++i) {
    const double a = 2.0 * std::numbers::pi * u(rng);
    pts.row(i) << radius * std::cos(a), radius * std::sin(a), height * u(rng);
  }
  return pts;
}

}  // namespace detail

inline SynthScene synth_generate_scene(const SynthSceneConfig& config, std::uint64_t seed, const std::string& id) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double e = config.extent;
  SynthScene scene;
  scene.id = id;

  std::vector<SynthObject> objects;
  // Buildings along the scene border.
  for (int b = 0; b < config.static_structures; ++b) {
    SynthObject o;
    o.label = kBuilding;
    o.reflectance = 0.5;
    const Eigen::Vector3d size(2.0 + 4.0 * u(rng), 1.0 + 1.0 * u(rng), 3.0 + 2.0 * u(rng));
    const int side = b % 4;
    const double along = (u(rng) - 0.5) * 1.2 * e;
    const double across = e - 1.0;
    if (side == 0) o.start = {along, across, 0.0};
    if (side == 1) o.start = {along, -across, 0.0};
    if (side == 2) o.start = {across, along, 0.0};
    if (side == 3) o.start = {-across, along, 0.0};
    Mat<double> local = detail::sample_box_surface(size, config.points_per_structure, rng);
    if (side >= 2) local.col(0).swap(local.col(1));
    o.local_points = std::move(local);
    objects.push_back(std::move(o));
  }
  // Cars and pedestrians: static and moving variants share shape and placement distributions.
  const int dynamic_total = config.static_objects + config.moving_objects;
  const double mid = 0.5 * double(config.frames - 1);
  for (int i = 0; i < dynamic_total; ++i) {
    const bool moving = i >= config.static_objects;
    const int index_in_group = moving ? i - config.static_objects : i;
    const bool car = index_in_group % 2 == 0;
    SynthObject o;
    o.label = car ? (moving ? kMovingCar : kCar) : (moving ? kMovingPedestrian : kPedestrian);
    o.reflectance = car ? 0.8 : 0.35;
    const double margin = 2.5;
    const Eigen::Vector3d center((u(rng) - 0.5) * 2.0 * (e - margin), (u(rng) - 0.5) * 2.0 * (e - margin), 0.0);
    if (moving) {
      const double heading = 2.0 * std::numbers::pi * u(rng);
      const double speed = config.min_speed + (config.max_speed - config.min_speed) * u(rng);
      o.velocity = {speed * std::cos(heading), speed * std::sin(heading), 0.0};
      if (!car) o.velocity *= 0.5;
    }
    o.start = center - mid * o.velocity;
    if (car) {
      o.local_points = detail::sample_box_surface({4.0, 1.8, 1.5}, config.points_per_car, rng);
    } else {
      o.local_points = detail::sample_cylinder_surface(0.3, 1.7, config.points_per_pedestrian, rng);
    }
    objects.push_back(std::move(o));
  }
  // Ground points are resampled per frame from a fixed pattern.
  Mat<double> ground(config.ground_points, 3);
  for (int i = 0; i < config.ground_points; ++i) ground.row(i) << (u(rng) - 0.5) * 2.0 * e, (u(rng) - 0.5) * 2.0 * e, 0.0;

  std::normal_distribution<double> noise(0.0, config.noise_std > 0.0 ? config.noise_std : 1.0);
  for (int f = 0; f < config.frames; ++f) {
    std::size_t total = std::size_t(ground.rows());
    for (const auto& o : objects) total += std::size_t(o.local_points.rows());
    PointCloud cloud;
    cloud.positions.resize(Eigen::Index(total), 3);
    cloud.features.resize(Eigen::Index(total), 1);
    cloud.labels.resize(total);
    std::vector<std::uint32_t> instances(total, 0);
    Eigen::Index row = 0;
    for (Eigen::Index i = 0; i < ground.rows(); ++i, ++row) {
      cloud.positions.row(row) = ground.row(i);
      cloud.features(row, 0) = 0.2;
      cloud.labels[std::size_t(row)] = kGround;
    }
    for (std::size_t k = 0; k < objects.size(); ++k) {
      const auto& o = objects[k];
      const Eigen::Vector3d offset = o.start + double(f) * o.velocity;
      for (Eigen::Index i = 0; i < o.local_points.rows(); ++i, ++row) {
        cloud.positions.row(row) = o.local_points.row(i) + offset.transpose();
        cloud.features(row, 0) = o.reflectance;
        cloud.labels[std::size_t(row)] = o.label;
        instances[std::size_t(row)] = std::uint32_t(k + 1);
      }
    }
    if (config.noise_std > 0.0) {
      for (Eigen::Index i = 0; i < cloud.positions.size(); ++i) cloud.positions.data()[i] += noise(rng);
    }
    scene.frames.push_back(std::move(cloud));
    scene.instance_ids.push_back(std::move(instances));
  }
  scene.objects = std::move(objects);
  return scene;
}

inline std::vector<SynthScene> synth_generate_scenes(const SynthSceneConfig& config) {
  std::vector<SynthScene> scenes;
  for (int s = 0; s < config.scenes; ++s) {
    std::ostringstream id;
    id << std::setw(2) << std::setfill('0') << s;
    scenes.push_back(synth_generate_scene(config, config.seed * 1000003ull + std::uint64_t(s), id.str()));
  }
  return scenes;
}

/// Every complete (n, s) window of every scene, assembled like real data.
inline std::vector<SequenceSample> synth_samples(const std::vector<SynthScene>& scenes, const SequenceConfig& seq) {
  std::vector<SequenceSample> out;
  for (const auto& scene : scenes) {
    const std::vector<Eigen::Matrix4d> poses(scene.frames.size(), Eigen::Matrix4d::Identity());
    for (std::size_t t = 0; t < scene.frames.size(); ++t) {
      auto sample = assemble_sequence([&](std::size_t i) { return scene.frames[i]; }, t, seq, poses, scene.id);
      if (sample) out.push_back(std::move(*sample));
    }
  }
  return out;
}

inline std::vector<SequenceSample> synth_generate(const SynthSceneConfig& config, const SequenceConfig& seq) {
  return synth_samples(synth_generate_scenes(config), seq);
}

// ---------------------------------------------------------------------------
// On-disk datasets
//
// Layout (SemanticKITTI conventions):
//   <root>/sequences/<id>/velodyne/NNNNNN.bin
//   <root>/sequences/<id>/labels/NNNNNN.label
//   <root>/sequences/<id>/poses.txt, calib.txt
// Synthetic datasets add <root>/manifest.json describing classes, label map and splits.
// ---------------------------------------------------------------------------

inline std::string frame_name(std::size_t index, const char* ext) {
  std::ostringstream s;
  s << std::setw(6) << std::setfill('0') << index << ext;
  return s.str();
}

struct SequenceFiles {
  std::string id;
  fs::path dir;
  std::vector<fs::path> scans;
  std::vector<fs::path> labels;  // empty when the sequence is unlabeled
  std::vector<Eigen::Matrix4d> poses;  // velodyne frame -> world
};

inline SequenceFiles open_sequence(const fs::path& root, const std::string& id) {
  SequenceFiles seq;
  seq.id = id;
  seq.dir = root / "sequences" / id;
  const fs::path velo = seq.dir / "velodyne";
  if (!fs::is_directory(velo)) throw UserError("missing scan directory " + velo.string());
  for (const auto& entry : fs::directory_iterator(velo)) {
    if (entry.path().extension() == ".bin") seq.scans.push_back(entry.path());
  }
  std::sort(seq.scans.begin(), seq.scans.end());
  const fs::path label_dir = seq.dir / "labels";
  if (fs::is_directory(label_dir)) {
    for (const auto& scan : seq.scans) {
      const fs::path label = label_dir / (scan.stem().string() + ".label");
      if (!fs::exists(label)) throw UserError("missing label file " + label.string());
      seq.labels.push_back(label);
    }
  }
  const fs::path poses = seq.dir / "poses.txt";
  if (fs::exists(poses)) {
    const fs::path calib = seq.dir / "calib.txt";
    const Eigen::Matrix4d tr = fs::exists(calib) ? read_calib_tr(calib.string()) : Eigen::Matrix4d::Identity();
    seq.poses = velodyne_poses(read_poses(poses.string()), tr);
    if (seq.poses.size() < seq.scans.size()) throw FormatError(poses.string() + ": fewer poses than scans");
  } else {
    seq.poses.assign(seq.scans.size(), Eigen::Matrix4d::Identity());
  }
  return seq;
}

struct Dataset {
  fs::path root;
  LabelMap label_map;
  std::vector<ClassInfo> classes;
  std::vector<SequenceFiles> train;
  std::vector<SequenceFiles> val;

  int num_classes() const { return label_map.num_classes(); }

  PointCloud load_cloud(const SequenceFiles& seq, std::size_t index) const {
    PointCloud cloud = read_scan(seq.scans.at(index).string());
    if (!seq.labels.empty()) cloud.labels = read_labels(seq.labels[index].string(), label_map, cloud.size());
    return cloud;
  }

  std::optional<SequenceSample> sample(const SequenceFiles& seq, std::size_t anchor, const SequenceConfig& config) const {
    return assemble_sequence([&](std::size_t i) { return load_cloud(seq, i); }, anchor, config, seq.poses, seq.id);
  }

  /// Loads every complete window; incomplete ones at sequence starts are counted in `skipped`.
  std::vector<SequenceSample> samples(const std::vector<SequenceFiles>& split, const SequenceConfig& config,
                                      std::size_t* skipped = nullptr) const {
    std::vector<SequenceSample> out;
    std::size_t missing = 0;
    for (const auto& seq : split) {
      for (std::size_t t = 0; t < seq.scans.size(); ++t) {
        auto s = sample(seq, t, config);
        if (s) {
          out.push_back(std::move(*s));
        } else {
          ++missing;
        }
      }
    }
    if (skipped) *skipped = missing;
    return out;
  }

  static Dataset open(const fs::path& root, const std::vector<std::string>& train_ids = {},
                      const std::vector<std::string>& val_ids = {}) {
    if (!fs::is_directory(root)) throw UserError("dataset root " + root.string() + " is not a directory");
    Dataset ds;
    ds.root = root;
    std::vector<std::string> train_list = train_ids, val_list = val_ids;
    const fs::path manifest_path = root / "manifest.json";
    if (fs::exists(manifest_path)) {
      std::ifstream in(manifest_path);
      const auto manifest = nlohmann::json::parse(in);
      ds.label_map = LabelMap::from_json(manifest.at("label_map"));
      for (const auto& c : manifest.at("classes")) ds.classes.push_back({c.at("name"), c.at("moving")});
      if (train_list.empty()) train_list = manifest.at("splits").at("train").get<std::vector<std::string>>();
      if (val_list.empty()) val_list = manifest.at("splits").at("val").get<std::vector<std::string>>();
    } else {
      ds.label_map = semantic_kitti_multiscan_map();
      ds.classes = semantic_kitti_multiscan_classes();
      if (train_list.empty()) train_list = {"00", "01", "02", "03", "04", "05", "06", "07", "09", "10"};
      if (val_list.empty()) val_list = {"08"};
    }
    for (const auto& id : train_list) ds.train.push_back(open_sequence(root, id));
    for (const auto& id : val_list) ds.val.push_back(open_sequence(root, id));
    return ds;
  }
};

/// Writes scenes in the on-disk layout plus manifest.json. The last `val_scenes` scenes form the val split.
inline void write_synth_dataset(const fs::path& root, const SynthSceneConfig& config, int val_scenes = 1) {
  const auto scenes = synth_generate_scenes(config);
  const LabelMap map = synth_label_map();
  nlohmann::json manifest;
  manifest["format"] = "tlnet-synthetic";
  manifest["version"] = 1;
  manifest["config"] = config.to_json();
  manifest["label_map"] = map.to_json();
  for (const auto& c : synth_classes()) manifest["classes"].push_back({{"name", c.name}, {"moving", c.moving}});
  manifest["splits"]["train"] = nlohmann::json::array();
  manifest["splits"]["val"] = nlohmann::json::array();
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const auto& scene = scenes[s];
    const bool is_val = int(scenes.size() - s) <= val_scenes && scenes.size() > 1;
    manifest["splits"][is_val ? "val" : "train"].push_back(scene.id);
    const fs::path dir = root / "sequences" / scene.id;
    fs::create_directories(dir / "velodyne");
    fs::create_directories(dir / "labels");
    for (std::size_t f = 0; f < scene.frames.size(); ++f) {
      const auto& cloud = scene.frames[f];
      write_scan((dir / "velodyne" / frame_name(f, ".bin")).string(), cloud);
      std::vector<std::uint32_t> raw(cloud.size());
      for (std::size_t i = 0; i < cloud.size(); ++i) {
        raw[i] = map.to_raw(cloud.labels[i]) | (scene.instance_ids[f][i] << 16);
      }
      write_raw_labels((dir / "labels" / frame_name(f, ".label")).string(), raw);
    }
    write_poses((dir / "poses.txt").string(), std::vector<Eigen::Matrix4d>(scene.frames.size(), Eigen::Matrix4d::Identity()));
    std::ofstream calib(dir / "calib.txt");
    calib << "Tr: 1 0 0 0 0 1 0 0 0 0 1 0\n";
  }
  std::ofstream out(root / "manifest.json");
  if (!out) throw UserError("cannot write manifest in " + root.string());
  out << manifest.dump(2) << '\n';
}

}  // namespace tlnet
