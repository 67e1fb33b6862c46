#include <gtest/gtest.h>

#include <tlnet/data_io.hpp>

#include <Eigen/Geometry>

#include <atomic>
#include <cstring>
#include <fstream>
#include <random>

#include <unistd.h>

using namespace tlnet;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static std::atomic<int> counter{0};
    path = fs::temp_directory_path() /
           ("tlnet_data_io_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

void write_bytes(const std::string& path, std::size_t n) {
  std::ofstream out(path, std::ios::binary);
  for (std::size_t i = 0; i < n; ++i) out.put(char(i & 0x7f));
}

std::uint32_t bits(double v) {
  const float f = float(v);
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  return u;
}

PointCloud random_cloud(int m, std::mt19937_64& rng, double extent = 5.0) {
  std::uniform_real_distribution<double> u(-extent, extent);
  PointCloud c;
  c.positions.resize(m, 3);
  c.features.resize(m, 1);
  for (int i = 0; i < m; ++i) {
    c.positions.row(i) << u(rng), u(rng), u(rng);
    c.features(i, 0) = 0.5 + 0.1 * u(rng);
  }
  c.labels.assign(std::size_t(m), 0);
  return c;
}

Eigen::Matrix4d random_pose(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Eigen::Matrix4d p = Eigen::Matrix4d::Identity();
  p.topLeftCorner<3, 3>() = Eigen::AngleAxisd(3.0 * u(rng), Eigen::Vector3d(u(rng), u(rng), 1.0).normalized()).toRotationMatrix();
  p.topRightCorner<3, 1>() = Eigen::Vector3d(10 * u(rng), 10 * u(rng), u(rng));
  return p;
}

// Frozen from tests/fixtures/write_fixtures.py output.
const std::uint32_t kFixtureBits[10][4] = {
    {0x00000000, 0x00000000, 0x00000000, 0x00000000}, {0x3fc00000, 0xc0100000, 0x3e000000, 0x3f000000},
    {0xbdcccccd, 0x3e4ccccd, 0x3e99999a, 0x3f7d70a4}, {0x4145851f, 0xc287c7ae, 0x3a83126f, 0x00000000},
    {0x49742400, 0xb58637bd, 0x40490fdb, 0x3f800000}, {0x80000000, 0x35800000, 0xc2f6e979, 0x3e800000},
    {0x40e00000, 0x41000000, 0x41100000, 0x3f400000}, {0xc0b00000, 0x40b00000, 0xbf000000, 0x3c23d70a},
    {0x42c80000, 0x3a83126f, 0xc2c80000, 0x3ea8f5c3}, {0x3f333333, 0xbf333333, 0x3d8f5c29, 0x3be56042},
};

const std::string kFixtures = TLNET_FIXTURE_DIR;

}  // namespace

// --- scans ---

TEST(Scan, HundredSixtyBytesIsTenPoints) {
  TempDir t;
  write_bytes(t.file("a.bin"), 160);
  const auto c = read_scan(t.file("a.bin"));
  EXPECT_EQ(c.size(), 10u);
  EXPECT_EQ(c.feature_dim(), 1);
}

TEST(Scan, EmptyFileIsEmptyCloud) {
  TempDir t;
  write_bytes(t.file("e.bin"), 0);
  const auto c = read_scan(t.file("e.bin"));
  EXPECT_EQ(c.size(), 0u);
}

TEST(Scan, BadSizeReportsOffset) {
  TempDir t;
  write_bytes(t.file("bad.bin"), 170);
  try {
    read_scan(t.file("bad.bin"));
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("offset 160"), std::string::npos) << msg;
  }
}

TEST(Scan, MissingFileIsUserError) { EXPECT_THROW(read_scan("/nonexistent/x.bin"), UserError); }

TEST(Scan, IndependentWriterFixtureIsBitIdentical) {
  const auto c = read_scan(kFixtures + "/scan_fixture.bin");
  ASSERT_EQ(c.size(), 10u);
  for (int i = 0; i < 10; ++i) {
    for (int k = 0; k < 3; ++k) EXPECT_EQ(bits(c.positions(i, k)), kFixtureBits[i][k]) << i << "," << k;
    EXPECT_EQ(bits(c.features(i, 0)), kFixtureBits[i][3]) << i;
  }
  // -0.0 keeps its sign bit through the reader.
  EXPECT_TRUE(std::signbit(c.positions(5, 0)));
}

TEST(Scan, WriteReadRoundTripMatchesFixtureBytes) {
  TempDir t;
  const auto c = read_scan(kFixtures + "/scan_fixture.bin");
  write_scan(t.file("copy.bin"), c);
  const auto a = read_file_bytes(kFixtures + "/scan_fixture.bin");
  const auto b = read_file_bytes(t.file("copy.bin"));
  EXPECT_EQ(a, b);
}

// --- labels ---

TEST(Labels, SplitBitLayout) {
  const auto r = split_label(0x00010033u);
  EXPECT_EQ(r.semantic, 0x33u);
  EXPECT_EQ(r.instance, 1u);
  const auto z = split_label(0u);
  EXPECT_EQ(z.semantic, 0u);
  EXPECT_EQ(z.instance, 0u);
  EXPECT_EQ(split_label(0xFFFF0032u).instance, 0xFFFFu);
}

TEST(Labels, ZeroIsIgnored) {
  EXPECT_EQ(semantic_kitti_multiscan_map().to_train(0), kIgnoreLabel);
  EXPECT_EQ(semantic_kitti_multiscan_map().to_train(1), kIgnoreLabel);
}

TEST(Labels, IdentityMapPassesThrough) {
  TempDir t;
  write_raw_labels(t.file("l.label"), {0, 1, 2, 3, 0x00050002u});
  const auto l = read_labels(t.file("l.label"), LabelMap::identity(4));
  EXPECT_EQ(l, (std::vector<std::int32_t>{0, 1, 2, 3, 2}));
  // Ids outside the identity range are unknown.
  write_raw_labels(t.file("m.label"), {4, 7});
  EXPECT_EQ(read_labels(t.file("m.label"), LabelMap::identity(4)), (std::vector<std::int32_t>{kIgnoreLabel, kIgnoreLabel}));
}

TEST(Labels, FixtureFileWithKittiMap) {
  const auto raw = read_raw_labels(kFixtures + "/label_fixture.label");
  EXPECT_EQ(raw, (std::vector<std::uint32_t>{0, 10, 0x00010033u, 252, 40, 0xFFFF0032u, 30, 99, 259, 1}));
  const auto l = read_labels(kFixtures + "/label_fixture.label", semantic_kitti_multiscan_map(), 10);
  // 0 unlabeled, 10 car, 51 fence, 252 moving-car, 40 road, 50 building, 30 person, 99 other-object, 259
  // moving-other-vehicle, 1 outlier.
  EXPECT_EQ(l, (std::vector<std::int32_t>{kIgnoreLabel, 0, 13, 19, 8, 12, 5, kIgnoreLabel, 23, kIgnoreLabel}));
}

TEST(Labels, CountMismatchThrows) {
  EXPECT_THROW(read_labels(kFixtures + "/label_fixture.label", LabelMap::identity(3), 9), FormatError);
}

TEST(Labels, BadSizeThrows) {
  TempDir t;
  write_bytes(t.file("b.label"), 6);
  EXPECT_THROW(read_raw_labels(t.file("b.label")), FormatError);
}

TEST(Labels, KittiMultiscanTableIsConsistent) {
  const auto m = semantic_kitti_multiscan_map();
  const auto classes = semantic_kitti_multiscan_classes();
  ASSERT_EQ(m.num_classes(), 25);
  ASSERT_EQ(classes.size(), 25u);
  for (int c = 0; c < 25; ++c) {
    EXPECT_EQ(m.to_train(m.to_raw(c)), c) << classes[std::size_t(c)].name;
    EXPECT_EQ(classes[std::size_t(c)].moving, c >= 19);
    EXPECT_EQ(classes[std::size_t(c)].name.rfind("moving-", 0) == 0, c >= 19);
  }
  for (auto [raw, train] : m.raw_to_train) {
    EXPECT_GE(train, 0);
    EXPECT_LT(train, 25);
  }
}

TEST(Labels, MapJsonRoundTrip) {
  const auto m = semantic_kitti_multiscan_map();
  const auto back = LabelMap::from_json(m.to_json());
  EXPECT_EQ(back.train_to_raw, m.train_to_raw);
  EXPECT_EQ(back.raw_to_train, m.raw_to_train);
}

// --- sequences and poses ---

TEST(Sequence, IndicesForScopeThree) {
  const auto idx = sequence_indices(9, 4, 3);
  ASSERT_TRUE(idx);
  EXPECT_EQ(*idx, (std::vector<std::size_t>{0, 3, 6, 9}));
  EXPECT_FALSE(sequence_indices(8, 4, 3));
  EXPECT_EQ(*sequence_indices(0, 1, 3), (std::vector<std::size_t>{0}));
}

TEST(Sequence, SingleCloudIsUntransformed) {
  std::mt19937_64 rng(1);
  std::vector<PointCloud> clouds = {random_cloud(20, rng), random_cloud(20, rng)};
  std::vector<Eigen::Matrix4d> poses = {random_pose(rng), random_pose(rng)};
  SequenceConfig cfg{1, 3, 1.0, true};
  const auto s = assemble_sequence([&](std::size_t i) { return clouds[i]; }, 1, cfg, poses);
  ASSERT_TRUE(s);
  ASSERT_EQ(s->clouds.size(), 1u);
  EXPECT_EQ(s->clouds[0].positions, clouds[1].positions);
  EXPECT_TRUE(s->clouds[0].pose.isIdentity());
}

TEST(Sequence, IdentityPosesAreNoop) {
  std::mt19937_64 rng(2);
  std::vector<PointCloud> clouds;
  for (int i = 0; i < 10; ++i) clouds.push_back(random_cloud(15, rng));
  const std::vector<Eigen::Matrix4d> poses(10, Eigen::Matrix4d::Identity());
  SequenceConfig cfg{4, 3, 0.5, true};
  const auto s = assemble_sequence([&](std::size_t i) { return clouds[i]; }, 9, cfg, poses, "07");
  ASSERT_TRUE(s);
  EXPECT_EQ(s->sequence_id, "07");
  EXPECT_EQ(s->indices, (std::vector<std::size_t>{0, 3, 6, 9}));
  for (std::size_t k = 0; k < 4; ++k) {
    const auto& src = clouds[s->indices[k]];
    EXPECT_LT((s->clouds[k].positions * cfg.sigma - src.positions).cwiseAbs().maxCoeff(), 1e-7);
    EXPECT_EQ(s->clouds[k].features, src.features);
    EXPECT_EQ(s->clouds[k].labels, src.labels);
  }
}

TEST(Sequence, IncompleteWindowIsSkipped) {
  std::mt19937_64 rng(3);
  const auto c = random_cloud(5, rng);
  int loads = 0;
  const auto s = assemble_sequence([&](std::size_t) { ++loads; return c; }, 5, SequenceConfig{}, {});
  EXPECT_FALSE(s);
  EXPECT_EQ(loads, 0);
}

TEST(Sequence, KnownTranslationLandsInAnchorFrame) {
  PointCloud origin;
  origin.positions = Mat<double>::Zero(1, 3);
  origin.features = Mat<double>::Zero(1, 1);
  std::vector<Eigen::Matrix4d> poses(2, Eigen::Matrix4d::Identity());
  poses[0](0, 3) = 5.0;  // sensor was 5 m ahead in world x
  poses[1](1, 3) = 1.0;
  SequenceConfig cfg{2, 1, 0.5, true};
  const auto s = assemble_sequence([&](std::size_t) { return origin; }, 1, cfg, poses);
  ASSERT_TRUE(s);
  // World point (5,0,0) seen from a sensor at (0,1,0), scaled by 1/0.5.
  EXPECT_NEAR(s->clouds[0].positions(0, 0), 10.0, 1e-12);
  EXPECT_NEAR(s->clouds[0].positions(0, 1), -2.0, 1e-12);
  EXPECT_NEAR(s->clouds[1].positions.norm(), 0.0, 1e-12);
}

TEST(Sequence, PoseTransformInvertsWithin1e5) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<PointCloud> clouds = {random_cloud(30, rng, 40.0), random_cloud(30, rng, 40.0)};
    std::vector<Eigen::Matrix4d> poses = {random_pose(rng), random_pose(rng)};
    SequenceConfig cfg{2, 1, 0.6, true};
    const auto s = assemble_sequence([&](std::size_t i) { return clouds[i]; }, 1, cfg, poses);
    ASSERT_TRUE(s);
    Mat<double> back = s->clouds[0].positions * cfg.sigma;
    transform_positions(back, poses[1]);
    transform_positions(back, Eigen::Matrix4d(poses[0].inverse()));
    EXPECT_LT((back - clouds[0].positions).cwiseAbs().maxCoeff(), 1e-5);
  }
}

TEST(Sequence, ReflectanceOffDropsFeatureColumn) {
  std::mt19937_64 rng(5);
  const auto c = random_cloud(8, rng);
  SequenceConfig cfg{1, 1, 0.6, false};
  const auto s = assemble_sequence([&](std::size_t) { return c; }, 0, cfg, {});
  ASSERT_TRUE(s);
  EXPECT_EQ(s->clouds[0].feature_dim(), 0);
  EXPECT_EQ(s->clouds[0].size(), 8u);
}

TEST(Sequence, BadConfigRejected) {
  EXPECT_THROW((SequenceConfig{0, 1, 0.6, true}.validate()), UserError);
  EXPECT_THROW((SequenceConfig{2, 0, 0.6, true}.validate()), UserError);
  EXPECT_THROW((SequenceConfig{2, 1, 0.0, true}.validate()), UserError);
}

TEST(Poses, FileRoundTripAndCalibration) {
  TempDir t;
  std::mt19937_64 rng(6);
  std::vector<Eigen::Matrix4d> poses;
  for (int i = 0; i < 5; ++i) poses.push_back(random_pose(rng));
  write_poses(t.file("poses.txt"), poses);
  const auto back = read_poses(t.file("poses.txt"));
  ASSERT_EQ(back.size(), 5u);
  for (int i = 0; i < 5; ++i) EXPECT_LT((back[std::size_t(i)] - poses[std::size_t(i)]).cwiseAbs().maxCoeff(), 1e-12);

  {
    std::ofstream calib(t.file("calib.txt"));
    calib << "P0: 1 0 0 0 0 1 0 0 0 0 1 0\n";
  }
  EXPECT_TRUE(read_calib_tr(t.file("calib.txt")).isIdentity());

  const Eigen::Matrix4d tr = random_pose(rng);
  const auto velo = velodyne_poses(poses, tr);
  for (int i = 0; i < 5; ++i) {
    EXPECT_LT((tr * velo[std::size_t(i)] - poses[std::size_t(i)] * tr).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Poses, WrongValueCountThrows) {
  TempDir t;
  {
    std::ofstream out(t.file("p.txt"));
    out << "1 0 0 0 0 1 0 0 0 0 1\n";
  }
  EXPECT_THROW(read_poses(t.file("p.txt")), FormatError);
}

// --- augmentation ---

namespace {

SequenceSample sample_of(std::vector<PointCloud> clouds, double sigma = 1.0) {
  SequenceSample s;
  s.sigma = sigma;
  s.clouds = std::move(clouds);
  return s;
}

}  // namespace

TEST(Augment, IdentityDraw) {
  std::mt19937_64 rng(7);
  const auto c = random_cloud(20, rng);
  auto s = sample_of({c});
  AugmentConfig cfg{false, false, 0.0, 0.0};
  const auto d = augment(s, cfg, rng);
  EXPECT_EQ(d.angle, 0.0);
  EXPECT_FALSE(d.mirror);
  EXPECT_EQ(s.clouds[0].positions, c.positions);
  EXPECT_EQ(s.clouds[0].labels, c.labels);
}

TEST(Augment, HalfTurnTwiceIsIdentity) {
  std::mt19937_64 rng(8);
  const auto c = random_cloud(50, rng, 30.0);
  auto s = sample_of({c}, 0.6);
  AugmentDraw d;
  d.angle = std::numbers::pi;
  apply_augmentation(s, d, 0.0, rng);
  EXPECT_GT((s.clouds[0].positions - c.positions).cwiseAbs().maxCoeff(), 1.0);
  apply_augmentation(s, d, 0.0, rng);
  EXPECT_LT((s.clouds[0].positions - c.positions).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Augment, RigidPartPreservesDistances) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const auto c = random_cloud(25, rng, 20.0);
    auto s = sample_of({c}, 0.6);
    AugmentConfig cfg;
    cfg.noise_std = 0.0;
    augment(s, cfg, rng);
    const auto& p = s.clouds[0].positions;
    for (int i = 0; i < 25; ++i) {
      for (int j = i + 1; j < 25; ++j) {
        EXPECT_NEAR((p.row(i) - p.row(j)).norm(), (c.positions.row(i) - c.positions.row(j)).norm(), 1e-6);
      }
    }
  }
}

TEST(Augment, TranslationIsScaledBySigma) {
  std::mt19937_64 rng(10);
  PointCloud c;
  c.positions = Mat<double>::Zero(1, 3);
  auto s = sample_of({c}, 0.5);
  AugmentDraw d;
  d.tx = 1.0;
  d.ty = -2.0;
  apply_augmentation(s, d, 0.0, rng);
  EXPECT_DOUBLE_EQ(s.clouds[0].positions(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(s.clouds[0].positions(0, 1), -4.0);
}

TEST(Augment, MirrorFlipsHandedness) {
  std::mt19937_64 rng(11);
  PointCloud c;
  c.positions.resize(3, 3);
  c.positions << 1, 0, 0, 0, 1, 0, 0, 0, 1;
  auto s = sample_of({c});
  AugmentDraw d;
  d.mirror = true;
  d.angle = 0.7;
  apply_augmentation(s, d, 0.0, rng);
  const Eigen::Matrix3d m = s.clouds[0].positions;
  EXPECT_NEAR(m.determinant(), -1.0, 1e-12);
}

TEST(Augment, TranslationDrawsStayInRange) {
  std::mt19937_64 rng(12);
  AugmentConfig cfg;
  for (int i = 0; i < 2000; ++i) {
    const auto d = draw_augmentation(cfg, rng);
    EXPECT_LE(std::abs(d.tx), cfg.translation_range);
    EXPECT_LE(std::abs(d.ty), cfg.translation_range);
    EXPECT_GE(d.angle, 0.0);
    EXPECT_LT(d.angle, 2.0 * std::numbers::pi);
  }
}

TEST(Augment, SameDrawKeepsStaticSceneAligned) {
  SynthSceneConfig sc;
  sc.noise_std = 0.0;
  sc.min_speed = sc.max_speed = 0.0;
  sc.frames = 10;
  auto samples = synth_generate(sc, SequenceConfig{4, 3, 0.6, true});
  ASSERT_EQ(samples.size(), 1u);
  std::mt19937_64 rng(13);
  AugmentConfig cfg;
  cfg.noise_std = 0.05;
  augment(samples[0], cfg, rng);
  const auto& clouds = samples[0].clouds;
  // Per-point noise bound: 6 sigma of a noise difference, in scaled units.
  const double bound = 6.0 * std::sqrt(2.0) * cfg.noise_std / 0.6;
  for (std::size_t k = 1; k < clouds.size(); ++k) {
    ASSERT_EQ(clouds[k].size(), clouds[0].size());
    EXPECT_LT((clouds[k].positions - clouds[0].positions).cwiseAbs().maxCoeff(), bound);
  }
  EXPECT_GT((clouds[1].positions - clouds[0].positions).cwiseAbs().maxCoeff(), 0.0);
}

// --- synthetic generator ---

TEST(Synth, FixedSeedIsBitIdentical) {
  SynthSceneConfig cfg;
  const auto a = synth_generate_scene(cfg, 42, "a");
  const auto b = synth_generate_scene(cfg, 42, "a");
  const auto c = synth_generate_scene(cfg, 43, "a");
  ASSERT_EQ(a.frames.size(), b.frames.size());
  for (std::size_t f = 0; f < a.frames.size(); ++f) {
    const auto& pa = a.frames[f].positions;
    const auto& pb = b.frames[f].positions;
    ASSERT_EQ(pa.size(), pb.size());
    EXPECT_EQ(std::memcmp(pa.data(), pb.data(), sizeof(double) * std::size_t(pa.size())), 0);
    EXPECT_EQ(a.frames[f].labels, b.frames[f].labels);
  }
  EXPECT_NE(a.frames[0].positions, c.frames[0].positions);
}

TEST(Synth, LabelsAreInClassSetAndShapesMatch) {
  SynthSceneConfig cfg;
  const auto scene = synth_generate_scene(cfg, 1, "x");
  for (const auto& f : scene.frames) {
    f.validate(6);
    ASSERT_EQ(f.labels.size(), f.size());
    for (auto l : f.labels) {
      EXPECT_GE(l, 0);
      EXPECT_LT(l, 6);
    }
  }
  const auto classes = synth_classes();
  EXPECT_EQ(std::count_if(classes.begin(), classes.end(), [](const ClassInfo& c) { return c.moving; }), 2);
}

TEST(Synth, CentroidAdvancesByVelocity) {
  SynthSceneConfig cfg;
  cfg.noise_std = 0.0;
  cfg.static_objects = 0;
  cfg.moving_objects = 2;
  cfg.min_speed = cfg.max_speed = 1.0;
  const auto scene = synth_generate_scene(cfg, 5, "v");
  // Bookkeeping from labeled points only: instance ids select the object.
  auto centroid = [&](std::size_t f, std::uint32_t inst) {
    Eigen::RowVector3d sum = Eigen::RowVector3d::Zero();
    int n = 0;
    for (std::size_t i = 0; i < scene.frames[f].size(); ++i) {
      if (scene.instance_ids[f][i] != inst) continue;
      sum += scene.frames[f].positions.row(Eigen::Index(i));
      ++n;
    }
    return Eigen::RowVector3d(sum / n);
  };
  for (std::size_t k = 0; k < scene.objects.size(); ++k) {
    const auto& o = scene.objects[k];
    if (o.label != kMovingCar) continue;
    EXPECT_NEAR(o.velocity.norm(), 1.0, 1e-12);
    for (std::size_t f = 1; f < scene.frames.size(); ++f) {
      const Eigen::RowVector3d step = centroid(f, std::uint32_t(k + 1)) - centroid(f - 1, std::uint32_t(k + 1));
      EXPECT_LT((step - o.velocity.transpose()).norm(), 1e-9);
    }
  }
}

TEST(Synth, StaticPointsIdenticalAcrossFrames) {
  SynthSceneConfig cfg;
  cfg.noise_std = 0.0;
  const auto scene = synth_generate_scene(cfg, 6, "s");
  const auto& f0 = scene.frames.front();
  const auto& f1 = scene.frames.back();
  int moved = 0;
  for (std::size_t i = 0; i < f0.size(); ++i) {
    const bool moving = f0.labels[i] == kMovingCar || f0.labels[i] == kMovingPedestrian;
    const double d = (f0.positions.row(Eigen::Index(i)) - f1.positions.row(Eigen::Index(i))).norm();
    if (moving) {
      moved += d > 0.1;
    } else {
      EXPECT_EQ(d, 0.0) << i;
    }
  }
  EXPECT_GT(moved, 0);
}

TEST(Synth, ZeroVelocityControlIsGeometricallyStatic) {
  SynthSceneConfig cfg;
  cfg.noise_std = 0.0;
  cfg.min_speed = cfg.max_speed = 0.0;
  const auto scene = synth_generate_scene(cfg, 7, "z");
  std::size_t moving_labels = 0;
  for (auto l : scene.frames[0].labels) moving_labels += (l == kMovingCar || l == kMovingPedestrian);
  EXPECT_GT(moving_labels, 0u);
  for (std::size_t f = 1; f < scene.frames.size(); ++f) {
    EXPECT_EQ(scene.frames[f].positions, scene.frames[0].positions);
  }
}

TEST(Synth, SamplesUseCompleteWindowsOnly) {
  SynthSceneConfig cfg;
  cfg.frames = 12;
  cfg.scenes = 2;
  const auto samples = synth_generate(cfg, SequenceConfig{4, 3, 0.6, true});
  ASSERT_EQ(samples.size(), 6u);
  EXPECT_EQ(samples[0].indices, (std::vector<std::size_t>{0, 3, 6, 9}));
  EXPECT_EQ(samples[5].indices, (std::vector<std::size_t>{2, 5, 8, 11}));
  EXPECT_EQ(samples[5].sequence_id, "01");
}

// --- on-disk dataset ---

TEST(Dataset, SynthWriteOpenRoundTrip) {
  TempDir t;
  SynthSceneConfig cfg;
  cfg.frames = 11;
  cfg.scenes = 3;
  cfg.seed = 9;
  write_synth_dataset(t.path, cfg, 1);
  const auto ds = Dataset::open(t.path);
  EXPECT_EQ(ds.num_classes(), 6);
  ASSERT_EQ(ds.train.size(), 2u);
  ASSERT_EQ(ds.val.size(), 1u);
  EXPECT_EQ(ds.val[0].id, "02");
  ASSERT_EQ(ds.train[0].scans.size(), 11u);

  const auto scenes = synth_generate_scenes(cfg);
  const auto cloud = ds.load_cloud(ds.train[1], 4);
  const auto& ref = scenes[1].frames[4];
  ASSERT_EQ(cloud.size(), ref.size());
  EXPECT_EQ(cloud.labels, ref.labels);
  for (Eigen::Index i = 0; i < ref.positions.size(); ++i) {
    EXPECT_EQ(float(cloud.positions.data()[i]), float(ref.positions.data()[i]));
  }
  const auto raw = read_raw_labels((ds.train[1].dir / "labels" / frame_name(4, ".label")).string());
  for (std::size_t i = 0; i < raw.size(); ++i) EXPECT_EQ(split_label(raw[i]).instance, scenes[1].instance_ids[4][i]);

  std::size_t skipped = 0;
  const auto samples = ds.samples(ds.train, SequenceConfig{4, 3, 0.6, true}, &skipped);
  EXPECT_EQ(samples.size(), 4u);
  EXPECT_EQ(skipped, 18u);
}

TEST(Dataset, MissingLabelFileThrows) {
  TempDir t;
  SynthSceneConfig cfg;
  cfg.frames = 2;
  write_synth_dataset(t.path, cfg, 0);
  fs::remove(t.path / "sequences" / "00" / "labels" / frame_name(1, ".label"));
  EXPECT_THROW(Dataset::open(t.path), UserError);
}

TEST(Dataset, MissingRootThrows) { EXPECT_THROW(Dataset::open("/nonexistent/tlnet_root"), UserError); }
