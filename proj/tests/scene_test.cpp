#include "pcvd/scene.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "pcvd/binary_io.hpp"
#include "pcvd/errors.hpp"

namespace pcvd {
namespace {

namespace fs = std::filesystem;

SceneConfig small_config() {
  SceneConfig c;
  c.sweeps = 20;
  c.sweeps_per_keyframe = 5;
  c.actors = 5;
  c.sensor.azimuth_resolution_deg = 2.0;
  return c;
}

ActorTrack straight_actor(Eigen::Vector2d start, Eigen::Vector2d vel, double yaw, int sweeps, double dt,
                          double length = 4.0, double width = 2.0) {
  ActorTrack t;
  t.length = length;
  t.width = width;
  t.height = 1.5;
  t.reflectance = 0.6;
  for (int s = 0; s < sweeps; ++s) t.trajectory.push_back({Pose(start + vel * (s * dt), yaw), vel});
  return t;
}

World static_ego_world(int sweeps) {
  World w;
  w.ego_poses.assign(static_cast<std::size_t>(sweeps), Pose::identity());
  return w;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  return p;
}

std::vector<std::uint8_t> slurp(const fs::path& p) { return io::read_file(p); }

TEST(GenerateScene, SameSeedIsBitIdentical) {
  const SceneConfig c = small_config();
  const auto a = generate_scene(c, 7), b = generate_scene(c, 7);
  ASSERT_EQ(a.frames.size(), b.frames.size());
  for (std::size_t i = 0; i < a.frames.size(); ++i) {
    ASSERT_EQ(a.frames[i].points.rows(), b.frames[i].points.rows());
    EXPECT_EQ(0, std::memcmp(a.frames[i].points.data(), b.frames[i].points.data(),
                             static_cast<std::size_t>(a.frames[i].points.size()) * sizeof(double)));
  }
  const auto c8 = generate_scene(c, 8);
  bool differs = c8.frames[0].points.rows() != a.frames[0].points.rows();
  if (!differs) differs = !c8.frames[0].points.isApprox(a.frames[0].points);
  EXPECT_TRUE(differs);
}

TEST(GenerateScene, ConfigErrors) {
  SceneConfig c = small_config();
  c.actors = 0;
  EXPECT_THROW(generate_scene(c, 1), ConfigError);
  c = small_config();
  c.sweeps = 0;
  EXPECT_THROW(generate_scene(c, 1), ConfigError);
  c = small_config();
  c.sweeps = 21;
  EXPECT_THROW(generate_scene(c, 1), ConfigError);
}

TEST(GenerateScene, FramesAreFiniteWithUnitReflectance) {
  const auto g = generate_scene(small_config(), 3);
  Index total = 0;
  for (const auto& f : g.frames) {
    EXPECT_TRUE(f.points.allFinite());
    if (f.points.rows() == 0) continue;
    EXPECT_GE(f.points.col(3).minCoeff(), 0.0);
    EXPECT_LE(f.points.col(3).maxCoeff(), 1.0);
    total += f.points.rows();
  }
  EXPECT_GT(total, 0);
}

TEST(GenerateScene, TrajectoriesMatchVelocities) {
  const SceneConfig c = small_config();
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const World w = random_world(c, seed);
    for (const auto& t : w.actors) {
      EXPECT_GT(t.length, 0);
      EXPECT_GT(t.width, 0);
      for (std::size_t s = 1; s < t.trajectory.size(); ++s) {
        const Eigen::Vector2d step = t.trajectory[s].pose.translation - t.trajectory[s - 1].pose.translation;
        EXPECT_NEAR((step - t.trajectory[s - 1].velocity * c.sweep_period()).norm(), 0.0, 1e-9);
      }
    }
  }
}

TEST(GenerateScene, StaticWorldSweepsAreIdentical) {
  SceneConfig c = small_config();
  World w = static_ego_world(c.sweeps);
  w.actors.push_back(straight_actor({9, 3}, {0, 0}, 0.4, c.sweeps, c.sweep_period()));
  const auto g = simulate(w, c, 5);
  ASSERT_GT(g.frames[0].points.rows(), 0);
  for (const auto& f : g.frames) {
    const PointFrame aligned = transform_frame(f, g.frames[0].ego_pose);
    ASSERT_EQ(aligned.points.rows(), g.frames[0].points.rows());
    EXPECT_EQ(aligned.points, g.frames[0].points);
  }
}

// Independent occlusion oracle: an actor is fully hidden when every corner
// lies strictly inside the angular sector spanned by the wall's near face and
// beyond the wall's far face.
bool hidden_behind_wall(const BevBox& actor, double wall_near_x, double wall_far_x, double wall_half_y) {
  const double half_angle = std::atan2(wall_half_y, wall_near_x);
  for (const auto& c : actor.corners()) {
    if (c.x() <= wall_far_x) return false;
    if (std::abs(std::atan2(c.y(), c.x())) >= half_angle) return false;
  }
  return true;
}

TEST(GenerateScene, ActorBehindOccluderEmitsNoPoints) {
  SceneConfig c = small_config();
  c.sweeps = 40;
  World w = static_ego_world(c.sweeps);
  Obstacle wall;
  wall.footprint.center = {6.0, 0.0};
  wall.footprint.length = 0.4;
  wall.footprint.width = 4.0;
  wall.height = 3.0;
  w.obstacles.push_back(wall);
  // Crosses the shadow at 4 m/s, 1.8 m wide actor footprint along x, 4 m along y.
  w.actors.push_back(straight_actor({15.0, -2.9}, {0, 4.0}, std::numbers::pi / 2, c.sweeps, c.sweep_period()));

  std::vector<bool> oracle;
  for (int s = 0; s < c.sweeps; ++s) {
    BevBox b;
    b.center = w.actors[0].trajectory[s].pose.translation;
    b.length = 4.0;
    b.width = 2.0;
    b.yaw = w.actors[0].trajectory[s].pose.yaw;
    oracle.push_back(hidden_behind_wall(b, 5.8, 6.2, 2.0));
  }
  for (int s = 10; s < 20; ++s) ASSERT_TRUE(oracle[s]) << s;
  ASSERT_FALSE(oracle[0]);
  ASSERT_FALSE(oracle[39]);

  for (int s = 0; s < c.sweeps; ++s) {
    const SweepHits h = cast_sweep(w, c.sensor, s, 1);
    const auto from_actor = std::count(h.source.begin(), h.source.end(), 0);
    if (oracle[s]) EXPECT_EQ(from_actor, 0) << "sweep " << s;
    EXPECT_GT(std::count(h.source.begin(), h.source.end(), -1), 0);
  }
  const auto last = cast_sweep(w, c.sensor, 39, 1);
  EXPECT_GT(std::count(last.source.begin(), last.source.end(), 0), 0);
}

TEST(GenerateScene, PointsLieOnTheirSourceSurface) {
  const SceneConfig c = small_config();
  const World w = random_world(c, 21);
  for (int s = 0; s < c.sweeps; s += 7) {
    const SweepHits h = cast_sweep(w, c.sensor, s, 21);
    const Pose& ego = w.ego_poses[s];
    for (Index i = 0; i < h.frame.points.rows(); ++i) {
      const Eigen::Vector2d p = ego.apply(h.frame.points.row(i).head<2>().transpose());
      const int src = h.source[static_cast<std::size_t>(i)];
      BevBox b;
      if (src >= 0) {
        const auto& a = w.actors[src];
        b.center = a.trajectory[s].pose.translation;
        b.yaw = a.trajectory[s].pose.yaw;
        b.length = a.length;
        b.width = a.width;
      } else {
        b = w.obstacles[-1 - src].footprint;
      }
      EXPECT_TRUE(b.contains(p, 1e-9));
      EXPECT_FALSE(b.contains(p, -1e-6));
    }
  }
}

TEST(TransformFrame, IdentityLeavesFrameUnchanged) {
  const auto g = generate_scene(small_config(), 4);
  const PointFrame& f = g.frames[3];
  PointFrame id = f;
  id.ego_pose = Pose::identity();
  EXPECT_EQ(transform_frame(id, Pose::identity()).points, id.points);
}

TEST(TransformFrame, TranslationSignConvention) {
  PointFrame f;
  f.points = PointCloud4::Zero(1, 4);
  const PointFrame t = transform_frame(f, Pose(Eigen::Vector2d(1, 0), 0));
  EXPECT_DOUBLE_EQ(t.points(0, 0), -1.0);
  EXPECT_DOUBLE_EQ(t.points(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(t.points(0, 2), 0.0);
}

TEST(TransformFrame, RoundTripAndWorldConsistency) {
  const auto g = generate_scene(small_config(), 4);
  const PointFrame& f = g.frames[5];
  const Pose other({3.0, -1.0}, 1.2);
  PointFrame there = transform_frame(f, other);
  const PointFrame back = transform_frame(there, f.ego_pose);
  EXPECT_LT((back.points - f.points).cwiseAbs().maxCoeff(), 1e-9);

  // A static world point seen from two ego poses.
  const Eigen::Vector2d world(7.0, 2.0);
  const Pose a({0.5, 0.2}, 0.3), b({-2.0, 1.0}, -1.9);
  PointFrame fa, fb;
  fa.ego_pose = a;
  fb.ego_pose = b;
  fa.points = PointCloud4::Zero(1, 4);
  fb.points = PointCloud4::Zero(1, 4);
  fa.points.row(0).head<2>() = a.inverse().apply(world).transpose();
  fb.points.row(0).head<2>() = b.inverse().apply(world).transpose();
  const auto wa = transform_frame(fa, Pose::identity()), wb = transform_frame(fb, Pose::identity());
  EXPECT_LT((wa.points - wb.points).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LT((wa.points.row(0).head<2>().transpose() - world).norm(), 1e-9);
}

TEST(MergeSweeps, SingleSweepAppendsZeroLag) {
  const auto g = generate_scene(small_config(), 4);
  const MergedFrame m = merge_sweeps(std::span(g.frames).subspan(4, 1), 0.05);
  ASSERT_EQ(m.points.rows(), g.frames[4].points.rows());
  EXPECT_EQ(m.keyframe_index, 4);
  EXPECT_EQ(PointCloud4(m.points.leftCols<4>()), g.frames[4].points);
  EXPECT_TRUE((m.points.col(4).array() == 0.0).all());
}

TEST(MergeSweeps, StaticWorldDuplicatesGeometry) {
  SceneConfig c = small_config();
  World w = static_ego_world(c.sweeps);
  w.actors.push_back(straight_actor({8, -4}, {0, 0}, 1.0, c.sweeps, c.sweep_period()));
  const auto g = simulate(w, c, 1);
  const MergedFrame m = merge_sweeps(std::span(g.frames).subspan(0, 2), c.sweep_period());
  const Index n = g.frames[1].points.rows();
  ASSERT_EQ(m.points.rows(), 2 * n);
  EXPECT_EQ(PointCloud4(m.points.topLeftCorner(n, 4)), PointCloud4(m.points.bottomLeftCorner(n, 4)));
  EXPECT_TRUE((m.points.topRightCorner(n, 1).array() == 0.05).all());
  EXPECT_TRUE((m.points.bottomRightCorner(n, 1).array() == 0.0).all());
}

TEST(MergeSweeps, MovingActorClustersSeparateByDisplacement) {
  SceneConfig c = small_config();
  World w = static_ego_world(c.sweeps);
  w.actors.push_back(straight_actor({10, 0}, {10, 0}, 0.0, c.sweeps, c.sweep_period()));
  const auto g = simulate(w, c, 1);
  const MergedFrame m = merge_sweeps(std::span(g.frames).subspan(0, 2), c.sweep_period());
  double min_old = 1e9, min_new = 1e9;
  for (Index i = 0; i < m.points.rows(); ++i) {
    double& slot = m.points(i, 4) > 0 ? min_old : min_new;
    slot = std::min(slot, m.points(i, 0));
  }
  EXPECT_NEAR(min_new - min_old, 0.5, 1e-9);
}

TEST(MergeSweeps, UnorderedFramesAreAContractError) {
  const auto g = generate_scene(small_config(), 4);
  std::vector<PointFrame> frames{g.frames[2], g.frames[1]};
  EXPECT_THROW(merge_sweeps(frames, 0.05), ContractError);
  EXPECT_THROW(merge_sweeps(std::span<const PointFrame>(), 0.05), ContractError);
}

double x_spread(const MergedFrame& m, double max_lag) {
  double lo = 1e9, hi = -1e9;
  for (Index i = 0; i < m.points.rows(); ++i) {
    if (m.points(i, 4) > max_lag + 1e-12) continue;
    lo = std::min(lo, m.points(i, 0));
    hi = std::max(hi, m.points(i, 0));
  }
  return hi - lo;
}

TEST(MergeSweeps, EgoAlignmentRemovesEgoMotion) {
  SceneConfig c = small_config();
  c.sweeps_per_keyframe = 10;
  World w;
  for (int s = 0; s < c.sweeps; ++s) w.ego_poses.emplace_back(Eigen::Vector2d(2.0 * s * c.sweep_period(), 0), 0.0);
  w.actors.push_back(straight_actor({14, 0}, {0, 0}, 0.0, c.sweeps, c.sweep_period()));
  const auto g = simulate(w, c, 1);
  const MergedFrame m = merge_sweeps(std::span(g.frames).subspan(0, 10), c.sweep_period());
  const double single = x_spread(m, 0.0);
  EXPECT_LE(x_spread(m, 1.0), single + 1e-9);
}

TEST(MergeSweeps, MovingActorSpreadGrowsBySpeedTimesWindow) {
  SceneConfig c = small_config();
  c.sweeps_per_keyframe = 10;
  World w;
  for (int s = 0; s < c.sweeps; ++s) w.ego_poses.emplace_back(Eigen::Vector2d(1.0 * s * c.sweep_period(), 0), 0.0);
  const double speed = 10.0;
  w.actors.push_back(straight_actor({9, 0}, {speed, 0}, 0.0, c.sweeps, c.sweep_period()));
  const auto g = simulate(w, c, 1);
  const MergedFrame m = merge_sweeps(std::span(g.frames).subspan(0, 10), c.sweep_period());
  const double window = m.points.col(4).maxCoeff();
  EXPECT_NEAR(window, 9 * c.sweep_period(), 1e-12);
  const double growth = x_spread(m, 1.0) - x_spread(m, 0.0);
  EXPECT_NEAR(growth, speed * window, 0.05 * speed * window);
}

TEST(LabelScene, GroundTruthOnlyOnKeyframes) {
  const SceneConfig c = small_config();
  const Scene s = label_scene(generate_scene(c, 2), c, 0);
  ASSERT_EQ(s.keyframes.size(), static_cast<std::size_t>(c.sweeps / c.sweeps_per_keyframe));
  for (std::size_t k = 0; k < s.keyframes.size(); ++k) {
    EXPECT_EQ(s.keyframes[k].sweep_index, static_cast<std::int64_t>((k + 1) * c.sweeps_per_keyframe - 1));
    for (const auto& b : s.keyframes[k].boxes) {
      EXPECT_LE(std::abs(b.center.x()), c.label_half_extent);
      EXPECT_GT(b.yaw, -std::numbers::pi);
      EXPECT_LE(b.yaw, std::numbers::pi);
      EXPECT_EQ(b.score, 1.0);
    }
  }
}

TEST(LabelScene, BoxesAreInKeyframeEgoFrame) {
  SceneConfig c = small_config();
  World w;
  for (int s = 0; s < c.sweeps; ++s) w.ego_poses.emplace_back(Eigen::Vector2d(0.1 * s, 1.0), 0.5);
  w.actors.push_back(straight_actor({5, 5}, {1, 0}, 0.0, c.sweeps, c.sweep_period()));
  const Scene s = label_scene(simulate(w, c, 1), c, 0);
  const auto& kf = s.keyframes[1];
  ASSERT_EQ(kf.boxes.size(), 1u);
  const Pose& ego = w.ego_poses[kf.sweep_index];
  EXPECT_NEAR((ego.apply(kf.boxes[0].center) - w.actors[0].trajectory[kf.sweep_index].pose.translation).norm(), 0,
              1e-12);
  EXPECT_NEAR(kf.boxes[0].yaw, -0.5, 1e-12);
  EXPECT_NEAR((ego.rotation() * kf.boxes[0].velocity - Eigen::Vector2d(1, 0)).norm(), 0, 1e-12);
}

TEST(Dataset, WriteReadWriteIsByteIdentical) {
  const Dataset ds = generate_dataset(small_config(), 3, 17);
  const fs::path a = temp_dir("pcvd_ds_a"), b = temp_dir("pcvd_ds_b");
  write_dataset(ds, a);
  const Dataset back = read_dataset(a);
  ASSERT_EQ(back.scenes.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.scenes[i].frames.size(), ds.scenes[i].frames.size());
    EXPECT_EQ(back.scenes[i].keyframes.size(), ds.scenes[i].keyframes.size());
    EXPECT_EQ(encode_scene(back.scenes[i]), encode_scene(ds.scenes[i]));
  }
  write_dataset(back, b);
  for (const auto& e : fs::directory_iterator(a)) EXPECT_EQ(slurp(e.path()), slurp(b / e.path().filename()));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Dataset, DeterministicForSeed) {
  const Dataset x = generate_dataset(small_config(), 2, 5), y = generate_dataset(small_config(), 2, 5);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(encode_scene(x.scenes[i]), encode_scene(y.scenes[i]));
}

TEST(Dataset, EmptyDatasetIsValid) {
  Dataset ds;
  ds.meta.classes = {"car"};
  const fs::path p = temp_dir("pcvd_ds_empty");
  write_dataset(ds, p);
  EXPECT_TRUE(read_dataset(p).scenes.empty());
  fs::remove_all(p);
}

TEST(Dataset, SchemaMismatchIsFormatError) {
  const fs::path p = temp_dir("pcvd_ds_schema");
  write_dataset(generate_dataset(small_config(), 1, 1), p);
  std::ifstream in(p / "meta.json");
  std::string text((std::istreambuf_iterator<char>(in)), {});
  in.close();
  text.replace(text.find("pcvd-ds-1"), 9, "pcvd-ds-9");
  std::ofstream(p / "meta.json") << text;
  EXPECT_THROW(read_dataset(p), FormatError);
  fs::remove_all(p);
}

TEST(Dataset, TruncatedSceneReportsOffset) {
  const Scene s = generate_dataset(small_config(), 1, 1).scenes[0];
  const auto bytes = encode_scene(s);
  for (std::size_t n : {std::size_t{3}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(n));
    try {
      decode_scene(cut);
      FAIL() << n;
    } catch (const FormatError& e) {
      EXPECT_LE(e.offset, n);
      EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos);
    }
  }
}

TEST(Dataset, MissingDirectoryIsIoError) { EXPECT_THROW(read_dataset("/nonexistent/pcvd"), IoError); }

}  // namespace
}  // namespace pcvd
