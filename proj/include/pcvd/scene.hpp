#pragma once

// Deterministic synthetic LiDAR-video generator: a planar world of moving
// boxes and static occluders observed by a ring scanner on a moving ego.
// Sweeps run at a fixed clock; every M-th sweep is a labeled keyframe.

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pcvd/geometry.hpp"

namespace pcvd {

using Index = Eigen::Index;
using PointCloud4 = Eigen::Matrix<double, Eigen::Dynamic, 4, Eigen::RowMajor>;  // x y z r
using PointCloud5 = Eigen::Matrix<double, Eigen::Dynamic, 5, Eigen::RowMajor>;  // x y z r dt

/// One sweep in its own sensor frame.
struct PointFrame {
  std::int64_t timestamp_index = 0;
  Pose ego_pose;
  PointCloud4 points;
};

/// M sweeps concatenated in one reference frame with a time-lag channel.
struct MergedFrame {
  std::int64_t keyframe_index = 0;
  PointCloud5 points;
  std::vector<BevBox> gt_boxes;
};

struct ActorState {
  Pose pose;
  Eigen::Vector2d velocity = Eigen::Vector2d::Zero();
};

struct ActorTrack {
  int class_id = 0;
  double length = 4.0;
  double width = 2.0;
  double height = 1.5;
  double reflectance = 0.5;
  std::vector<ActorState> trajectory;  // one state per sweep, world frame
};

/// Unlabeled static geometry (walls, poles, vegetation).
struct Obstacle {
  BevBox footprint;
  double height = 3.0;
  double reflectance = 0.5;
};

struct ClassSpec {
  std::string name;
  double length_lo = 4.0, length_hi = 4.8;
  double width_lo = 1.7, width_hi = 2.0;
  double height = 1.5;
  double speed_lo = 0.0, speed_hi = 8.0;
};

struct SensorConfig {
  int rings = 4;
  double elevation_lo_deg = -6.0;
  double elevation_hi_deg = 0.0;
  double mount_height = 1.8;
  double azimuth_resolution_deg = 1.0;
  double max_range = 25.0;
  double dropout = 0.0;  // per-return drop probability
  bool azimuth_jitter = false;  // random beam phase in [0, resolution) per sweep
};

struct SceneConfig {
  int sweeps = 60;               // multiple of sweeps_per_keyframe
  int sweeps_per_keyframe = 10;  // M
  double sweep_rate_hz = 20.0;
  int actors = 8;
  std::vector<ClassSpec> classes{{"car", 4.0, 4.8, 1.7, 2.0, 1.5, 0.0, 8.0}};
  double static_fraction = 0.3;
  double orbit_fraction = 0.0;  // moving actors circling the ego start instead of driving straight
  double orbit_radius_lo = 7.0;
  double orbit_radius_hi = 12.0;
  double ego_speed_lo = 0.0;
  double ego_speed_hi = 2.0;
  int occluders = 4;
  double occluder_range_lo = 3.0;  // distance of occluder centres from the ego start
  double occluder_range_hi = 8.0;
  int clutter = 0;
  double spawn_half_extent = 14.0;  // actors start inside this square around the ego start
  double label_half_extent = 12.0;  // keyframe labels cover this square around the keyframe ego
  double reflectance_lo = 0.2;
  double reflectance_hi = 0.9;
  SensorConfig sensor;

  double sweep_period() const { return 1.0 / sweep_rate_hz; }
  /// Throws ConfigError when the configuration cannot produce a scene.
  void validate() const;
};

struct World {
  std::vector<Pose> ego_poses;  // per sweep
  std::vector<ActorTrack> actors;
  std::vector<Obstacle> obstacles;
};

/// Sweep plus the object each point came from: actor index >= 0, obstacle -1 - index.
struct SweepHits {
  PointFrame frame;
  std::vector<int> source;
};

SweepHits cast_sweep(const World& world, const SensorConfig& sensor, int sweep, std::uint64_t seed);

World random_world(const SceneConfig& config, std::uint64_t seed);

struct GeneratedScene {
  std::vector<PointFrame> frames;
  std::vector<ActorTrack> actors;
  std::vector<Obstacle> obstacles;
};

GeneratedScene generate_scene(const SceneConfig& config, std::uint64_t seed);
GeneratedScene simulate(const World& world, const SceneConfig& config, std::uint64_t seed);

/// Points re-expressed in `target`'s frame. Pure translation (1, 0) maps the
/// origin of an identity-posed frame to (-1, 0).
PointFrame transform_frame(const PointFrame& frame, const Pose& target);

/// Merges frames (oldest first, keyframe last) into the keyframe's ego frame.
/// dt = (keyframe time - sweep time).
MergedFrame merge_sweeps(std::span<const PointFrame> frames, double sweep_period, std::vector<BevBox> gt = {});
/// Same, but expressed in `reference` (a world_from_ego pose); gt must already be in that frame.
MergedFrame merge_sweeps(std::span<const PointFrame> frames, double sweep_period, std::vector<BevBox> gt,
                         const Pose& reference);

struct KeyframeLabels {
  std::int64_t sweep_index = 0;
  std::vector<BevBox> boxes;  // in the keyframe's ego frame
};

struct Scene {
  int id = 0;
  std::vector<PointFrame> frames;
  std::vector<KeyframeLabels> keyframes;

  const PointFrame& frame_at(std::int64_t sweep_index) const;
};

/// Ground truth for every keyframe: actors whose centre lies inside the label square.
Scene label_scene(const GeneratedScene& generated, const SceneConfig& config, int id);

inline constexpr std::string_view kDatasetSchema = "pcvd-ds-1";

struct DatasetMeta {
  double sweep_rate_hz = 20.0;
  int sweeps_per_keyframe = 10;
  std::vector<std::string> classes;
};

struct Dataset {
  DatasetMeta meta;
  std::vector<Scene> scenes;
};

Dataset generate_dataset(const SceneConfig& config, int scene_count, std::uint64_t seed);

/// Directory with meta.json plus one little-endian scene_NNNN.bin per scene.
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

std::vector<std::uint8_t> encode_scene(const Scene& scene);
Scene decode_scene(const std::vector<std::uint8_t>& bytes);

}  // namespace pcvd
