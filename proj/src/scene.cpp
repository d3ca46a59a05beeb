#include "pcvd/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "json.hpp"

#include "pcvd/binary_io.hpp"
#include "pcvd/errors.hpp"
#include "pcvd/rng.hpp"

namespace pcvd {

namespace {

constexpr std::string_view kSceneMagic = "PCVDSCN1";

double deg(double d) { return d * std::numbers::pi / 180.0; }

double bounding_radius(double length, double width) { return 0.5 * std::hypot(length, width); }

}  // namespace

void SceneConfig::validate() const {
  if (actors < 1) throw ConfigError("scene needs at least one actor");
  if (sweeps < 1) throw ConfigError("scene needs at least one sweep");
  if (sweeps_per_keyframe < 1) throw ConfigError("sweeps_per_keyframe must be >= 1");
  if (sweeps % sweeps_per_keyframe != 0)
    throw ConfigError("sweep count " + std::to_string(sweeps) + " is not a multiple of M=" +
                      std::to_string(sweeps_per_keyframe));
  if (sweep_rate_hz <= 0) throw ConfigError("sweep rate must be positive");
  if (classes.empty()) throw ConfigError("class table is empty");
  if (sensor.rings < 1 || sensor.azimuth_resolution_deg <= 0 || sensor.max_range <= 0)
    throw ConfigError("invalid sensor configuration");
  for (const auto& c : classes)
    if (c.length_lo <= 0 || c.width_lo <= 0 || c.length_hi < c.length_lo || c.width_hi < c.width_lo)
      throw ConfigError("class '" + c.name + "' has an invalid size range");
  if (orbit_fraction < 0 || orbit_fraction > 1 || static_fraction < 0 || static_fraction > 1)
    throw ConfigError("actor fractions must lie in [0, 1]");
  if (orbit_fraction > 0 && !(orbit_radius_lo > 0 && orbit_radius_hi >= orbit_radius_lo))
    throw ConfigError("invalid orbit radius range");
  if (!(occluder_range_lo >= 0 && occluder_range_hi >= occluder_range_lo))
    throw ConfigError("invalid occluder range");
}

SweepHits cast_sweep(const World& world, const SensorConfig& sensor, int sweep, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(sweep), 0x5eedULL));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Pose& ego = world.ego_poses.at(static_cast<std::size_t>(sweep));
  const double res = sensor.azimuth_resolution_deg;
  const int beams = static_cast<int>(std::floor(360.0 / res));
  const double phase = sensor.azimuth_jitter ? res * unit(rng) : 0.0;

  struct Target {
    BevBox box;
    double height;
    double reflectance;
    int source;
  };
  std::vector<Target> targets;
  for (std::size_t a = 0; a < world.actors.size(); ++a) {
    const ActorTrack& t = world.actors[a];
    const ActorState& s = t.trajectory.at(static_cast<std::size_t>(sweep));
    BevBox b;
    b.center = s.pose.translation;
    b.length = t.length;
    b.width = t.width;
    b.yaw = s.pose.yaw;
    targets.push_back({b, t.height, t.reflectance, static_cast<int>(a)});
  }
  for (std::size_t o = 0; o < world.obstacles.size(); ++o) {
    const Obstacle& ob = world.obstacles[o];
    targets.push_back({ob.footprint, ob.height, ob.reflectance, -1 - static_cast<int>(o)});
  }

  std::vector<double> tan_elev(static_cast<std::size_t>(sensor.rings));
  for (int r = 0; r < sensor.rings; ++r) {
    const double f = sensor.rings == 1 ? 0.0 : static_cast<double>(r) / (sensor.rings - 1);
    tan_elev[r] = std::tan(deg(sensor.elevation_lo_deg + f * (sensor.elevation_hi_deg - sensor.elevation_lo_deg)));
  }

  std::vector<std::array<double, 4>> pts;
  std::vector<int> source;
  std::vector<std::pair<double, int>> hits;
  for (int k = 0; k < beams; ++k) {
    const double local_az = deg(k * res + phase);
    const double az = ego.yaw + local_az;
    const Eigen::Vector2d dir(std::cos(az), std::sin(az));
    hits.clear();
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const auto& tg = targets[i];
      const double d = ray_box_distance(ego.translation, dir, tg.box.center, tg.box.length, tg.box.width, tg.box.yaw);
      if (d > 0 && d <= sensor.max_range) hits.emplace_back(d, static_cast<int>(i));
    }
    if (hits.empty()) continue;
    std::sort(hits.begin(), hits.end());
    for (int r = 0; r < sensor.rings; ++r) {
      for (const auto& [d, i] : hits) {
        const double z = sensor.mount_height + d * tan_elev[r];
        if (z < 0) break;  // reached the ground first
        if (z > targets[i].height) continue;
        if (sensor.dropout > 0 && unit(rng) < sensor.dropout) break;
        pts.push_back({d * std::cos(local_az), d * std::sin(local_az), z, targets[i].reflectance});
        source.push_back(targets[i].source);
        break;
      }
    }
  }

  SweepHits out;
  out.frame.timestamp_index = sweep;
  out.frame.ego_pose = ego;
  out.frame.points.resize(static_cast<Index>(pts.size()), 4);
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (int c = 0; c < 4; ++c) out.frame.points(static_cast<Index>(i), c) = pts[i][c];
  out.source = std::move(source);
  return out;
}

World random_world(const SceneConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(mix_seed(seed, 0x77077ULL));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  const double dt = config.sweep_period();
  const int n = config.sweeps;

  World w;
  const double ego_speed = uni(config.ego_speed_lo, config.ego_speed_hi);
  const double ego_heading = uni(-0.3, 0.3);
  const Eigen::Vector2d ego_dir(std::cos(ego_heading), std::sin(ego_heading));
  for (int s = 0; s < n; ++s) w.ego_poses.emplace_back(ego_dir * ego_speed * s * dt, ego_heading);

  auto clear_of_ego = [&](const Eigen::Vector2d& c, double radius, double margin) {
    for (const Pose& p : w.ego_poses)
      if ((p.translation - c).norm() < radius + margin) return false;
    return true;
  };
  auto clear_of_obstacles = [&](const Eigen::Vector2d& c, double radius) {
    for (const Obstacle& o : w.obstacles)
      if ((o.footprint.center - c).norm() < radius + bounding_radius(o.footprint.length, o.footprint.width) + 0.3)
        return false;
    return true;
  };

  // Walls face the ego start (tangential, with some jitter); other obstacles are randomly oriented.
  auto place_obstacle = [&](double l, double wd, double h, double rmin, double rmax, bool facing) {
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double ang = uni(-std::numbers::pi, std::numbers::pi), rad = uni(rmin, rmax);
      const double yaw = facing ? ang + std::numbers::pi / 2 + uni(-0.3, 0.3) : uni(-std::numbers::pi, std::numbers::pi);
      const Eigen::Vector2d c(rad * std::cos(ang), rad * std::sin(ang));
      const double br = bounding_radius(l, wd);
      if (!clear_of_ego(c, br, 1.5) || !clear_of_obstacles(c, br)) continue;
      Obstacle ob;
      ob.footprint.center = c;
      ob.footprint.length = l;
      ob.footprint.width = wd;
      ob.footprint.yaw = yaw;
      ob.footprint.class_id = -1;
      ob.height = h;
      ob.reflectance = uni(config.reflectance_lo, config.reflectance_hi);
      w.obstacles.push_back(ob);
      return;
    }
  };
  for (int i = 0; i < config.occluders; ++i) {
    if (unit(rng) < 0.6)
      place_obstacle(uni(3.0, 6.0), 0.4, 3.0, config.occluder_range_lo, config.occluder_range_hi, true);
    else
      place_obstacle(0.8, 0.8, 4.0, config.occluder_range_lo, config.occluder_range_hi, false);
  }
  for (int i = 0; i < config.clutter; ++i) {
    const double side = uni(0.6, 1.2);
    place_obstacle(side, side, uni(0.6, 1.0), 2.0, config.spawn_half_extent, false);
  }

  for (int a = 0; a < config.actors; ++a) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      const int cls = static_cast<int>(rng() % config.classes.size());
      const ClassSpec& spec = config.classes[static_cast<std::size_t>(cls)];
      ActorTrack t;
      t.class_id = cls;
      t.length = uni(spec.length_lo, spec.length_hi);
      t.width = uni(spec.width_lo, spec.width_hi);
      t.height = spec.height;
      t.reflectance = uni(config.reflectance_lo, config.reflectance_hi);
      const bool moving = unit(rng) >= config.static_fraction;
      const double speed = moving ? uni(spec.speed_lo, spec.speed_hi) : 0.0;
      const double heading = uni(-std::numbers::pi, std::numbers::pi);
      const Eigen::Vector2d start(uni(-config.spawn_half_extent, config.spawn_half_extent),
                                  uni(-config.spawn_half_extent, config.spawn_half_extent));
      const Eigen::Vector2d vel = speed * Eigen::Vector2d(std::cos(heading), std::sin(heading));
      const bool orbit = moving && config.orbit_fraction > 0.0 && unit(rng) < config.orbit_fraction;
      double radius = 0.0, omega = 0.0;
      if (orbit) {
        radius = uni(config.orbit_radius_lo, config.orbit_radius_hi);
        omega = (unit(rng) < 0.5 ? -1.0 : 1.0) * speed / radius;
      }
      auto state_at = [&](int s) -> ActorState {
        if (!orbit) return {Pose(start + vel * (s * dt), heading), vel};
        const double phase = heading + omega * s * dt;
        const Eigen::Vector2d radial(std::cos(phase), std::sin(phase));
        const Eigen::Vector2d v = omega * radius * Eigen::Vector2d(-radial.y(), radial.x());
        return {Pose(radius * radial, std::atan2(v.y(), v.x())), v};
      };
      const double br = bounding_radius(t.length, t.width);
      bool ok = true;
      for (int s = 0; s < n && ok; ++s) {
        const Eigen::Vector2d c = state_at(s).pose.translation;
        ok = (w.ego_poses[s].translation - c).norm() > br + 1.5 && clear_of_obstacles(c, br);
        for (const ActorTrack& other : w.actors) {
          if (!ok) break;
          const Eigen::Vector2d oc = other.trajectory[s].pose.translation;
          ok = (oc - c).norm() > br + bounding_radius(other.length, other.width) + 0.5;
        }
      }
      if (!ok) continue;
      for (int s = 0; s < n; ++s) t.trajectory.push_back(state_at(s));
      w.actors.push_back(std::move(t));
      break;
    }
  }
  return w;
}

GeneratedScene simulate(const World& world, const SceneConfig& config, std::uint64_t seed) {
  config.validate();
  GeneratedScene out;
  for (int s = 0; s < config.sweeps; ++s) out.frames.push_back(cast_sweep(world, config.sensor, s, seed).frame);
  out.actors = world.actors;
  out.obstacles = world.obstacles;
  return out;
}

GeneratedScene generate_scene(const SceneConfig& config, std::uint64_t seed) {
  return simulate(random_world(config, seed), config, seed);
}

PointFrame transform_frame(const PointFrame& frame, const Pose& target) {
  const Pose target_from_frame = target.inverse().compose(frame.ego_pose);
  const Eigen::Matrix2d r = target_from_frame.rotation();
  PointFrame out;
  out.timestamp_index = frame.timestamp_index;
  out.ego_pose = target;
  out.points = frame.points;
  const bool same_frame = frame.ego_pose.translation == target.translation && frame.ego_pose.yaw == target.yaw;
  if (frame.points.rows() > 0 && !same_frame) {
    out.points.leftCols<2>() = (frame.points.leftCols<2>() * r.transpose()).rowwise() +
                               target_from_frame.translation.transpose();
  }
  return out;
}

MergedFrame merge_sweeps(std::span<const PointFrame> frames, double sweep_period, std::vector<BevBox> gt) {
  if (frames.empty()) throw ContractError("merge_sweeps needs at least one frame");
  return merge_sweeps(frames, sweep_period, std::move(gt), frames.back().ego_pose);
}

MergedFrame merge_sweeps(std::span<const PointFrame> frames, double sweep_period, std::vector<BevBox> gt,
                         const Pose& reference) {
  if (frames.empty()) throw ContractError("merge_sweeps needs at least one frame");
  for (std::size_t i = 1; i < frames.size(); ++i)
    if (frames[i].timestamp_index <= frames[i - 1].timestamp_index)
      throw ContractError("merge_sweeps: frames must be ordered oldest to keyframe");
  Index total = 0;
  for (const auto& f : frames) total += f.points.rows();
  MergedFrame out;
  out.keyframe_index = frames.back().timestamp_index;
  out.points.resize(total, 5);
  Index row = 0;
  for (const auto& f : frames) {
    const PointFrame aligned = transform_frame(f, reference);
    const Index n = aligned.points.rows();
    if (n == 0) continue;
    out.points.block(row, 0, n, 4) = aligned.points;
    out.points.block(row, 4, n, 1).setConstant(
        static_cast<double>(frames.back().timestamp_index - f.timestamp_index) * sweep_period);
    row += n;
  }
  out.gt_boxes = std::move(gt);
  return out;
}

const PointFrame& Scene::frame_at(std::int64_t sweep_index) const {
  for (const auto& f : frames)
    if (f.timestamp_index == sweep_index) return f;
  throw ContractError("scene " + std::to_string(id) + " has no sweep " + std::to_string(sweep_index));
}

Scene label_scene(const GeneratedScene& generated, const SceneConfig& config, int id) {
  Scene scene;
  scene.id = id;
  scene.frames = generated.frames;
  const int m = config.sweeps_per_keyframe;
  for (int k = 0; k * m + m - 1 < static_cast<int>(generated.frames.size()); ++k) {
    const int sweep = k * m + m - 1;
    const Pose& ego = generated.frames[static_cast<std::size_t>(sweep)].ego_pose;
    KeyframeLabels labels;
    labels.sweep_index = sweep;
    for (std::size_t a = 0; a < generated.actors.size(); ++a) {
      const ActorTrack& t = generated.actors[a];
      const ActorState& s = t.trajectory[static_cast<std::size_t>(sweep)];
      BevBox world_box;
      world_box.center = s.pose.translation;
      world_box.length = t.length;
      world_box.width = t.width;
      world_box.yaw = s.pose.yaw;
      world_box.velocity = s.velocity;
      world_box.class_id = t.class_id;
      world_box.track_id = static_cast<int>(a);
      const BevBox local = transform_box(world_box, Pose::identity(), ego);
      if (std::abs(local.center.x()) <= config.label_half_extent &&
          std::abs(local.center.y()) <= config.label_half_extent)
        labels.boxes.push_back(local);
    }
    scene.keyframes.push_back(std::move(labels));
  }
  return scene;
}

Dataset generate_dataset(const SceneConfig& config, int scene_count, std::uint64_t seed) {
  config.validate();
  Dataset ds;
  ds.meta.sweep_rate_hz = config.sweep_rate_hz;
  ds.meta.sweeps_per_keyframe = config.sweeps_per_keyframe;
  for (const auto& c : config.classes) ds.meta.classes.push_back(c.name);
  for (int i = 0; i < scene_count; ++i) {
    const std::uint64_t scene_seed = mix_seed(seed, static_cast<std::uint64_t>(i));
    ds.scenes.push_back(label_scene(generate_scene(config, scene_seed), config, i));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// archive

std::vector<std::uint8_t> encode_scene(const Scene& scene) {
  io::ByteWriter w;
  w.bytes(kSceneMagic);
  w.u32(static_cast<std::uint32_t>(scene.id));
  w.u32(static_cast<std::uint32_t>(scene.frames.size()));
  for (const auto& f : scene.frames) {
    w.i64(f.timestamp_index);
    w.f64(f.ego_pose.translation.x());
    w.f64(f.ego_pose.translation.y());
    w.f64(f.ego_pose.yaw);
    w.u64(static_cast<std::uint64_t>(f.points.rows()));
    w.raw(f.points.data(), static_cast<std::size_t>(f.points.size()) * sizeof(double));
  }
  w.u32(static_cast<std::uint32_t>(scene.keyframes.size()));
  for (const auto& k : scene.keyframes) {
    w.i64(k.sweep_index);
    w.u64(k.boxes.size());
    for (const auto& b : k.boxes) {
      for (double v : {b.center.x(), b.center.y(), b.length, b.width, b.yaw, b.velocity.x(), b.velocity.y(),
                       static_cast<double>(b.class_id), static_cast<double>(b.track_id)})
        w.f64(v);
    }
  }
  return w.buffer();
}

Scene decode_scene(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes);
  if (r.remaining() < kSceneMagic.size() || r.bytes(kSceneMagic.size()) != kSceneMagic)
    throw FormatError("bad scene magic (expected " + std::string(kSceneMagic) + ")", 0);
  Scene s;
  s.id = static_cast<int>(r.u32());
  const std::uint32_t frames = r.u32();
  for (std::uint32_t i = 0; i < frames; ++i) {
    PointFrame f;
    f.timestamp_index = r.i64();
    const double x = r.f64(), y = r.f64(), yaw = r.f64();
    f.ego_pose = Pose(Eigen::Vector2d(x, y), yaw);
    f.ego_pose.yaw = yaw;  // keep the stored bits exactly
    const std::uint64_t n = r.u64();
    if (n > r.remaining() / (4 * sizeof(double))) throw FormatError("truncated point payload", r.offset());
    f.points.resize(static_cast<Index>(n), 4);
    r.f64s(f.points.data(), n * 4);
    s.frames.push_back(std::move(f));
  }
  const std::uint32_t keys = r.u32();
  for (std::uint32_t i = 0; i < keys; ++i) {
    KeyframeLabels k;
    k.sweep_index = r.i64();
    const std::uint64_t n = r.u64();
    if (n > r.remaining() / (9 * sizeof(double))) throw FormatError("truncated box records", r.offset());
    for (std::uint64_t j = 0; j < n; ++j) {
      BevBox b;
      b.center.x() = r.f64();
      b.center.y() = r.f64();
      b.length = r.f64();
      b.width = r.f64();
      b.yaw = r.f64();
      b.velocity.x() = r.f64();
      b.velocity.y() = r.f64();
      b.class_id = static_cast<int>(r.f64());
      b.track_id = static_cast<int>(r.f64());
      k.boxes.push_back(b);
    }
    s.keyframes.push_back(std::move(k));
  }
  if (!r.at_end()) throw FormatError("trailing bytes in scene file", r.offset());
  return s;
}

namespace {
std::string scene_file_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04zu.bin", i);
  return buf;
}
}  // namespace

void write_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json meta;
  meta["schema"] = kDatasetSchema;
  meta["sweep_rate_hz"] = dataset.meta.sweep_rate_hz;
  meta["sweeps_per_keyframe"] = dataset.meta.sweeps_per_keyframe;
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t i = 0; i < dataset.meta.classes.size(); ++i)
    classes.push_back({{"id", i}, {"name", dataset.meta.classes[i]}});
  meta["classes"] = classes;
  nlohmann::json scenes = nlohmann::json::array();
  for (std::size_t i = 0; i < dataset.scenes.size(); ++i) {
    const auto& sc = dataset.scenes[i];
    scenes.push_back({{"file", scene_file_name(i)}, {"frames", sc.frames.size()}, {"keyframes", sc.keyframes.size()}});
    io::write_file(dir / scene_file_name(i), encode_scene(sc));
  }
  meta["scenes"] = scenes;
  std::ofstream out(dir / "meta.json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "meta.json").string());
  out << meta.dump(2) << '\n';
}

Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "meta.json");
  if (!in) throw IoError("cannot open " + (dir / "meta.json").string());
  nlohmann::json meta;
  try {
    in >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("meta.json: ") + e.what(), 0);
  }
  if (meta.value("schema", "") != kDatasetSchema)
    throw FormatError("dataset schema mismatch: expected " + std::string(kDatasetSchema) + ", got '" +
                          meta.value("schema", "") + "'",
                      0);
  Dataset ds;
  try {
    ds.meta.sweep_rate_hz = meta.at("sweep_rate_hz").get<double>();
    ds.meta.sweeps_per_keyframe = meta.at("sweeps_per_keyframe").get<int>();
    for (const auto& c : meta.at("classes")) ds.meta.classes.push_back(c.at("name").get<std::string>());
    for (const auto& s : meta.at("scenes")) {
      Scene scene = decode_scene(io::read_file(dir / s.at("file").get<std::string>()));
      if (scene.frames.size() != s.at("frames").get<std::size_t>() ||
          scene.keyframes.size() != s.at("keyframes").get<std::size_t>())
        throw FormatError("scene " + s.at("file").get<std::string>() + " disagrees with meta.json counts", 0);
      ds.scenes.push_back(std::move(scene));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("meta.json: ") + e.what(), 0);
  }
  return ds;
}

}  // namespace pcvd
