#include "pcvd/config.hpp"

#include <fstream>
#include <set>

#include "pcvd/errors.hpp"

namespace pcvd {

namespace {

const std::vector<std::pair<Variant, std::string>>& variant_table() {
  static const std::vector<std::pair<Variant, std::string>> table{
      {Variant::SingleFrame, "single-frame"},   {Variant::ConcatBaseline, "concat-baseline"},
      {Variant::GmpOnly, "gmp-only"},           {Variant::ConvGru, "convgru"},
      {Variant::StaGru, "sta-gru"},             {Variant::TtaGru, "tta-gru"},
      {Variant::AstGru, "ast-gru"},             {Variant::AstGruOffline, "ast-gru-offline"},
  };
  return table;
}

// Reads optional members into existing defaults and rejects unknown keys.
class Reader {
 public:
  Reader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be an object");
  }
  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, _] : j_.items())
      if (!seen_.count(key)) throw ConfigError("unknown config key " + path_ + "." + key);
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("bad value for " + path_ + "." + key + ": " + e.what());
    }
  }
  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const nlohmann::json& at(const std::string& key) const { return j_.at(key); }
  std::string path(const std::string& key) const { return path_ + "." + key; }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_sensor(const nlohmann::json& j, SensorConfig& s) {
  Reader r(j, "data.scene.sensor");
  r.get("rings", s.rings);
  r.get("elevation_lo_deg", s.elevation_lo_deg);
  r.get("elevation_hi_deg", s.elevation_hi_deg);
  r.get("mount_height", s.mount_height);
  r.get("azimuth_resolution_deg", s.azimuth_resolution_deg);
  r.get("max_range", s.max_range);
  r.get("dropout", s.dropout);
  r.get("azimuth_jitter", s.azimuth_jitter);
}

void read_class(const nlohmann::json& j, ClassSpec& c) {
  Reader r(j, "data.scene.classes[]");
  r.get("name", c.name);
  r.get("length_lo", c.length_lo);
  r.get("length_hi", c.length_hi);
  r.get("width_lo", c.width_lo);
  r.get("width_hi", c.width_hi);
  r.get("height", c.height);
  r.get("speed_lo", c.speed_lo);
  r.get("speed_hi", c.speed_hi);
}

void read_scene(const nlohmann::json& j, SceneConfig& s) {
  Reader r(j, "data.scene");
  r.get("sweeps", s.sweeps);
  r.get("sweeps_per_keyframe", s.sweeps_per_keyframe);
  r.get("sweep_rate_hz", s.sweep_rate_hz);
  r.get("actors", s.actors);
  r.get("static_fraction", s.static_fraction);
  r.get("orbit_fraction", s.orbit_fraction);
  r.get("orbit_radius_lo", s.orbit_radius_lo);
  r.get("orbit_radius_hi", s.orbit_radius_hi);
  r.get("ego_speed_lo", s.ego_speed_lo);
  r.get("ego_speed_hi", s.ego_speed_hi);
  r.get("occluders", s.occluders);
  r.get("occluder_range_lo", s.occluder_range_lo);
  r.get("occluder_range_hi", s.occluder_range_hi);
  r.get("clutter", s.clutter);
  r.get("spawn_half_extent", s.spawn_half_extent);
  r.get("label_half_extent", s.label_half_extent);
  r.get("reflectance_lo", s.reflectance_lo);
  r.get("reflectance_hi", s.reflectance_hi);
  if (r.has("classes")) {
    const auto& list = r.at("classes");
    if (!list.is_array() || list.empty()) throw ConfigError("data.scene.classes must be a non-empty array");
    s.classes.clear();
    for (const auto& c : list) {
      ClassSpec spec;
      read_class(c, spec);
      s.classes.push_back(spec);
    }
  }
  if (r.has("sensor")) read_sensor(r.at("sensor"), s.sensor);
}

void read_grid(const nlohmann::json& j, GridSpec& g) {
  Reader r(j, "model.grid");
  r.get("x_min", g.x_min);
  r.get("x_max", g.x_max);
  r.get("y_min", g.y_min);
  r.get("y_max", g.y_max);
  r.get("dx", g.dx);
  r.get("dy", g.dy);
  r.get("max_points", g.max_points);
  r.get("max_grids", g.max_grids);
}

void read_blocks(const nlohmann::json& j, std::vector<BlockSpec>& blocks) {
  if (!j.is_array()) throw ConfigError("model.blocks must be an array");
  blocks.clear();
  for (const auto& b : j) {
    Reader r(b, "model.blocks[]");
    BlockSpec spec;
    r.get("stride", spec.stride);
    r.get("kernel", spec.kernel);
    r.get("channels", spec.channels);
    r.get("layers", spec.layers);
    blocks.push_back(spec);
  }
}

nlohmann::json scene_json(const SceneConfig& s) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : s.classes)
    classes.push_back({{"name", c.name},
                       {"length_lo", c.length_lo},
                       {"length_hi", c.length_hi},
                       {"width_lo", c.width_lo},
                       {"width_hi", c.width_hi},
                       {"height", c.height},
                       {"speed_lo", c.speed_lo},
                       {"speed_hi", c.speed_hi}});
  return {{"sweeps", s.sweeps},
          {"sweeps_per_keyframe", s.sweeps_per_keyframe},
          {"sweep_rate_hz", s.sweep_rate_hz},
          {"actors", s.actors},
          {"static_fraction", s.static_fraction},
          {"orbit_fraction", s.orbit_fraction},
          {"orbit_radius_lo", s.orbit_radius_lo},
          {"orbit_radius_hi", s.orbit_radius_hi},
          {"ego_speed_lo", s.ego_speed_lo},
          {"ego_speed_hi", s.ego_speed_hi},
          {"occluders", s.occluders},
          {"occluder_range_lo", s.occluder_range_lo},
          {"occluder_range_hi", s.occluder_range_hi},
          {"clutter", s.clutter},
          {"spawn_half_extent", s.spawn_half_extent},
          {"label_half_extent", s.label_half_extent},
          {"reflectance_lo", s.reflectance_lo},
          {"reflectance_hi", s.reflectance_hi},
          {"classes", classes},
          {"sensor",
           {{"rings", s.sensor.rings},
            {"elevation_lo_deg", s.sensor.elevation_lo_deg},
            {"elevation_hi_deg", s.sensor.elevation_hi_deg},
            {"mount_height", s.sensor.mount_height},
            {"azimuth_resolution_deg", s.sensor.azimuth_resolution_deg},
            {"max_range", s.sensor.max_range},
            {"dropout", s.sensor.dropout},
            {"azimuth_jitter", s.sensor.azimuth_jitter}}}};
}

}  // namespace

std::string variant_name(Variant v) {
  for (const auto& [k, name] : variant_table())
    if (k == v) return name;
  throw ContractError("unknown variant");
}

Variant parse_variant(const std::string& name) {
  for (const auto& [k, n] : variant_table())
    if (n == name) return k;
  throw ConfigError("unknown variant '" + name + "'");
}

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v = [] {
    std::vector<Variant> out;
    for (const auto& [k, _] : variant_table()) out.push_back(k);
    return out;
  }();
  return v;
}

bool is_video(Variant v) {
  return v != Variant::SingleFrame && v != Variant::ConcatBaseline && v != Variant::GmpOnly;
}

bool uses_gmpnet(Variant v) { return v != Variant::SingleFrame && v != Variant::ConcatBaseline; }

int RunConfig::effective_keyframes() const { return is_video(variant) ? model.keyframes : 1; }
int RunConfig::effective_sweeps() const { return variant == Variant::SingleFrame ? 1 : model.sweeps; }
int RunConfig::effective_steps() const { return uses_gmpnet(variant) ? model.steps : 0; }

void RunConfig::validate() const {
  data.scene.validate();
  model.grid.validate();
  validate_blocks(model.blocks);
  if (model.grid.dx != model.grid.dy) throw ConfigError("grid cells must be square (dx == dy)");
  if (data.train_scenes < 1 || data.eval_scenes < 1) throw ConfigError("need at least one train and one eval scene");
  if (model.keyframes < 1) throw ConfigError("keyframes (T) must be >= 1");
  if (model.sweeps < 1) throw ConfigError("sweeps (M) must be >= 1");
  if (model.sweeps > data.scene.sweeps_per_keyframe)
    throw ConfigError("sweeps (M) exceeds the dataset's sweeps per keyframe");
  if (variant == Variant::AstGruOffline && model.keyframes < 2) throw ConfigError("offline mode requires T >= 2");
  const int available = data.scene.sweeps / data.scene.sweeps_per_keyframe;
  if (available < model.keyframes + 1)
    throw ConfigError("scenes have " + std::to_string(available) + " keyframes, need at least T + 1");
  if (model.point_channels < 1 || model.message_channels < 1 || model.head_hidden < 1)
    throw ConfigError("channel counts must be positive");
  if (model.neighbors < 1) throw ConfigError("neighbors (K) must be >= 1");
  if (model.steps < 0) throw ConfigError("steps (S) must be >= 0");
  if (model.max_nodes < 2) throw ConfigError("max_nodes must be >= 2");
  if (model.tta_layers < 1) throw ConfigError("tta_layers must be >= 1");
  Index stride = 1;
  Index channels = 0;
  for (const auto& b : model.blocks) {
    stride *= b.stride;
    channels += b.channels;
  }
  if (model.grid.width() % stride != 0 || model.grid.height() % stride != 0)
    throw ConfigError("grid extent must be divisible by the backbone's total stride");
  if (channels % 2 != 0) throw ConfigError("backbone output channels must be even");
  if (train.stage1_epochs < 0 || train.stage2_epochs < 0) throw ConfigError("epochs must be >= 0");
  if (!(train.stage1_lr > 0) || !(train.stage2_lr > 0)) throw ConfigError("learning rates must be positive");
  if (!(train.beta1 >= 0 && train.beta1 < 1) || !(train.beta2 >= 0 && train.beta2 < 1))
    throw ConfigError("betas must lie in [0, 1)");
  if (!(train.reg_weight >= 0) || !(train.velocity_weight >= 0)) throw ConfigError("loss weights must be >= 0");
  if (!(eval.threshold_scale > 0)) throw ConfigError("threshold_scale must be positive");
  if (!(eval.occlusion_distance > 0) || !(eval.occlusion_score >= 0 && eval.occlusion_score < 1))
    throw ConfigError("invalid occlusion operating point");
  if (ablate_seeds.empty()) throw ConfigError("ablate_seeds must not be empty");
}

RunConfig parse_config(const nlohmann::json& j) {
  RunConfig c;
  Reader r(j, "config");
  std::string schema;
  r.get("schema", schema);
  if (schema != kConfigSchema) throw ConfigError("config schema must be \"pcvd-cfg-1\", got \"" + schema + "\"");
  std::string variant = variant_name(c.variant);
  r.get("variant", variant);
  c.variant = parse_variant(variant);
  r.get("seed", c.seed);
  std::string out = c.out.string();
  r.get("out", out);
  c.out = out;
  if (r.has("data")) {
    Reader d(r.at("data"), "data");
    std::string dir = c.data.dir.string();
    d.get("dir", dir);
    c.data.dir = dir;
    d.get("train_scenes", c.data.train_scenes);
    d.get("eval_scenes", c.data.eval_scenes);
    d.get("seed", c.data.seed);
    d.get("min_visible_points", c.data.min_visible_points);
    if (d.has("scene")) read_scene(d.at("scene"), c.data.scene);
  }
  if (r.has("model")) {
    Reader m(r.at("model"), "model");
    m.get("keyframes", c.model.keyframes);
    m.get("sweeps", c.model.sweeps);
    if (m.has("grid")) read_grid(m.at("grid"), c.model.grid);
    m.get("point_channels", c.model.point_channels);
    m.get("message_channels", c.model.message_channels);
    m.get("neighbors", c.model.neighbors);
    m.get("steps", c.model.steps);
    m.get("max_nodes", c.model.max_nodes);
    if (m.has("blocks")) read_blocks(m.at("blocks"), c.model.blocks);
    m.get("head_hidden", c.model.head_hidden);
    m.get("tta_layers", c.model.tta_layers);
    m.get("tta_motion_map", c.model.tta_motion_map);
  }
  if (r.has("train")) {
    Reader t(r.at("train"), "train");
    t.get("stage1_epochs", c.train.stage1_epochs);
    t.get("stage2_epochs", c.train.stage2_epochs);
    t.get("stage1_lr", c.train.stage1_lr);
    t.get("stage2_lr", c.train.stage2_lr);
    t.get("beta1", c.train.beta1);
    t.get("beta2", c.train.beta2);
    t.get("eps", c.train.eps);
    t.get("grad_clip", c.train.grad_clip);
    t.get("reg_weight", c.train.reg_weight);
    t.get("velocity_weight", c.train.velocity_weight);
    t.get("flip_augment", c.train.flip_augment);
  }
  if (r.has("eval")) {
    Reader e(r.at("eval"), "eval");
    e.get("threshold_scale", c.eval.threshold_scale);
    e.get("score_threshold", c.eval.decode.score_threshold);
    e.get("nms_iou", c.eval.decode.nms_iou);
    e.get("max_out", c.eval.decode.max_out);
    e.get("occlusion_score", c.eval.occlusion_score);
    e.get("occlusion_distance", c.eval.occlusion_distance);
  }
  if (r.has("ablate")) {
    Reader a(r.at("ablate"), "ablate");
    std::vector<std::string> names;
    a.get("variants", names);
    c.ablate_variants.clear();
    for (const auto& n : names) c.ablate_variants.push_back(parse_variant(n));
    a.get("seeds", c.ablate_seeds);
  }
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : c.model.blocks)
    blocks.push_back({{"stride", b.stride}, {"kernel", b.kernel}, {"channels", b.channels}, {"layers", b.layers}});
  std::vector<std::string> variants;
  for (Variant v : c.ablate_variants) variants.push_back(variant_name(v));
  const GridSpec& g = c.model.grid;
  return {
      {"schema", kConfigSchema},
      {"variant", variant_name(c.variant)},
      {"seed", c.seed},
      {"out", c.out.string()},
      {"data",
       {{"dir", c.data.dir.string()},
        {"train_scenes", c.data.train_scenes},
        {"eval_scenes", c.data.eval_scenes},
        {"seed", c.data.seed},
        {"min_visible_points", c.data.min_visible_points},
        {"scene", scene_json(c.data.scene)}}},
      {"model",
       {{"keyframes", c.model.keyframes},
        {"sweeps", c.model.sweeps},
        {"grid",
         {{"x_min", g.x_min},
          {"x_max", g.x_max},
          {"y_min", g.y_min},
          {"y_max", g.y_max},
          {"dx", g.dx},
          {"dy", g.dy},
          {"max_points", g.max_points},
          {"max_grids", g.max_grids}}},
        {"point_channels", c.model.point_channels},
        {"message_channels", c.model.message_channels},
        {"neighbors", c.model.neighbors},
        {"steps", c.model.steps},
        {"max_nodes", c.model.max_nodes},
        {"blocks", blocks},
        {"head_hidden", c.model.head_hidden},
        {"tta_layers", c.model.tta_layers},
        {"tta_motion_map", c.model.tta_motion_map}}},
      {"train",
       {{"stage1_epochs", c.train.stage1_epochs},
        {"stage2_epochs", c.train.stage2_epochs},
        {"stage1_lr", c.train.stage1_lr},
        {"stage2_lr", c.train.stage2_lr},
        {"beta1", c.train.beta1},
        {"beta2", c.train.beta2},
        {"eps", c.train.eps},
        {"grad_clip", c.train.grad_clip},
        {"reg_weight", c.train.reg_weight},
        {"velocity_weight", c.train.velocity_weight},
        {"flip_augment", c.train.flip_augment}}},
      {"eval",
       {{"threshold_scale", c.eval.threshold_scale},
        {"score_threshold", c.eval.decode.score_threshold},
        {"nms_iou", c.eval.decode.nms_iou},
        {"max_out", c.eval.decode.max_out},
        {"occlusion_score", c.eval.occlusion_score},
        {"occlusion_distance", c.eval.occlusion_distance}}},
      {"ablate", {{"variants", variants}, {"seeds", c.ablate_seeds}}},
  };
}

}  // namespace pcvd
