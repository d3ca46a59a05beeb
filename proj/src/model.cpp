#include "pcvd/model.hpp"

#include <algorithm>

#include "pcvd/errors.hpp"
#include "pcvd/rng.hpp"

namespace pcvd {

namespace {

std::span<const PointFrame> keyframe_sweeps(const Scene& scene, int k, int per_keyframe, int m) {
  const auto end = static_cast<std::size_t>(k * per_keyframe + per_keyframe);
  if (end > scene.frames.size()) throw ContractError("keyframe " + std::to_string(k) + " exceeds the scene");
  return std::span<const PointFrame>(scene.frames).subspan(end - static_cast<std::size_t>(m),
                                                           static_cast<std::size_t>(m));
}

const Pose& keyframe_pose(const Scene& scene, int k) {
  return scene.frame_at(scene.keyframes[static_cast<std::size_t>(k)].sweep_index).ego_pose;
}

BevBox flip_box(BevBox b) {
  b.center.y() = -b.center.y();
  b.yaw = wrap_angle(-b.yaw);
  b.velocity.y() = -b.velocity.y();
  return b;
}

}  // namespace

std::map<int, int> keyframe_visibility(const Scene& scene, int k, int sweeps_per_keyframe, double sweep_period,
                                       int sweeps) {
  const auto& boxes = scene.keyframes[static_cast<std::size_t>(k)].boxes;
  const MergedFrame merged = merge_sweeps(keyframe_sweeps(scene, k, sweeps_per_keyframe, sweeps), sweep_period);
  std::map<int, int> counts;
  for (const auto& b : boxes) counts[b.track_id] = 0;
  for (Index i = 0; i < merged.points.rows(); ++i) {
    const Eigen::Vector2d p(merged.points(i, 0), merged.points(i, 1));
    const double dt = merged.points(i, 4);
    for (const auto& b : boxes) {
      BevBox past = b;
      past.center -= b.velocity * dt;
      if (past.contains(p, 0.1)) {
        ++counts[b.track_id];
        break;
      }
    }
  }
  return counts;
}

LabeledScene label_with_visibility(const Scene& scene, const DatasetMeta& meta, int min_points) {
  LabeledScene out;
  out.scene = &scene;
  const int n = static_cast<int>(scene.keyframes.size());
  const double period = 1.0 / meta.sweep_rate_hz;
  for (int k = 0; k < n; ++k) {
    out.visibility.push_back(keyframe_visibility(scene, k, meta.sweeps_per_keyframe, period, meta.sweeps_per_keyframe));
    out.sweep_visibility.push_back(keyframe_visibility(scene, k, meta.sweeps_per_keyframe, period, 1));
  }
  for (int k = 0; k < n; ++k) {
    std::vector<BevBox> kept;
    for (const auto& b : scene.keyframes[static_cast<std::size_t>(k)].boxes) {
      int seen = 0;
      for (int j = std::max(0, k - 1); j <= std::min(n - 1, k + 1); ++j) {
        const auto& vis = out.visibility[static_cast<std::size_t>(j)];
        const auto it = vis.find(b.track_id);
        if (it != vis.end()) seen += it->second;
      }
      if (seen >= min_points) kept.push_back(b);
    }
    out.labels.push_back(std::move(kept));
  }
  return out;
}

std::vector<int> keyframe_window(const RunConfig& config, int k) {
  const int t = config.effective_keyframes();
  const int future = config.variant == Variant::AstGruOffline ? t / 2 : 0;
  std::vector<int> w;
  for (int j = k - (t - 1 - future); j <= k + future; ++j) w.push_back(j);
  return w;
}

std::vector<int> evaluable_keyframes(const RunConfig& config, int keyframe_count) {
  const int t = config.model.keyframes;
  std::vector<int> ks;
  for (int k = t - 1; k <= keyframe_count - 1 - t / 2; ++k) ks.push_back(k);
  return ks;
}

MapGeometry output_geometry(const RunConfig& config) {
  const GridSpec& g = config.model.grid;
  const Index stride = config.model.blocks.front().stride;
  MapGeometry geom;
  geom.x_min = g.x_min;
  geom.y_min = g.y_min;
  geom.cell = g.dx * static_cast<double>(stride);
  geom.height = g.height() / stride;
  geom.width = g.width() / stride;
  geom.num_classes = static_cast<Index>(config.data.scene.classes.size());
  return geom;
}

Sample make_sample(const RunConfig& config, const LabeledScene& scene, const DatasetMeta& meta, int scene_index,
                   int k, bool flip) {
  const Scene& s = *scene.scene;
  const int keyframes = static_cast<int>(s.keyframes.size());
  const std::vector<int> window = keyframe_window(config, k);
  if (window.front() < 0 || window.back() >= keyframes)
    throw ContractError("keyframe window around " + std::to_string(k) + " leaves the scene");
  const MapGeometry geom = output_geometry(config);
  const Pose& reference = keyframe_pose(s, k);
  const double period = 1.0 / meta.sweep_rate_hz;
  const int steps = config.effective_steps();

  Sample out;
  out.scene = scene_index;
  out.keyframe = k;
  out.flipped = flip;
  for (std::size_t i = 0; i < window.size(); ++i) {
    const int j = window[i];
    if (j == k) out.eval_pos = static_cast<int>(i);
    std::vector<BevBox> boxes;
    for (const auto& b : scene.labels[static_cast<std::size_t>(j)])
      boxes.push_back(transform_box(b, keyframe_pose(s, j), reference));
    MergedFrame merged = merge_sweeps(keyframe_sweeps(s, j, meta.sweeps_per_keyframe, config.effective_sweeps()),
                                      period, boxes, reference);
    if (flip) {
      merged.points.col(1) *= -1.0;
      for (auto& b : boxes) b = flip_box(b);
    }
    FrameInput f;
    const std::uint64_t seed = mix_seed(config.data.seed, 0xf4a3eULL, scene_index, k, j, flip);
    f.grids = voxelize(merged.points, config.model.grid, seed);
    if (f.grids.size() > config.model.max_nodes)
      f.grids = select_grids(f.grids, farthest_point_sample(f.grids, config.model.max_nodes, seed));
    if (steps > 0 && f.grids.size() >= 2)
      f.graph = build_knn_graph(f.grids, std::min(config.model.neighbors, f.grids.size() - 1));
    out.frames.push_back(std::move(f));
    out.targets.push_back(make_targets(boxes, geom));
    out.boxes.push_back(std::move(boxes));
  }
  return out;
}

std::vector<Sample> make_samples(const RunConfig& config, const std::vector<LabeledScene>& scenes,
                                 const DatasetMeta& meta, bool with_flips) {
  std::vector<Sample> out;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const int keyframes = static_cast<int>(scenes[i].scene->keyframes.size());
    for (int k : evaluable_keyframes(config, keyframes)) {
      out.push_back(make_sample(config, scenes[i], meta, static_cast<int>(i), k, false));
      if (with_flips) out.push_back(make_sample(config, scenes[i], meta, static_cast<int>(i), k, true));
    }
  }
  return out;
}

Model Model::init(const RunConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.variant = config.variant;
  m.steps = config.effective_steps();
  m.grid = config.model.grid;
  m.geometry = output_geometry(config);
  const ModelConfig& mc = config.model;
  std::mt19937_64 rng_encoder(mix_seed(seed, 1));
  std::mt19937_64 rng_gmp(mix_seed(seed, 2));
  std::mt19937_64 rng_backbone(mix_seed(seed, 3));
  std::mt19937_64 rng_forward(mix_seed(seed, 4));
  std::mt19937_64 rng_backward(mix_seed(seed, 5));
  std::mt19937_64 rng_head(mix_seed(seed, 6));
  m.pointnet = PointNetParams::init(mc.point_channels, rng_encoder);
  if (m.steps > 0) m.gmp = GmpParams::init(mc.point_channels, mc.message_channels, rng_gmp);
  m.backbone = BackboneParams::init(mc.point_channels, mc.blocks, rng_backbone);
  const Index c = m.backbone.out_channels();
  if (is_video(config.variant)) {
    const bool sta = config.variant == Variant::StaGru || config.variant == Variant::AstGru ||
                     config.variant == Variant::AstGruOffline;
    const bool tta = config.variant == Variant::TtaGru || config.variant == Variant::AstGru ||
                     config.variant == Variant::AstGruOffline;
    m.forward_unit = AstGruParams::init(c, sta, tta, mc.tta_layers, rng_forward, mc.tta_motion_map);
    if (config.variant == Variant::AstGruOffline)
      m.backward_unit = AstGruParams::init(c, sta, tta, mc.tta_layers, rng_backward, mc.tta_motion_map);
    // Spatial attention starts as its residual identity so the stage-1 features pass through unchanged.
    for (auto* unit : {&m.forward_unit, &m.backward_unit})
      if (*unit && (*unit)->use_sta)
        for (double& v : (*unit)->sta.out.mutable_values()) v = 0.0;
  }
  const Index head_in = m.backward_unit ? 2 * c : c;
  m.head = HeadParams::init(head_in, mc.head_hidden, static_cast<Index>(config.data.scene.classes.size()), rng_head);
  return m;
}

ParameterMap Model::parameters() const {
  ParameterMap p;
  pointnet.collect(p, "encoder");
  if (gmp) gmp->collect(p, "gmp");
  backbone.collect(p, "backbone");
  if (forward_unit) forward_unit->collect(p, "temporal.forward");
  if (backward_unit) backward_unit->collect(p, "temporal.backward");
  head.collect(p, "head");
  return p;
}

Index Model::parameter_count() const {
  Index n = 0;
  for (const auto& [_, t] : parameters()) n += t.numel();
  return n;
}

std::vector<std::string> load_matching(Model& dst, const ParameterMap& src) {
  std::vector<std::string> copied;
  for (auto& [name, t] : dst.parameters()) {
    const auto it = src.find(name);
    if (it == src.end()) continue;
    const Tensor& from = it->second;
    Tensor target = t;
    if (from.shape() == t.shape()) {
      std::copy(from.values().begin(), from.values().end(), target.mutable_values().begin());
      copied.push_back(name);
      continue;
    }
    // A kernel whose input channels doubled (the offline head reads [forward, backward]) gets the
    // source kernel halved on each side, so it sees the mean of the two directions.
    if (t.rank() != 4 || from.rank() != 4 || t.dim(1) != 2 * from.dim(1) || t.dim(0) != from.dim(0) ||
        t.dim(2) != from.dim(2) || t.dim(3) != from.dim(3))
      continue;
    const Index o = t.dim(0), ci = from.dim(1), taps = t.dim(2) * t.dim(3);
    auto dv = target.mutable_values();
    const auto sv = from.values();
    for (Index a = 0; a < o; ++a)
      for (Index side = 0; side < 2; ++side)
        for (Index k = 0; k < ci * taps; ++k)
          dv[(a * 2 * ci + side * ci) * taps + k] = 0.5 * sv[a * ci * taps + k];
    copied.push_back(name);
  }
  return copied;
}

std::vector<Tensor> encode_frames(const Model& model, const Sample& sample) {
  std::vector<Tensor> out;
  for (const FrameInput& f : sample.frames) {
    Tensor bev;
    if (f.grids.size() == 0) {
      bev = Tensor::zeros({model.pointnet.f.weight.dim(1), model.grid.height(), model.grid.width()});
    } else {
      GridSet grids = f.grids;
      Tensor v = pointnet_init(grids, model.pointnet);
      if (model.gmp) v = run_gmpnet(v, f.graph, *model.gmp, f.graph.n > 0 ? model.steps : 0);
      bev = scatter_to_bev(v, grids, model.grid);
    }
    out.push_back(backbone_forward(bev, model.backbone, model.grid.dx).features);
  }
  return out;
}

std::vector<HeadOutput> model_forward(const Model& model, const Sample& sample) {
  std::vector<Tensor> features = encode_frames(model, sample);
  if (model.backward_unit)
    features = bidirectional_forward(features, *model.forward_unit, *model.backward_unit);
  else if (model.forward_unit)
    features = ast_gru_forward(features, *model.forward_unit);
  std::vector<HeadOutput> out;
  for (const Tensor& f : features) out.push_back(head_forward(f, model.head));
  return out;
}

LossTerms sample_loss(const Model& model, const Sample& sample, double reg_weight, double velocity_weight) {
  const std::vector<HeadOutput> outputs = model_forward(model, sample);
  LossTerms total;
  const double w = 1.0 / static_cast<double>(outputs.size());
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    const LossTerms l = detection_loss(outputs[i], sample.targets[i], reg_weight, velocity_weight);
    total.total = i == 0 ? l.total * w : total.total + l.total * w;
    total.heatmap += l.heatmap * w;
    total.regression += l.regression * w;
  }
  return total;
}

std::vector<BevBox> detect(const Model& model, const Sample& sample, const RunConfig& config) {
  NoGradGuard guard;
  const std::vector<HeadOutput> outputs = model_forward(model, sample);
  return decode_detections(outputs[static_cast<std::size_t>(sample.eval_pos)], model.geometry, config.eval.decode);
}

}  // namespace pcvd
