#include "pcvd/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "pcvd/errors.hpp"
#include "pcvd/rng.hpp"

namespace pcvd {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<LabeledScene> label_all(const Dataset& ds, int min_points) {
  std::vector<LabeledScene> out;
  for (const Scene& s : ds.scenes) out.push_back(label_with_visibility(s, ds.meta, min_points));
  return out;
}

Tensor scalar_tensor(double v) { return Tensor({1}, {v}); }

double scalar_value(const ParameterMap& archive, const std::string& name) {
  const auto it = archive.find(name);
  if (it == archive.end() || it->second.numel() != 1) throw FormatError("training state lacks " + name, 0);
  return it->second.values()[0];
}

std::vector<std::string> class_names(const RunConfig& config) {
  std::vector<std::string> names;
  for (const auto& c : config.data.scene.classes) names.push_back(c.name);
  return names;
}

}  // namespace

// ---------------------------------------------------------------------------
// optimizer

Adam Adam::from_config(const TrainConfig& c) {
  Adam a;
  a.beta1 = c.beta1;
  a.beta2 = c.beta2;
  a.eps = c.eps;
  a.clip = c.grad_clip;
  return a;
}

double Adam::step(ParameterMap& params, double lr) {
  double sq = 0.0;
  for (const auto& [_, p] : params)
    if (p.has_grad())
      for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  const double scale = clip > 0 && norm > clip ? clip / norm : 1.0;
  ++t;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    auto mit = m.find(name);
    if (mit == m.end()) {
      mit = m.emplace(name, Tensor::zeros(p.shape())).first;
      v.emplace(name, Tensor::zeros(p.shape()));
    }
    auto mv = mit->second.mutable_values();
    auto vv = v.at(name).mutable_values();
    auto val = p.mutable_values();
    const auto g = p.grad();
    for (std::size_t i = 0; i < val.size(); ++i) {
      const double gi = g[i] * scale;
      mv[i] = beta1 * mv[i] + (1.0 - beta1) * gi;
      vv[i] = beta2 * vv[i] + (1.0 - beta2) * gi * gi;
      val[i] -= lr * (mv[i] / c1) / (std::sqrt(vv[i] / c2) + eps);
    }
  }
  return norm;
}

nlohmann::json EpochRecord::to_json() const {
  return {{"stage", stage},     {"epoch", epoch},           {"loss", loss},
          {"heatmap", heatmap}, {"regression", regression}, {"seconds", seconds}};
}

// ---------------------------------------------------------------------------
// data

Dataset train_split(const RunConfig& config) {
  return generate_dataset(config.data.scene, config.data.train_scenes, mix_seed(config.data.seed, 1));
}

Dataset eval_split(const RunConfig& config) {
  return generate_dataset(config.data.scene, config.data.eval_scenes, mix_seed(config.data.seed, 2));
}

Data Data::generate(const RunConfig& config) {
  Data d;
  d.train = train_split(config);
  d.eval = eval_split(config);
  d.relabel(config);
  return d;
}

Data Data::load(const RunConfig& config) {
  Data d;
  d.train = read_dataset(config.data.dir / "train");
  d.eval = read_dataset(config.data.dir / "eval");
  for (const Dataset* ds : {&d.train, &d.eval}) {
    if (ds->meta.sweeps_per_keyframe != config.data.scene.sweeps_per_keyframe ||
        ds->meta.sweep_rate_hz != config.data.scene.sweep_rate_hz)
      throw ConfigError("dataset sweep layout does not match the config");
    if (ds->meta.classes != class_names(config)) throw ConfigError("dataset classes do not match the config");
  }
  d.relabel(config);
  return d;
}

void Data::write(const std::filesystem::path& dir) const {
  write_dataset(train, dir / "train");
  write_dataset(eval, dir / "eval");
}

void Data::relabel(const RunConfig& config) {
  train_labels = label_all(train, config.data.min_visible_points);
  eval_labels = label_all(eval, config.data.min_visible_points);
}

TrainingSet TrainingSet::build(const RunConfig& config, const Data& data) {
  TrainingSet set;
  for (std::size_t i = 0; i < data.train_labels.size(); ++i) {
    const int keyframes = static_cast<int>(data.train.scenes[i].keyframes.size());
    for (int k : evaluable_keyframes(config, keyframes)) {
      set.samples.push_back(make_sample(config, data.train_labels[i], data.train.meta, static_cast<int>(i), k, false));
      if (config.train.flip_augment)
        set.flipped.push_back(make_sample(config, data.train_labels[i], data.train.meta, static_cast<int>(i), k, true));
    }
  }
  return set;
}

// ---------------------------------------------------------------------------
// training

RunConfig stage1_config(const RunConfig& config) {
  RunConfig c = config;
  if (is_video(config.variant)) {
    c.variant = Variant::GmpOnly;
    // Temporal settings have no stage-1 parameters; normalise them so equal encoders share one key.
    const ModelConfig defaults;
    c.model.tta_layers = defaults.tta_layers;
    c.model.tta_motion_map = defaults.tta_motion_map;
  }
  return c;
}

double learning_rate(const RunConfig& config, int stage, std::int64_t step, std::int64_t total_steps) {
  if (stage != 1) return config.train.stage2_lr;
  const double peak = config.train.stage1_lr;
  const double total = static_cast<double>(std::max<std::int64_t>(1, total_steps));
  const double warm = 0.3 * total;
  const double s = static_cast<double>(step);
  if (s < warm) return peak * (0.1 + 0.9 * s / warm);
  const double progress = std::min(1.0, (s - warm) / std::max(1.0, total - warm));
  return peak * (0.01 + 0.99 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

TrainingState begin_stage(const RunConfig& config, int stage, const ParameterMap* init_from,
                          std::vector<std::string>* loaded) {
  TrainingState s;
  s.stage = stage;
  s.model = Model::init(stage == 1 ? stage1_config(config) : config, mix_seed(config.seed, 0x57a6eULL, stage));
  s.adam = Adam::from_config(config.train);
  if (init_from) {
    const auto names = load_matching(s.model, *init_from);
    if (loaded) *loaded = names;
  }
  return s;
}

namespace {

struct StepLoss {
  double total, heatmap, regression;
};

StepLoss optimizer_step(const RunConfig& config, TrainingState& state, const Sample& sample,
                        std::int64_t total_steps) {
  ParameterMap params = state.model.parameters();
  StepLoss out;
  {
    Tape tape;
    for (auto& [_, p] : params) p.zero_grad();
    const LossTerms l = sample_loss(state.model, sample, config.train.reg_weight, config.train.velocity_weight);
    out = {l.total.item(), l.heatmap, l.regression};
    if (!std::isfinite(out.total))
      throw NumericError("non-finite loss at stage " + std::to_string(state.stage) + " step " +
                         std::to_string(state.step) + " (scene " + std::to_string(sample.scene) + ", keyframe " +
                         std::to_string(sample.keyframe) + ")");
    tape.backward(l.total);
  }
  state.adam.step(params, learning_rate(config, state.stage, state.step, total_steps));
  ++state.step;
  return out;
}

}  // namespace

double train_step(const RunConfig& config, TrainingState& state, const Sample& sample, std::int64_t total_steps) {
  return optimizer_step(config, state, sample, total_steps).total;
}

EpochRecord train_epoch(const RunConfig& config, TrainingState& state, const TrainingSet& set) {
  const auto t0 = std::chrono::steady_clock::now();
  const int epochs = state.stage == 1 ? config.train.stage1_epochs : config.train.stage2_epochs;
  const std::int64_t total = static_cast<std::int64_t>(epochs) * static_cast<std::int64_t>(set.size());
  std::vector<std::size_t> order(set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(mix_seed(config.seed, 0x0dde7ULL, state.stage, state.epoch));
  std::shuffle(order.begin(), order.end(), rng);
  std::bernoulli_distribution coin(0.5);
  EpochRecord rec;
  rec.stage = state.stage;
  rec.epoch = state.epoch;
  for (std::size_t i : order) {
    const bool mirror = !set.flipped.empty() && coin(rng);
    const Sample& sample = mirror ? set.flipped[i] : set.samples[i];
    const StepLoss l = optimizer_step(config, state, sample, total);
    rec.loss += l.total;
    rec.heatmap += l.heatmap;
    rec.regression += l.regression;
  }
  if (!set.samples.empty()) {
    const double n = static_cast<double>(set.size());
    rec.loss /= n;
    rec.heatmap /= n;
    rec.regression /= n;
  }
  ++state.epoch;
  rec.seconds = seconds_since(t0);
  state.log.push_back(rec);
  return rec;
}

ParameterMap model_archive(const Model& model) {
  ParameterMap out;
  for (const auto& [name, t] : model.parameters()) out.emplace(name, t.detach());
  return out;
}

Model model_from_archive(const RunConfig& config, const ParameterMap& archive) {
  Model m = Model::init(config, 0);
  ParameterMap params = m.parameters();
  load_parameters(params, archive);
  return m;
}

ParameterMap state_archive(const TrainingState& state) {
  ParameterMap out;
  for (const auto& [name, t] : state.model.parameters()) out.emplace("model/" + name, t.detach());
  for (const auto& [name, t] : state.adam.m) out.emplace("adam.m/" + name, t.detach());
  for (const auto& [name, t] : state.adam.v) out.emplace("adam.v/" + name, t.detach());
  out.emplace("state/adam_t", scalar_tensor(static_cast<double>(state.adam.t)));
  out.emplace("state/stage", scalar_tensor(state.stage));
  out.emplace("state/epoch", scalar_tensor(state.epoch));
  out.emplace("state/step", scalar_tensor(static_cast<double>(state.step)));
  if (!state.log.empty()) {
    std::vector<double> rows;
    for (const auto& r : state.log)
      rows.insert(rows.end(), {static_cast<double>(r.stage), static_cast<double>(r.epoch), r.loss, r.heatmap,
                               r.regression, r.seconds});
    out.emplace("state/log", Tensor({static_cast<Index>(state.log.size()), 6}, rows));
  }
  return out;
}

TrainingState restore_state(const RunConfig& config, const ParameterMap& archive) {
  TrainingState s;
  s.stage = static_cast<int>(scalar_value(archive, "state/stage"));
  if (s.stage != 1 && s.stage != 2) throw FormatError("training state has an invalid stage", 0);
  s.epoch = static_cast<int>(scalar_value(archive, "state/epoch"));
  s.step = static_cast<std::int64_t>(scalar_value(archive, "state/step"));
  s.model = Model::init(s.stage == 1 ? stage1_config(config) : config, 0);
  s.adam = Adam::from_config(config.train);
  s.adam.t = static_cast<std::int64_t>(scalar_value(archive, "state/adam_t"));
  ParameterMap weights;
  for (const auto& [name, t] : archive) {
    if (name.rfind("model/", 0) == 0) weights.emplace(name.substr(6), t);
    if (name.rfind("adam.m/", 0) == 0) s.adam.m.emplace(name.substr(7), t.detach());
    if (name.rfind("adam.v/", 0) == 0) s.adam.v.emplace(name.substr(7), t.detach());
  }
  ParameterMap params = s.model.parameters();
  load_parameters(params, weights);
  if (const auto it = archive.find("state/log"); it != archive.end()) {
    const Tensor& log = it->second;
    for (Index r = 0; r < log.dim(0); ++r) {
      const auto v = log.values().subspan(static_cast<std::size_t>(r * 6), 6);
      s.log.push_back({static_cast<int>(v[0]), static_cast<int>(v[1]), v[2], v[3], v[4], v[5]});
    }
  }
  return s;
}

std::uint64_t encoder_checksum(const ParameterMap& params) {
  ParameterMap shared;
  for (const auto& [name, t] : params)
    if (name.rfind("encoder.", 0) == 0 || name.rfind("gmp.", 0) == 0 || name.rfind("backbone.", 0) == 0)
      shared.emplace(name, t);
  return parameter_checksum(shared);
}

namespace {

void write_log(const std::filesystem::path& path, const std::vector<EpochRecord>& log) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& r : log) out << r.to_json().dump() << "\n";
}

void run_stage(const RunConfig& config, TrainingState& state, const TrainingSet& set, const TrainOptions& options) {
  const int epochs = state.stage == 1 ? config.train.stage1_epochs : config.train.stage2_epochs;
  while (state.epoch < epochs) {
    const EpochRecord rec = train_epoch(config, state, set);
    if (options.out) {
      write_checkpoint(*options.out / "state.ckpt", state_archive(state));
      write_log(*options.out / "train_log.jsonl", state.log);
    }
    if (options.on_epoch) options.on_epoch(state, rec);
  }
}

}  // namespace

ParameterMap run_stage1(const RunConfig& config, const Data& data, const EpochCallback& on_epoch) {
  const RunConfig c1 = stage1_config(config);
  TrainingState state = begin_stage(config, 1, nullptr);
  TrainOptions opt;
  opt.on_epoch = on_epoch;
  run_stage(c1, state, TrainingSet::build(c1, data), opt);
  return model_archive(state.model);
}

TrainResult train(const RunConfig& config, const Data& data, const TrainOptions& options) {
  config.validate();
  if (options.out) std::filesystem::create_directories(*options.out);
  TrainResult result;
  std::optional<TrainingState> state;
  if (options.resume && options.out && std::filesystem::exists(*options.out / "state.ckpt"))
    state = restore_state(config, read_checkpoint(*options.out / "state.ckpt"));

  if (!state || state->stage == 1) {
    if (options.stage1) {
      result.stage1_weights = *options.stage1;
    } else {
      const RunConfig c1 = stage1_config(config);
      if (!state) state = begin_stage(config, 1, nullptr);
      run_stage(c1, *state, TrainingSet::build(c1, data), options);
      result.stage1_weights = model_archive(state->model);
      result.log = state->log;
    }
    std::vector<std::string> loaded;
    TrainingState next = begin_stage(config, 2, &result.stage1_weights, &loaded);
    next.log = result.log;
    result.stage1_checksum = encoder_checksum(result.stage1_weights);
    result.loaded_checksum = encoder_checksum(next.model.parameters());
    if (result.stage1_checksum != result.loaded_checksum)
      throw ContractError("stage-2 model did not receive the stage-1 encoder weights");
    state = std::move(next);
  }
  run_stage(config, *state, TrainingSet::build(config, data), options);
  result.model = state->model;
  result.log = state->log;
  if (options.out) write_checkpoint(*options.out / "model.ckpt", model_archive(result.model));
  return result;
}

// ---------------------------------------------------------------------------
// evaluation

std::vector<BevBox> occluded_targets(const LabeledScene& scene, int k, int window, int min_previous_points) {
  std::vector<BevBox> out;
  const auto& now = scene.sweep_visibility[static_cast<std::size_t>(k)];
  for (const auto& b : scene.labels[static_cast<std::size_t>(k)]) {
    const auto n = now.find(b.track_id);
    if (n != now.end() && n->second > 0) continue;
    for (int j = std::max(0, k - window + 1); j < k; ++j) {
      const auto& before = scene.visibility[static_cast<std::size_t>(j)];
      const auto p = before.find(b.track_id);
      if (p != before.end() && p->second >= min_previous_points) {
        out.push_back(b);
        break;
      }
    }
  }
  return out;
}

Evaluation evaluate(const RunConfig& config, const Model& model, const Data& data) {
  const std::vector<Sample> samples = make_samples(config, data.eval_labels, data.eval.meta, false);
  std::vector<FrameDetections> frames;
  int occluded = 0;
  int recalled = 0;
  const double d = config.eval.occlusion_distance * config.eval.threshold_scale;
  for (const Sample& s : samples) {
    FrameDetections f;
    f.preds = detect(model, s, config);
    f.gts = s.boxes[static_cast<std::size_t>(s.eval_pos)];
    const std::vector<BevBox> hidden = occluded_targets(data.eval_labels[static_cast<std::size_t>(s.scene)], s.keyframe,
                                                        config.model.keyframes);
    if (!hidden.empty()) {
      occluded += static_cast<int>(hidden.size());
      recalled += static_cast<int>(std::lround(recall_at(f.preds, hidden, d, config.eval.occlusion_score) * static_cast<double>(hidden.size())));
    }
    frames.push_back(std::move(f));
  }
  Evaluation e;
  e.report = map_report(frames, class_names(config), scaled_thresholds(config.eval.threshold_scale));
  e.occluded_actors = occluded;
  e.occluded_recall = occluded > 0 ? static_cast<double>(recalled) / occluded : std::nan("");
  return e;
}

std::vector<SceneDetections> infer(const RunConfig& config, const Model& model, const Data& data) {
  std::vector<SceneDetections> out;
  for (const Sample& s : make_samples(config, data.eval_labels, data.eval.meta, false))
    out.push_back({s.scene, s.keyframe, detect(model, s, config)});
  return out;
}

nlohmann::json detections_to_json(const std::vector<SceneDetections>& detections,
                                  const std::vector<std::string>& class_names) {
  nlohmann::json frames = nlohmann::json::array();
  for (const SceneDetections& d : detections) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const BevBox& b : d.boxes)
      boxes.push_back({{"class", class_names.at(static_cast<std::size_t>(b.class_id))},
                       {"score", b.score},
                       {"center", {b.center.x(), b.center.y()}},
                       {"length", b.length},
                       {"width", b.width},
                       {"yaw", b.yaw},
                       {"velocity", {b.velocity.x(), b.velocity.y()}}});
    frames.push_back({{"scene", d.scene}, {"keyframe", d.keyframe}, {"boxes", boxes}});
  }
  return {{"schema", kDetectionsSchema}, {"frames", frames}};
}

// ---------------------------------------------------------------------------
// ablation

std::vector<AblationEntry> default_ablation(const std::vector<Variant>& variants) {
  std::vector<AblationEntry> out;
  for (Variant v : variants.empty() ? all_variants() : variants)
  {
    out.push_back({variant_name(v), [v](RunConfig& c) { c.variant = v; }});
    if (v == Variant::AstGru)
      out.push_back({"ast-gru-no-motion", [](RunConfig& c) {
                       c.variant = Variant::AstGru;
                       c.model.tta_motion_map = false;
                     }});
  }
  return out;
}

const AblationRow* AblationResult::find(const std::string& name) const {
  for (const auto& r : rows)
    if (r.name == name) return &r;
  return nullptr;
}

nlohmann::json AblationResult::to_json() const {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json recall = nlohmann::json::array();
    for (double v : r.occluded_recall_per_seed) recall.push_back(std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v));
    j.push_back({{"name", r.name},
                 {"mAP_per_seed", r.map_per_seed},
                 {"mAP", r.mean_map},
                 {"occluded_recall_per_seed", recall},
                 {"occluded_recall", std::isnan(r.mean_occluded_recall) ? nlohmann::json(nullptr)
                                                                         : nlohmann::json(r.mean_occluded_recall)}});
  }
  return {{"schema", "pcvd-ablate-1"}, {"rows", j}};
}

std::string AblationResult::to_table() const {
  const AblationRow* ref = find("concat-baseline");
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-28s %8s %8s %12s\n", "module", "mAP", "delta", "occl.recall");
  os << buf;
  for (const auto& r : rows) {
    char delta[32] = "-";
    if (ref && &r != ref) std::snprintf(delta, sizeof delta, "%+.2f", 100.0 * (r.mean_map - ref->mean_map));
    std::snprintf(buf, sizeof buf, "%-28s %8.2f %8s %12.3f\n", r.name.c_str(), 100.0 * r.mean_map, delta,
                  r.mean_occluded_recall);
    os << buf;
  }
  return os.str();
}

AblationResult ablate(const RunConfig& base, const Data& data, const std::vector<AblationEntry>& entries,
                      const ProgressCallback& progress) {
  AblationResult result;
  for (const auto& e : entries) result.rows.push_back({e.name, {}, {}, 0.0, 0.0});
  for (std::uint64_t seed : base.ablate_seeds) {
    std::map<std::string, ParameterMap> stage1_cache;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      RunConfig c = base;
      entries[i].edit(c);
      c.seed = seed;
      c.validate();
      const std::string key = config_to_json(stage1_config(c)).dump();
      auto it = stage1_cache.find(key);
      if (it == stage1_cache.end()) {
        if (progress) progress("seed " + std::to_string(seed) + ": stage 1 for " + entries[i].name);
        it = stage1_cache.emplace(key, run_stage1(c, data)).first;
      }
      if (progress) progress("seed " + std::to_string(seed) + ": stage 2 for " + entries[i].name);
      TrainOptions opt;
      opt.stage1 = &it->second;
      const TrainResult tr = train(c, data, opt);
      const Evaluation ev = evaluate(c, tr.model, data);
      result.rows[i].map_per_seed.push_back(ev.report.mean_ap);
      result.rows[i].occluded_recall_per_seed.push_back(ev.occluded_recall);
      if (progress) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "  mAP %.4f  occluded recall %.3f (%d actors)", ev.report.mean_ap,
                      ev.occluded_recall, ev.occluded_actors);
        progress(buf);
      }
    }
  }
  for (auto& r : result.rows) {
    r.mean_map = std::accumulate(r.map_per_seed.begin(), r.map_per_seed.end(), 0.0) /
                 static_cast<double>(r.map_per_seed.size());
    double sum = 0;
    int n = 0;
    for (double v : r.occluded_recall_per_seed)
      if (!std::isnan(v)) {
        sum += v;
        ++n;
      }
    r.mean_occluded_recall = n > 0 ? sum / n : std::nan("");
  }
  return result;
}

}  // namespace pcvd
