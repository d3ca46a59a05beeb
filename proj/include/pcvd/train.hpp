#pragma once

// Two-stage training, evaluation, inference and the ablation harness.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "pcvd/config.hpp"
#include "pcvd/eval.hpp"
#include "pcvd/model.hpp"

namespace pcvd {

/// Adaptive-moment optimizer with bias correction and global-norm gradient clipping.
struct Adam {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip = 0.0;  // <= 0 disables clipping
  ParameterMap m;
  ParameterMap v;
  std::int64_t t = 0;

  static Adam from_config(const TrainConfig& c);
  /// Applies one update from the gradients stored on `params`. Returns the pre-clip gradient norm.
  double step(ParameterMap& params, double lr);
};

struct EpochRecord {
  int stage = 1;
  int epoch = 0;
  double loss = 0.0;
  double heatmap = 0.0;
  double regression = 0.0;
  double seconds = 0.0;

  nlohmann::json to_json() const;
};

/// Everything needed to continue training bit-identically.
struct TrainingState {
  Model model;
  Adam adam;
  int stage = 1;
  int epoch = 0;           // completed epochs in the current stage
  std::int64_t step = 0;   // completed steps in the current stage
  std::vector<EpochRecord> log;
};

/// Loaded train/eval splits with the visibility policy applied.
struct Data {
  Dataset train;
  Dataset eval;
  std::vector<LabeledScene> train_labels;
  std::vector<LabeledScene> eval_labels;

  static Data load(const RunConfig& config);
  static Data generate(const RunConfig& config);
  void write(const std::filesystem::path& dir) const;
  /// Re-derives labels; call after moving or copying.
  void relabel(const RunConfig& config);
};

Dataset train_split(const RunConfig& config);
Dataset eval_split(const RunConfig& config);

/// Single-keyframe config whose model supplies the stage-1 weights for `config`.
RunConfig stage1_config(const RunConfig& config);

/// Training samples, each optionally paired with its mirrored copy.
struct TrainingSet {
  std::vector<Sample> samples;
  std::vector<Sample> flipped;  // empty, or parallel to samples

  static TrainingSet build(const RunConfig& config, const Data& data);
  std::size_t size() const { return samples.size(); }
};

/// Learning rate for a step within a stage: one-cycle over stage 1, constant in stage 2.
double learning_rate(const RunConfig& config, int stage, std::int64_t step, std::int64_t total_steps);

TrainingState begin_stage(const RunConfig& config, int stage, const ParameterMap* init_from,
                          std::vector<std::string>* loaded = nullptr);

using EpochCallback = std::function<void(const TrainingState&, const EpochRecord&)>;

/// Runs one epoch (shuffled per seed, stage and epoch; mirrored copies drawn with
/// probability 1/2). Throws NumericError on divergence.
EpochRecord train_epoch(const RunConfig& config, TrainingState& state, const TrainingSet& set);
/// Runs one optimizer step on one sample and returns its loss.
double train_step(const RunConfig& config, TrainingState& state, const Sample& sample, std::int64_t total_steps);

/// Model weights, optimizer moments and counters in one archive.
ParameterMap state_archive(const TrainingState& state);
TrainingState restore_state(const RunConfig& config, const ParameterMap& archive);

/// Model weights only, under their parameter names.
ParameterMap model_archive(const Model& model);
Model model_from_archive(const RunConfig& config, const ParameterMap& archive);

struct TrainOptions {
  std::optional<std::filesystem::path> out;  // checkpoints and log
  const ParameterMap* stage1 = nullptr;       // skip stage 1 and start from these weights
  bool resume = false;
  EpochCallback on_epoch;
};

struct TrainResult {
  Model model;
  ParameterMap stage1_weights;
  std::uint64_t stage1_checksum = 0;  // of the encoder/backbone weights handed to stage 2
  std::uint64_t loaded_checksum = 0;  // of the same weights after loading into the stage-2 model
  std::vector<EpochRecord> log;
};

TrainResult train(const RunConfig& config, const Data& data, const TrainOptions& options = {});
/// Stage 1 alone; returns the single-keyframe model's weights.
ParameterMap run_stage1(const RunConfig& config, const Data& data, const EpochCallback& on_epoch = {});

/// Checksum over the parameters shared between the stages (encoder, gmp, backbone).
std::uint64_t encoder_checksum(const ParameterMap& params);

struct Evaluation {
  EvalReport report;
  double occluded_recall = 0.0;  // nan when no occluded actors
  int occluded_actors = 0;
};

// Labels at keyframe k with no returns in its own sweep that were visible at an
// earlier keyframe of the window.
std::vector<BevBox> occluded_targets(const LabeledScene& scene, int k, int window, int min_previous_points = 3);

Evaluation evaluate(const RunConfig& config, const Model& model, const Data& data);

struct SceneDetections {
  int scene = 0;
  int keyframe = 0;
  std::vector<BevBox> boxes;
};
std::vector<SceneDetections> infer(const RunConfig& config, const Model& model, const Data& data);

inline constexpr std::string_view kDetectionsSchema = "pcvd-det-1";
/// Boxes per evaluated keyframe, in that keyframe's ego frame.
nlohmann::json detections_to_json(const std::vector<SceneDetections>& detections,
                                  const std::vector<std::string>& class_names);

struct AblationRow {
  std::string name;
  std::vector<double> map_per_seed;
  std::vector<double> occluded_recall_per_seed;
  double mean_map = 0.0;
  double mean_occluded_recall = 0.0;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  nlohmann::json to_json() const;
  /// Table with the reference row's delta column.
  std::string to_table() const;
  const AblationRow* find(const std::string& name) const;
};

/// A named variant of the base config; `edit` may change anything but the seed.
struct AblationEntry {
  std::string name;
  std::function<void(RunConfig&)> edit;
};

/// One row per variant; ast-gru is followed by its no-motion-map counterpart.
std::vector<AblationEntry> default_ablation(const std::vector<Variant>& variants);

using ProgressCallback = std::function<void(const std::string&)>;

AblationResult ablate(const RunConfig& base, const Data& data, const std::vector<AblationEntry>& entries,
                      const ProgressCallback& progress = {});

}  // namespace pcvd
