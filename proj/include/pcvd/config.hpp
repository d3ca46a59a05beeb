#pragma once

// Run configuration shared by the trainer, evaluator and CLI.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "pcvd/backbone.hpp"
#include "pcvd/grid.hpp"
#include "pcvd/head.hpp"
#include "pcvd/scene.hpp"

namespace pcvd {

inline constexpr std::string_view kConfigSchema = "pcvd-cfg-1";

enum class Variant {
  SingleFrame,
  ConcatBaseline,
  GmpOnly,
  ConvGru,
  StaGru,
  TtaGru,
  AstGru,
  AstGruOffline,
};

std::string variant_name(Variant v);
/// Throws ConfigError for unknown names.
Variant parse_variant(const std::string& name);
const std::vector<Variant>& all_variants();

/// Single-keyframe variants train in one stage; the rest fine-tune a gmp-only encoder.
bool is_video(Variant v);
bool uses_gmpnet(Variant v);

struct DataConfig {
  std::filesystem::path dir = "dataset";
  int train_scenes = 20;
  int eval_scenes = 5;
  std::uint64_t seed = 7;
  SceneConfig scene;
  int min_visible_points = 2;  // over keyframes k-1..k+1, else the label is dropped
};

struct ModelConfig {
  int keyframes = 3;  // T
  int sweeps = 10;    // M, the most recent sweeps of each keyframe window
  GridSpec grid;
  Index point_channels = 16;    // L
  Index message_channels = 16;  // L'
  Index neighbors = 8;          // K
  int steps = 2;                // S
  Index max_nodes = 4096;       // farthest point sampling cap
  std::vector<BlockSpec> blocks{{2, 3, 16, 2}, {2, 3, 16, 2}};
  Index head_hidden = 16;
  int tta_layers = 2;
  bool tta_motion_map = true;
};

struct TrainConfig {
  int stage1_epochs = 6;
  int stage2_epochs = 4;
  double stage1_lr = 0.003;
  double stage2_lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 10.0;
  double reg_weight = 1.0;
  double velocity_weight = 1.0;
  bool flip_augment = true;
};

struct EvalConfig {
  double threshold_scale = 1.0;
  DecodeOptions decode;
  // Operating point for recall on occluded actors.
  double occlusion_score = 0.3;
  double occlusion_distance = 2.0;  // metres before threshold_scale
};

struct RunConfig {
  Variant variant = Variant::AstGru;
  std::uint64_t seed = 1;
  std::filesystem::path out = "run";
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  std::vector<Variant> ablate_variants;  // empty: every variant
  std::vector<std::uint64_t> ablate_seeds{1, 2, 3};

  /// Throws ConfigError on out-of-range or inconsistent settings.
  void validate() const;
  /// Keyframes fed to the model for this variant.
  int effective_keyframes() const;
  /// Sweeps merged per keyframe for this variant.
  int effective_sweeps() const;
  /// Network steps of message passing for this variant.
  int effective_steps() const;
};

RunConfig parse_config(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);
nlohmann::json config_to_json(const RunConfig& config);

}  // namespace pcvd
