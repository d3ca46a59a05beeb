#pragma once

// Full detector: pillar encoder, optional grid message passing, BEV backbone,
// optional recurrent aggregation over keyframes, and the centre head.
// Also the sample pipeline that turns dataset scenes into model inputs.

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "pcvd/astgru.hpp"
#include "pcvd/config.hpp"
#include "pcvd/gmpnet.hpp"
#include "pcvd/grid.hpp"
#include "pcvd/head.hpp"

namespace pcvd {

/// Points per track id over the last `sweeps` sweeps of keyframe k's window, counted
/// against the box swept back by its velocity.
std::map<int, int> keyframe_visibility(const Scene& scene, int k, int sweeps_per_keyframe, double sweep_period,
                                       int sweeps);

/// Scene labels after the visibility policy: a box is kept at keyframe k when the
/// actor returns at least `min_points` points over keyframes k-1, k and k+1.
struct LabeledScene {
  const Scene* scene = nullptr;
  std::vector<std::map<int, int>> visibility;        // per keyframe, whole merged window
  std::vector<std::map<int, int>> sweep_visibility;  // per keyframe, keyframe sweep only
  std::vector<std::vector<BevBox>> labels;     // per keyframe, keyframe ego frame
};

LabeledScene label_with_visibility(const Scene& scene, const DatasetMeta& meta, int min_points);

struct FrameInput {
  GridSet grids;
  GridGraph graph;  // empty when message passing is off
};

struct Sample {
  int scene = 0;
  int keyframe = 0;  // evaluated keyframe
  bool flipped = false;
  int eval_pos = 0;  // index of the evaluated keyframe in `frames`
  std::vector<FrameInput> frames;
  std::vector<TargetMaps> targets;
  std::vector<std::vector<BevBox>> boxes;  // per frame, in the evaluated keyframe's ego frame
};

/// Window of keyframes feeding keyframe k: the last T for online models,
/// T keyframes with T/2 of them in the future for offline ones.
std::vector<int> keyframe_window(const RunConfig& config, int k);
/// Keyframes every variant of this config can be evaluated at.
std::vector<int> evaluable_keyframes(const RunConfig& config, int keyframe_count);

MapGeometry output_geometry(const RunConfig& config);

Sample make_sample(const RunConfig& config, const LabeledScene& scene, const DatasetMeta& meta, int scene_index,
                   int k, bool flip);
std::vector<Sample> make_samples(const RunConfig& config, const std::vector<LabeledScene>& scenes,
                                 const DatasetMeta& meta, bool with_flips);

struct Model {
  Variant variant = Variant::AstGru;
  int steps = 0;
  GridSpec grid;
  MapGeometry geometry;
  PointNetParams pointnet;
  std::optional<GmpParams> gmp;
  BackboneParams backbone;
  std::optional<AstGruParams> forward_unit;
  std::optional<AstGruParams> backward_unit;
  HeadParams head;

  static Model init(const RunConfig& config, std::uint64_t seed);
  /// Shares storage with the model.
  ParameterMap parameters() const;
  Index parameter_count() const;
};

/// Copies every parameter of `src` whose name and shape exist in `dst`; returns the copied names.
/// A conv kernel whose input channels doubled is filled with half the source kernel in each half.
std::vector<std::string> load_matching(Model& dst, const ParameterMap& src);

/// Per-keyframe BEV features after the backbone.
std::vector<Tensor> encode_frames(const Model& model, const Sample& sample);
/// Head outputs per keyframe of the window.
std::vector<HeadOutput> model_forward(const Model& model, const Sample& sample);
/// Mean detection loss over the window's keyframes.
LossTerms sample_loss(const Model& model, const Sample& sample, double reg_weight, double velocity_weight = 1.0);
/// Decoded boxes at the evaluated keyframe.
std::vector<BevBox> detect(const Model& model, const Sample& sample, const RunConfig& config);

}  // namespace pcvd
