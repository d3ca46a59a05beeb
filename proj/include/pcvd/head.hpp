#pragma once

// Anchor-free centre-heatmap head: target splatting, focal + L1 loss,
// peak decoding with oriented NMS.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "pcvd/backbone.hpp"
#include "pcvd/geometry.hpp"
#include "pcvd/nn.hpp"
#include "pcvd/tensor.hpp"

namespace pcvd {

/// Regression channels: offset x, offset y, log(l/cell), log(w/cell), sin yaw, cos yaw, vx, vy.
inline constexpr Index kRegressionChannels = 8;

/// Output-map geometry: cell (gy, gx) spans [x_min + gx*cell, x_min + (gx+1)*cell) along x.
struct MapGeometry {
  double x_min = -12.0;
  double y_min = -12.0;
  double cell = 1.0;
  Index height = 24;
  Index width = 24;
  Index num_classes = 1;
};

struct HeadParams {
  ConvLayer shared;      // in -> c_h, 3x3, ReLU
  ConvLayer heatmap;     // c_h -> classes
  ConvLayer regression;  // c_h -> 8

  static HeadParams init(Index in_channels, Index hidden, Index classes, std::mt19937_64& rng);
  Index in_channels() const { return shared.kernel.dim(1); }
  void collect(ParameterMap& out, const std::string& prefix) const;
};

struct HeadOutput {
  Tensor heatmap;     // logits [classes x h x w]
  Tensor regression;  // [8 x h x w]
};

HeadOutput head_forward(const Tensor& features, const HeadParams& params);

struct TargetMaps {
  Tensor heatmap;     // [classes x h x w] in [0, 1]
  Tensor regression;  // [8 x h x w]
  Tensor mask;        // [h x w], 1 at object centres
  std::vector<Cell> centers;
  std::vector<std::vector<double>> rows;  // regression target per centre
};

/// CenterNet radius for a box of the given size (cells) so that a shifted box keeps IoU >= min_overlap.
double gaussian_radius(double length_cells, double width_cells, double min_overlap);

TargetMaps make_targets(const std::vector<BevBox>& boxes, const MapGeometry& geom, double min_overlap = 0.7,
                        int min_radius = 1);

struct LossTerms {
  Tensor total;
  double heatmap = 0.0;
  double regression = 0.0;
};

/// Penalty-reduced focal loss over sigmoid(logits) (alpha=2, beta=4), summed.
Tensor focal_loss_sum(const Tensor& logits, const Tensor& target, double alpha = 2.0, double beta = 4.0);

/// (focal + reg_weight * L1 at centres) / max(1, objects); the two velocity
/// channels of the L1 term are scaled by velocity_weight.
LossTerms detection_loss(const HeadOutput& pred, const TargetMaps& targets, double reg_weight = 1.0,
                         double velocity_weight = 1.0);

struct DecodeOptions {
  double score_threshold = 0.1;
  double nms_iou = 0.2;
  int max_out = 500;
};

/// Local 3x3 maxima above threshold, boxes rebuilt from regression, class-wise oriented NMS.
std::vector<BevBox> decode_detections(const HeadOutput& pred, const MapGeometry& geom, const DecodeOptions& opt = {});

/// Greedy NMS; input in any order, output by descending score.
std::vector<BevBox> nms(std::vector<BevBox> boxes, double iou_threshold);

/// One detection per line: {"frame", "class", "score", "x", "y", "l", "w", "yaw", "vx", "vy"}.
std::string detection_line(std::int64_t frame, const BevBox& box);
BevBox parse_detection_line(const std::string& line, std::int64_t* frame = nullptr);

}  // namespace pcvd
