#pragma once

// Centre-distance average precision in the nuScenes style.

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "pcvd/geometry.hpp"

namespace pcvd {

inline constexpr std::string_view kEvalSchema = "pcvd-eval-1";

/// Predictions in descending score order and the gt index each matched (-1 for none).
struct MatchResult {
  std::vector<int> order;     // indices into the prediction list
  std::vector<int> gt_match;  // parallel to order
  int num_gt = 0;
};

/// Greedy by descending score (stable); each prediction takes the nearest
/// unmatched gt within `d`, ties to the lower gt index.
MatchResult match_by_center_distance(const std::vector<BevBox>& preds, const std::vector<BevBox>& gts, double d);

struct ScoredHit {
  double score;
  bool true_positive;
};

/// 101-point interpolated AP; nullopt when there is no ground truth.
std::optional<double> average_precision(std::vector<ScoredHit> hits, int num_gt);

struct FrameDetections {
  std::vector<BevBox> preds;
  std::vector<BevBox> gts;
};

struct ClassReport {
  std::string name;
  int num_gt = 0;
  std::vector<std::optional<double>> ap;  // per threshold
};

struct EvalReport {
  std::vector<double> thresholds;
  std::vector<ClassReport> classes;
  double mean_ap = 0.0;  // over classes with ground truth and all thresholds

  nlohmann::json to_json() const;
  std::string to_table() const;
};

std::vector<double> scaled_thresholds(double scale);

EvalReport map_report(const std::vector<FrameDetections>& frames, const std::vector<std::string>& class_names,
                      const std::vector<double>& thresholds);

/// Throws FormatError unless `j` is a well-formed evaluation report.
void validate_eval_report(const nlohmann::json& j);

/// Fraction of `targets` matched (class-aware, greedy) by predictions scoring >= min_score within d.
double recall_at(const std::vector<BevBox>& preds, const std::vector<BevBox>& targets, double d, double min_score);

}  // namespace pcvd
