#include "pcvd/head.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"

namespace pcvd {
namespace {

MapGeometry geom8() {
  MapGeometry g;
  g.x_min = -4;
  g.y_min = -4;
  g.cell = 1.0;
  g.height = g.width = 8;
  g.num_classes = 2;
  return g;
}

BevBox box(double x, double y, double l, double w, double yaw, int cls = 0) {
  BevBox b;
  b.center = {x, y};
  b.length = l;
  b.width = w;
  b.yaw = yaw;
  b.class_id = cls;
  return b;
}

// Saturated logits reproducing the target peaks, plus exact regression.
HeadOutput perfect_prediction(const TargetMaps& t) {
  std::vector<double> logits(t.heatmap.values().begin(), t.heatmap.values().end());
  for (double& v : logits) v = v == 1.0 ? 40.0 : -40.0;
  return {Tensor(t.heatmap.shape(), std::move(logits)), t.regression.detach()};
}

TEST(Head, ZeroInputZeroParamsGivesHalfProbability) {
  std::mt19937_64 rng(1);
  HeadParams p = HeadParams::init(4, 6, 2, rng);
  ParameterMap params;
  p.collect(params, "h");
  for (auto& [_, t] : params) std::ranges::fill(t.mutable_values(), 0.0);
  const HeadOutput out = head_forward(Tensor::zeros({4, 5, 5}), p);
  for (double v : out.heatmap.values()) EXPECT_EQ(1.0 / (1.0 + std::exp(-v)), 0.5);
}

TEST(Head, ShapeContract) {
  std::mt19937_64 rng(2);
  const HeadParams p = HeadParams::init(8, 6, 3, rng);
  const HeadOutput out = head_forward(Tensor::uniform({8, 8, 8}, rng, -1, 1), p);
  EXPECT_EQ(out.heatmap.shape(), (Shape{3, 8, 8}));
  EXPECT_EQ(out.regression.shape(), (Shape{8, 8, 8}));
  EXPECT_THROW(head_forward(Tensor::zeros({4, 8, 8}), p), DimensionError);
}

TEST(Head, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  HeadParams p = HeadParams::init(2, 3, 2, rng);
  std::ranges::fill(p.shared.bias.mutable_values(), 0.2);
  Tensor x = testing::random_param({2, 4, 4}, rng);
  const Tensor m1 = Tensor::uniform({2, 4, 4}, rng, -1, 1), m2 = Tensor::uniform({8, 4, 4}, rng, -1, 1);
  ParameterMap params;
  p.collect(params, "h");
  std::vector<Tensor> inputs{x};
  for (auto& [_, t] : params) inputs.push_back(t);
  const auto report = testing::gradcheck(
      [&](const std::vector<Tensor>& in) {
        const HeadOutput o = head_forward(in[0], p);
        return sum(o.heatmap * m1) + sum(o.regression * m2);
      },
      inputs);
  EXPECT_TRUE(report.ok) << report.detail;
}

TEST(Targets, CentredBoxPeaksWithHalfOffset) {
  const TargetMaps t = make_targets({box(0.5, -1.5, 4.0, 2.0, 0.3)}, geom8());
  ASSERT_EQ(t.centers.size(), 1u);
  EXPECT_EQ(t.centers[0], (Cell{2, 4}));
  EXPECT_EQ(t.heatmap.at({0, 2, 4}), 1.0);
  EXPECT_DOUBLE_EQ(t.regression.at({0, 2, 4}), 0.5);
  EXPECT_DOUBLE_EQ(t.regression.at({1, 2, 4}), 0.5);
  EXPECT_EQ(t.mask.at({2, 4}), 1.0);
  double mask_sum = 0;
  for (double v : t.mask.values()) mask_sum += v;
  EXPECT_EQ(mask_sum, 1.0);
  for (double v : t.heatmap.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  for (Index y = 0; y < 8; ++y)
    for (Index x = 0; x < 8; ++x) EXPECT_EQ(t.heatmap.at({1, y, x}), 0.0);
}

TEST(Targets, DuplicateBoxesMatchSingle) {
  const BevBox b = box(1.2, 0.7, 4.5, 1.9, -2.0, 1);
  const TargetMaps one = make_targets({b}, geom8()), two = make_targets({b, b}, geom8());
  for (Index i = 0; i < one.heatmap.numel(); ++i) EXPECT_EQ(one.heatmap.values()[i], two.heatmap.values()[i]);
  for (Index i = 0; i < one.regression.numel(); ++i)
    EXPECT_EQ(one.regression.values()[i], two.regression.values()[i]);
  EXPECT_EQ(two.centers.size(), 1u);
}

TEST(Targets, GaussianRadiusMatchesCenterNetRule) {
  // Hand evaluation of the three quadratic roots for a 4 x 2 box at overlap 0.7.
  const double h = 4, w = 2, o = 0.7;
  const double r1 = (6 + std::sqrt(36 - 4 * 8 * 0.3 / 1.7)) / 2;
  const double r2 = (12 + std::sqrt(144 - 16 * 0.3 * 8)) / 2;
  const double r3 = (-2 * o * 6 + std::sqrt(std::pow(2 * o * 6, 2) - 4 * 4 * o * (o - 1) * 8)) / 2;
  EXPECT_NEAR(gaussian_radius(h, w, o), std::min({r1, r2, r3}), 1e-12);
}

TEST(Targets, EncodeDecodeRoundTrip) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> pos(-3.9, 3.9), size(1.0, 5.0), yaw(-3.1, 3.1), vel(-5, 5);
  for (int trial = 0; trial < 50; ++trial) {
    BevBox b = box(pos(rng), pos(rng), size(rng), size(rng), yaw(rng), trial % 2);
    b.velocity = {vel(rng), vel(rng)};
    const TargetMaps t = make_targets({b}, geom8());
    const auto dets = decode_detections(perfect_prediction(t), geom8());
    ASSERT_EQ(dets.size(), 1u);
    const BevBox& d = dets[0];
    EXPECT_NEAR((d.center - b.center).norm(), 0, 1e-9);
    EXPECT_NEAR(d.length, b.length, 1e-9);
    EXPECT_NEAR(d.width, b.width, 1e-9);
    EXPECT_NEAR(wrap_angle(d.yaw - b.yaw), 0, 1e-9);
    EXPECT_NEAR((d.velocity - b.velocity).norm(), 0, 1e-9);
    EXPECT_EQ(d.class_id, b.class_id);
    EXPECT_NEAR(d.score, 1.0, 1e-6);
  }
}

TEST(Loss, PerfectPredictionIsNearZero) {
  const TargetMaps t = make_targets({box(0.5, 0.5, 4, 2, 0.1), box(-2.2, 2.7, 3, 1.5, 1.0, 1)}, geom8());
  const LossTerms l = detection_loss(perfect_prediction(t), t);
  EXPECT_LE(l.total.item(), 1e-6);
  EXPECT_GE(l.total.item(), 0.0);
}

TEST(Loss, NoObjectsLeavesBackgroundTermOnly) {
  const TargetMaps t = make_targets({}, geom8());
  std::mt19937_64 rng(5);
  HeadOutput pred{Tensor::uniform({2, 8, 8}, rng, -3, 3), Tensor::uniform({8, 8, 8}, rng, -1, 1)};
  const LossTerms l = detection_loss(pred, t);
  EXPECT_EQ(l.regression, 0.0);
  double oracle = 0;
  for (double x : pred.heatmap.values()) {
    const double p = 1 / (1 + std::exp(-x));
    oracle += -p * p * std::log(1 - p);
  }
  EXPECT_NEAR(l.total.item(), oracle, 1e-10);
}

TEST(Loss, FocalMatchesScalarFormula) {
  std::mt19937_64 rng(6);
  const TargetMaps t = make_targets({box(0.5, 0.5, 4, 2, 0.1)}, geom8());
  const Tensor logits = Tensor::uniform({2, 8, 8}, rng, -4, 4);
  double oracle = 0;
  for (Index i = 0; i < logits.numel(); ++i) {
    const double p = 1 / (1 + std::exp(-logits.values()[i])), g = t.heatmap.values()[i];
    oracle += g == 1.0 ? -std::pow(1 - p, 2) * std::log(p) : -std::pow(1 - g, 4) * p * p * std::log(1 - p);
  }
  EXPECT_NEAR(focal_loss_sum(logits, t.heatmap).item(), oracle, 1e-10);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  const TargetMaps t = make_targets({box(0.5, 0.5, 4, 2, 0.1), box(-2.2, 2.7, 3, 1.5, 1.0, 1)}, geom8());
  Tensor logits = testing::random_param({2, 8, 8}, rng, -3, 3);
  Tensor reg = testing::random_param({8, 8, 8}, rng, -1, 1);
  const auto report = testing::gradcheck(
      [&](const std::vector<Tensor>& in) { return detection_loss({in[0], in[1]}, t).total; }, {logits, reg});
  EXPECT_TRUE(report.ok) << report.detail;
}

TEST(Loss, OverfitProbeDecreasesMonotonically) {
  std::mt19937_64 rng(8);
  HeadParams p = HeadParams::init(3, 8, 2, rng);
  const Tensor features = Tensor::uniform({3, 8, 8}, rng, 0, 1);
  const TargetMaps t = make_targets({box(0.5, 0.5, 4, 2, 0.1)}, geom8());
  ParameterMap params;
  p.collect(params, "h");
  double previous = std::numeric_limits<double>::infinity();
  for (int step = 0; step < 50; ++step) {
    double loss;
    {
      Tape tape;
      for (auto& [_, v] : params) v.zero_grad();
      const Tensor l = detection_loss(head_forward(features, p), t).total;
      loss = l.item();
      tape.backward(l);
    }
    EXPECT_LT(loss, previous) << "step " << step;
    previous = loss;
    for (auto& [_, v] : params) {
      auto val = v.mutable_values();
      const auto g = v.grad();
      for (std::size_t i = 0; i < val.size(); ++i) val[i] -= 0.002 * g[i];
    }
  }
}

TEST(Decode, EmptyHeatmapGivesNothing) {
  HeadOutput pred{Tensor::full({2, 8, 8}, -5.0), Tensor::zeros({8, 8, 8})};
  EXPECT_TRUE(decode_detections(pred, geom8()).empty());
}

TEST(Decode, CoincidentCandidatesSuppressed) {
  BevBox a = box(0, 0, 4, 2, 0), b = a;
  a.score = 0.9;
  b.score = 0.8;
  const auto kept = nms({b, a}, 0.5);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].score, 0.9);
  BevBox other = b;
  other.class_id = 1;
  EXPECT_EQ(nms({a, other}, 0.5).size(), 2u);
}

TEST(Decode, NmsOutputSortedAndSeparated) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-5, 5), s(0, 1), yaw(-3, 3);
  std::vector<BevBox> boxes;
  for (int i = 0; i < 60; ++i) {
    BevBox b = box(u(rng), u(rng), 4, 2, yaw(rng));
    b.score = s(rng);
    boxes.push_back(b);
  }
  const auto kept = nms(boxes, 0.2);
  for (std::size_t i = 0; i < kept.size(); ++i) {
    if (i > 0) EXPECT_GE(kept[i - 1].score, kept[i].score);
    for (std::size_t j = i + 1; j < kept.size(); ++j) EXPECT_LE(bev_iou(kept[i], kept[j]), 0.2);
  }
}

TEST(Decode, MaxOutAndThreshold) {
  std::mt19937_64 rng(10);
  std::vector<double> logits(2 * 8 * 8, -10.0);
  for (Index y = 0; y < 8; y += 2)
    for (Index x = 0; x < 8; x += 2) logits[y * 8 + x] = 1.0 + 0.01 * (y * 8 + x);
  HeadOutput pred{Tensor({2, 8, 8}, logits), Tensor::zeros({8, 8, 8})};
  DecodeOptions opt;
  opt.max_out = 5;
  const auto dets = decode_detections(pred, geom8(), opt);
  ASSERT_EQ(dets.size(), 5u);
  EXPECT_NEAR(dets[0].score, 1 / (1 + std::exp(-(1.0 + 0.01 * 54))), 1e-12);
  opt.score_threshold = 0.99;
  EXPECT_TRUE(decode_detections(pred, geom8(), opt).empty());
}

TEST(Detections, LineRoundTrip) {
  BevBox b = box(1.25, -3.5, 4.1, 1.8, 0.7, 1);
  b.score = 0.625;
  b.velocity = {2.5, -0.125};
  std::int64_t frame = 0;
  const BevBox back = parse_detection_line(detection_line(42, b), &frame);
  EXPECT_EQ(frame, 42);
  EXPECT_EQ(back.center, b.center);
  EXPECT_EQ(back.score, b.score);
  EXPECT_EQ(back.yaw, b.yaw);
  EXPECT_EQ(back.velocity, b.velocity);
  EXPECT_THROW(parse_detection_line("{\"frame\": 1}"), FormatError);
}

}  // namespace
}  // namespace pcvd
