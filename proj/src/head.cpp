#include "pcvd/head.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "json.hpp"
#include "pcvd/errors.hpp"

namespace pcvd {

namespace {

ConvLayer conv_layer(Index in, Index out, Index k, std::mt19937_64& rng) {
  ConvLayer c;
  c.kernel = glorot({out, in, k, k}, in * k * k, out * k * k, rng);
  c.bias = Tensor::zeros({out}).set_requires_grad();
  return c;
}

Tensor apply(const ConvLayer& c, const Tensor& x) { return conv2d(x, c.kernel, c.bias, 1, c.kernel.dim(2) / 2); }

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

}  // namespace

HeadParams HeadParams::init(Index in_channels, Index hidden, Index classes, std::mt19937_64& rng) {
  HeadParams p;
  p.shared = conv_layer(in_channels, hidden, 3, rng);
  p.heatmap = conv_layer(hidden, classes, 3, rng);
  p.regression = conv_layer(hidden, kRegressionChannels, 3, rng);
  std::ranges::fill(p.heatmap.bias.mutable_values(), -2.19);  // prior probability 0.1
  return p;
}

void HeadParams::collect(ParameterMap& out, const std::string& prefix) const {
  register_param(out, prefix + ".shared.kernel", shared.kernel);
  register_param(out, prefix + ".shared.bias", shared.bias);
  register_param(out, prefix + ".heatmap.kernel", heatmap.kernel);
  register_param(out, prefix + ".heatmap.bias", heatmap.bias);
  register_param(out, prefix + ".regression.kernel", regression.kernel);
  register_param(out, prefix + ".regression.bias", regression.bias);
}

HeadOutput head_forward(const Tensor& features, const HeadParams& params) {
  if (features.rank() != 3 || features.dim(0) != params.in_channels())
    throw DimensionError("head expects " + std::to_string(params.in_channels()) + " input channels, got " +
                         shape_string(features.shape()));
  const Tensor hidden = relu(apply(params.shared, features));
  return {apply(params.heatmap, hidden), apply(params.regression, hidden)};
}

double gaussian_radius(double length_cells, double width_cells, double min_overlap) {
  const double h = length_cells, w = width_cells, o = min_overlap;
  const double b1 = h + w, c1 = w * h * (1 - o) / (1 + o);
  const double r1 = (b1 + std::sqrt(b1 * b1 - 4 * c1)) / 2;
  const double b2 = 2 * (h + w), c2 = (1 - o) * w * h;
  const double r2 = (b2 + std::sqrt(b2 * b2 - 16 * c2)) / 2;
  const double a3 = 4 * o, b3 = -2 * o * (h + w), c3 = (o - 1) * w * h;
  const double r3 = (b3 + std::sqrt(b3 * b3 - 4 * a3 * c3)) / 2;
  return std::min({r1, r2, r3});
}

TargetMaps make_targets(const std::vector<BevBox>& boxes, const MapGeometry& geom, double min_overlap,
                        int min_radius) {
  const Index H = geom.height, W = geom.width, C = geom.num_classes;
  std::vector<double> heat(static_cast<std::size_t>(C * H * W), 0.0);
  std::vector<double> reg(static_cast<std::size_t>(kRegressionChannels * H * W), 0.0);
  std::vector<double> mask(static_cast<std::size_t>(H * W), 0.0);
  TargetMaps t;
  for (const BevBox& b : boxes) {
    if (b.class_id < 0 || b.class_id >= C) continue;
    const double fx = (b.center.x() - geom.x_min) / geom.cell, fy = (b.center.y() - geom.y_min) / geom.cell;
    const Index gx = static_cast<Index>(std::floor(fx)), gy = static_cast<Index>(std::floor(fy));
    if (gx < 0 || gx >= W || gy < 0 || gy >= H) continue;
    const int radius = std::max(min_radius, static_cast<int>(gaussian_radius(b.length / geom.cell,
                                                                              b.width / geom.cell, min_overlap)));
    const double sigma = (2.0 * radius + 1.0) / 6.0;
    double* plane = heat.data() + b.class_id * H * W;
    for (Index dy = -radius; dy <= radius; ++dy)
      for (Index dx = -radius; dx <= radius; ++dx) {
        const Index y = gy + dy, x = gx + dx;
        if (y < 0 || y >= H || x < 0 || x >= W) continue;
        const double g = std::exp(-static_cast<double>(dx * dx + dy * dy) / (2 * sigma * sigma));
        plane[y * W + x] = std::max(plane[y * W + x], g);
      }
    if (mask[gy * W + gx] != 0.0) continue;  // first box keeps a shared centre cell
    mask[gy * W + gx] = 1.0;
    const std::vector<double> row{fx - static_cast<double>(gx),
                                  fy - static_cast<double>(gy),
                                  std::log(b.length / geom.cell),
                                  std::log(b.width / geom.cell),
                                  std::sin(b.yaw),
                                  std::cos(b.yaw),
                                  b.velocity.x(),
                                  b.velocity.y()};
    for (Index c = 0; c < kRegressionChannels; ++c) reg[(c * H + gy) * W + gx] = row[c];
    t.centers.push_back({gy, gx});
    t.rows.push_back(row);
  }
  t.heatmap = Tensor({C, H, W}, std::move(heat));
  t.regression = Tensor({kRegressionChannels, H, W}, std::move(reg));
  t.mask = Tensor({H, W}, std::move(mask));
  return t;
}

Tensor focal_loss_sum(const Tensor& logits, const Tensor& target, double alpha, double beta) {
  if (logits.shape() != target.shape())
    throw DimensionError("focal loss: " + shape_string(logits.shape()) + " vs " + shape_string(target.shape()));
  const auto x = logits.values(), t = target.values();
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-x[i]));
    if (t[i] == 1.0) {
      total += std::pow(1 - p, alpha) * softplus(-x[i]);
    } else {
      total += std::pow(1 - t[i], beta) * std::pow(p, alpha) * softplus(x[i]);
    }
  }
  Tensor out = Tensor::scalar(total);
  if (autograd::should_record({&logits})) {
    autograd::record(out, [logits, target, out, alpha, beta] {
      const double g = out.grad()[0];
      const auto x = logits.values(), t = target.values();
      double* gx = autograd::grad_ptr(logits);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double p = 1.0 / (1.0 + std::exp(-x[i]));
        double d;
        if (t[i] == 1.0) {
          // d/dx of (1-p)^a * (-log p)
          d = -alpha * std::pow(1 - p, alpha) * p * softplus(-x[i]) - std::pow(1 - p, alpha + 1);
        } else {
          // d/dx of (1-t)^b * p^a * (-log(1-p))
          d = std::pow(1 - t[i], beta) * (alpha * std::pow(p, alpha) * (1 - p) * softplus(x[i]) + std::pow(p, alpha + 1));
        }
        gx[i] += g * d;
      }
    });
  }
  return out;
}

namespace {

// Sum of w_c |pred(c, cell) - row_c| over the target centres.
Tensor l1_at_centres(const Tensor& reg, const TargetMaps& t, const std::array<double, kRegressionChannels>& w) {
  const Index H = reg.dim(1), W = reg.dim(2);
  const auto v = reg.values();
  double total = 0;
  for (std::size_t k = 0; k < t.centers.size(); ++k)
    for (Index c = 0; c < kRegressionChannels; ++c)
      total += w[c] * std::abs(v[(c * H + t.centers[k].y) * W + t.centers[k].x] - t.rows[k][c]);
  Tensor out = Tensor::scalar(total);
  if (autograd::should_record({&reg})) {
    autograd::record(out, [reg, out, centers = t.centers, rows = t.rows, w, H, W] {
      const double g = out.grad()[0];
      const auto v = reg.values();
      double* gr = autograd::grad_ptr(reg);
      for (std::size_t k = 0; k < centers.size(); ++k)
        for (Index c = 0; c < kRegressionChannels; ++c) {
          const Index i = (c * H + centers[k].y) * W + centers[k].x;
          const double d = v[i] - rows[k][c];
          gr[i] += g * w[c] * (d > 0 ? 1.0 : d < 0 ? -1.0 : 0.0);
        }
    });
  }
  return out;
}

}  // namespace

LossTerms detection_loss(const HeadOutput& pred, const TargetMaps& targets, double reg_weight,
                         double velocity_weight) {
  if (pred.regression.shape() != targets.regression.shape())
    throw DimensionError("regression " + shape_string(pred.regression.shape()) + " vs targets " +
                         shape_string(targets.regression.shape()));
  const double norm = std::max<double>(1.0, static_cast<double>(targets.centers.size()));
  const Tensor heat = focal_loss_sum(pred.heatmap, targets.heatmap);
  std::array<double, kRegressionChannels> w;
  w.fill(1.0);
  w[6] = w[7] = velocity_weight;
  const Tensor reg = l1_at_centres(pred.regression, targets, w);
  LossTerms out;
  out.total = (heat + reg * reg_weight) * (1.0 / norm);
  out.heatmap = heat.item() / norm;
  out.regression = reg.item() / norm;
  return out;
}

std::vector<BevBox> nms(std::vector<BevBox> boxes, double iou_threshold) {
  std::stable_sort(boxes.begin(), boxes.end(), [](const BevBox& a, const BevBox& b) { return a.score > b.score; });
  std::vector<BevBox> keep;
  for (const BevBox& b : boxes) {
    bool suppressed = false;
    for (const BevBox& k : keep)
      if (k.class_id == b.class_id && bev_iou(k, b) > iou_threshold) {
        suppressed = true;
        break;
      }
    if (!suppressed) keep.push_back(b);
  }
  return keep;
}

std::vector<BevBox> decode_detections(const HeadOutput& pred, const MapGeometry& geom, const DecodeOptions& opt) {
  const Index C = pred.heatmap.dim(0), H = pred.heatmap.dim(1), W = pred.heatmap.dim(2);
  const auto logit = pred.heatmap.values(), reg = pred.regression.values();
  const double logit_threshold = std::log(opt.score_threshold / (1 - opt.score_threshold));
  std::vector<BevBox> candidates;
  for (Index c = 0; c < C; ++c)
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) {
        const double v = logit[(c * H + y) * W + x];
        if (!(v > logit_threshold)) continue;
        bool peak = true;
        for (Index dy = -1; dy <= 1 && peak; ++dy)
          for (Index dx = -1; dx <= 1; ++dx) {
            const Index yy = y + dy, xx = x + dx;
            if ((dy == 0 && dx == 0) || yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
            if (logit[(c * H + yy) * W + xx] > v) {
              peak = false;
              break;
            }
          }
        if (!peak) continue;
        auto r = [&](Index ch) { return reg[(ch * H + y) * W + x]; };
        BevBox b;
        b.center = {geom.x_min + (static_cast<double>(x) + r(0)) * geom.cell,
                    geom.y_min + (static_cast<double>(y) + r(1)) * geom.cell};
        b.length = std::exp(std::clamp(r(2), -5.0, 5.0)) * geom.cell;
        b.width = std::exp(std::clamp(r(3), -5.0, 5.0)) * geom.cell;
        b.yaw = wrap_angle(std::atan2(r(4), r(5)));
        b.velocity = {r(6), r(7)};
        b.class_id = static_cast<int>(c);
        b.score = 1.0 / (1.0 + std::exp(-v));
        candidates.push_back(b);
      }
  std::vector<BevBox> kept = nms(std::move(candidates), opt.nms_iou);
  if (static_cast<int>(kept.size()) > opt.max_out) kept.resize(static_cast<std::size_t>(opt.max_out));
  return kept;
}

std::string detection_line(std::int64_t frame, const BevBox& b) {
  nlohmann::json j;
  j["frame"] = frame;
  j["class"] = b.class_id;
  j["score"] = b.score;
  j["x"] = b.center.x();
  j["y"] = b.center.y();
  j["l"] = b.length;
  j["w"] = b.width;
  j["yaw"] = b.yaw;
  j["vx"] = b.velocity.x();
  j["vy"] = b.velocity.y();
  return j.dump();
}

BevBox parse_detection_line(const std::string& line, std::int64_t* frame) {
  try {
    const auto j = nlohmann::json::parse(line);
    BevBox b;
    if (frame) *frame = j.at("frame").get<std::int64_t>();
    b.class_id = j.at("class").get<int>();
    b.score = j.at("score").get<double>();
    b.center = {j.at("x").get<double>(), j.at("y").get<double>()};
    b.length = j.at("l").get<double>();
    b.width = j.at("w").get<double>();
    b.yaw = j.at("yaw").get<double>();
    b.velocity = {j.at("vx").get<double>(), j.at("vy").get<double>()};
    return b;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad detection record: ") + e.what(), 0);
  }
}

}  // namespace pcvd
