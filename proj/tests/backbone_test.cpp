#include "pcvd/backbone.hpp"

#include <gtest/gtest.h>

#include <random>

#include "gradcheck.hpp"

namespace pcvd {
namespace {

TEST(Backbone, IdentityOneByOneBlockPassesNonNegativeInput) {
  std::mt19937_64 rng(1);
  BackboneParams p = BackboneParams::init(3, {{1, 1, 3, 1}}, rng);
  auto k = p.layers[0][0].kernel.mutable_values();
  std::fill(k.begin(), k.end(), 0.0);
  for (Index c = 0; c < 3; ++c) k[c * 3 + c] = 1.0;
  const Tensor x = Tensor::uniform({3, 4, 4}, rng, 0, 2);
  const BevFeatureMap out = backbone_forward(x, p, 0.5);
  EXPECT_EQ(out.features.shape(), x.shape());
  for (Index i = 0; i < x.numel(); ++i) EXPECT_EQ(out.features.values()[i], x.values()[i]);
  EXPECT_EQ(out.scale, 0.5);
}

TEST(Backbone, TwoBlocksConcatenateAtFirstResolution) {
  std::mt19937_64 rng(2);
  const BackboneParams p = BackboneParams::init(1, {{1, 3, 4, 2}, {2, 3, 6, 2}}, rng);
  EXPECT_EQ(p.out_channels(), 10);
  const BevFeatureMap out = backbone_forward(Tensor::uniform({1, 8, 8}, rng, -1, 1), p);
  EXPECT_EQ(out.features.shape(), (Shape{10, 8, 8}));
  EXPECT_TRUE(out.features.all_finite());
}

TEST(Backbone, ExtentFollowsFirstStride) {
  std::mt19937_64 rng(3);
  const BackboneParams p = BackboneParams::init(2, {{2, 3, 4, 1}, {2, 3, 4, 1}, {1, 3, 4, 1}}, rng);
  const BevFeatureMap out = backbone_forward(Tensor::uniform({2, 8, 8}, rng, -1, 1), p, 0.25);
  EXPECT_EQ(out.features.shape(), (Shape{12, 4, 4}));
  EXPECT_EQ(out.scale, 0.5);
}

TEST(Backbone, IndivisibleExtentIsConfigError) {
  std::mt19937_64 rng(4);
  const BackboneParams p = BackboneParams::init(1, {{2, 3, 2, 1}, {2, 3, 2, 1}}, rng);
  EXPECT_THROW(backbone_forward(Tensor::zeros({1, 6, 6}), p), ConfigError);
  EXPECT_THROW(BackboneParams::init(1, {{3, 3, 2, 1}}, rng), ConfigError);
  EXPECT_THROW(BackboneParams::init(1, {{1, 2, 2, 1}}, rng), ConfigError);
  EXPECT_THROW(BackboneParams::init(1, {}, rng), ConfigError);
}

TEST(Backbone, TranslationCovariance) {
  std::mt19937_64 rng(5);
  const BackboneParams p = BackboneParams::init(1, {{2, 3, 3, 1}, {1, 3, 3, 1}}, rng);
  const Index n = 16;
  Tensor x = Tensor::zeros({1, n, n});
  Tensor shifted = Tensor::zeros({1, n, n});
  std::uniform_real_distribution<double> u(-1, 1);
  for (Index y = 0; y < n; ++y)
    for (Index c = 0; c < n; ++c) x.mutable_values()[y * n + c] = u(rng);
  for (Index y = 0; y < n; ++y)
    for (Index c = 2; c < n; ++c) shifted.mutable_values()[y * n + c] = x.values()[y * n + c - 2];
  const Tensor a = backbone_forward(x, p).features, b = backbone_forward(shifted, p).features;
  for (Index ch = 0; ch < a.dim(0); ++ch)
    for (Index y = 2; y < 6; ++y)
      for (Index c = 2; c < 5; ++c) EXPECT_NEAR(b.at({ch, y, c + 1}), a.at({ch, y, c}), 1e-12);
}

TEST(Backbone, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  BackboneParams p = BackboneParams::init(2, {{1, 3, 2, 1}, {2, 3, 2, 1}}, rng);
  for (auto& block : p.layers)
    for (auto& l : block)
      for (double& v : l.bias.mutable_values()) v = 0.3;
  Tensor x = testing::random_param({2, 4, 4}, rng);
  const Tensor mix = Tensor::uniform({4, 4, 4}, rng, -1, 1);
  ParameterMap params;
  p.collect(params, "bb");
  std::vector<Tensor> inputs{x};
  for (auto& [_, t] : params) inputs.push_back(t);
  const auto report = testing::gradcheck(
      [&](const std::vector<Tensor>& in) { return sum(backbone_forward(in[0], p).features * mix); }, inputs);
  EXPECT_TRUE(report.ok) << report.detail;
}

}  // namespace
}  // namespace pcvd
