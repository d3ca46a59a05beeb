#pragma once

// Strided conv blocks over the BEV map, upsampled to the first block's
// resolution and concatenated along channels.

#include <random>
#include <vector>

#include "pcvd/nn.hpp"
#include "pcvd/tensor.hpp"

namespace pcvd {

struct BlockSpec {
  Index stride = 1;
  Index kernel = 3;
  Index channels = 16;
  int layers = 2;
};

struct BevFeatureMap {
  Tensor features;    // [c x h x w]
  double scale = 1.0;  // metres per cell
};

struct ConvLayer {
  Tensor kernel;  // [out x in x k x k]
  Tensor bias;    // [out]
  Index stride = 1;
};

struct BackboneParams {
  std::vector<BlockSpec> blocks;
  std::vector<std::vector<ConvLayer>> layers;  // per block

  static BackboneParams init(Index in_channels, std::vector<BlockSpec> blocks, std::mt19937_64& rng);
  Index out_channels() const;
  Index total_stride() const;
  void collect(ParameterMap& out, const std::string& prefix) const;
};

/// Throws ConfigError unless strides are 1 or 2, kernels odd and channels positive.
void validate_blocks(const std::vector<BlockSpec>& blocks);

/// ReLU after every convolution; output extent is input / first stride.
BevFeatureMap backbone_forward(const Tensor& bev, const BackboneParams& params, double input_scale = 1.0);

}  // namespace pcvd
