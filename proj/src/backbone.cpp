#include "pcvd/backbone.hpp"

#include "pcvd/errors.hpp"

namespace pcvd {

void validate_blocks(const std::vector<BlockSpec>& blocks) {
  if (blocks.empty()) throw ConfigError("backbone needs at least one block");
  for (const auto& b : blocks) {
    if (b.stride != 1 && b.stride != 2) throw ConfigError("block stride must be 1 or 2");
    if (b.kernel < 1 || b.kernel % 2 == 0) throw ConfigError("block kernel size must be odd");
    if (b.channels < 1 || b.layers < 1) throw ConfigError("block needs >= 1 channel and >= 1 layer");
  }
}

BackboneParams BackboneParams::init(Index in_channels, std::vector<BlockSpec> blocks, std::mt19937_64& rng) {
  validate_blocks(blocks);
  BackboneParams p;
  p.blocks = std::move(blocks);
  Index in = in_channels;
  for (const auto& b : p.blocks) {
    std::vector<ConvLayer> layers;
    for (int l = 0; l < b.layers; ++l) {
      const Index fan_in = in * b.kernel * b.kernel, fan_out = b.channels * b.kernel * b.kernel;
      ConvLayer c;
      c.kernel = glorot({b.channels, in, b.kernel, b.kernel}, fan_in, fan_out, rng);
      c.bias = Tensor::zeros({b.channels}).set_requires_grad();
      c.stride = l == 0 ? b.stride : 1;
      layers.push_back(c);
      in = b.channels;
    }
    p.layers.push_back(std::move(layers));
  }
  return p;
}

Index BackboneParams::out_channels() const {
  Index c = 0;
  for (const auto& b : blocks) c += b.channels;
  return c;
}

Index BackboneParams::total_stride() const {
  Index s = 1;
  for (const auto& b : blocks) s *= b.stride;
  return s;
}

void BackboneParams::collect(ParameterMap& out, const std::string& prefix) const {
  for (std::size_t b = 0; b < layers.size(); ++b)
    for (std::size_t l = 0; l < layers[b].size(); ++l) {
      const std::string name = prefix + ".block" + std::to_string(b) + ".conv" + std::to_string(l);
      register_param(out, name + ".kernel", layers[b][l].kernel);
      register_param(out, name + ".bias", layers[b][l].bias);
    }
}

BevFeatureMap backbone_forward(const Tensor& bev, const BackboneParams& params, double input_scale) {
  if (bev.rank() != 3) throw DimensionError("backbone expects [c,h,w], got " + shape_string(bev.shape()));
  const Index total = params.total_stride();
  if (bev.dim(1) % total != 0 || bev.dim(2) % total != 0)
    throw ConfigError("BEV extent " + shape_string(bev.shape()) + " is not divisible by the total stride " +
                      std::to_string(total));
  std::vector<Tensor> outs;
  Tensor x = bev;
  Index stride_so_far = 1;
  for (std::size_t b = 0; b < params.layers.size(); ++b) {
    for (const auto& layer : params.layers[b]) {
      const Index pad = layer.kernel.dim(2) / 2;
      x = relu(conv2d(x, layer.kernel, layer.bias, layer.stride, pad));
    }
    stride_so_far *= params.blocks[b].stride;
    const Index factor = stride_so_far / params.blocks.front().stride;
    outs.push_back(factor == 1 ? x : upsample_nearest(x, factor));
  }
  BevFeatureMap out;
  out.features = outs.size() == 1 ? outs.front() : concat(outs, 0);
  out.scale = input_scale * static_cast<double>(params.blocks.front().stride);
  return out;
}

}  // namespace pcvd
