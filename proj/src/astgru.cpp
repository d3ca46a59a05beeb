#include "pcvd/astgru.hpp"

#include <algorithm>

#include "pcvd/errors.hpp"

namespace pcvd {

namespace {

constexpr Index kTap = 3;

Tensor conv3(const Tensor& x, const Tensor& k) { return conv2d(x, k, 1, kTap / 2); }

void require_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(what) + ": " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

// [c x h x w] -> [hw x c]
Tensor positions(const Tensor& x) { return transpose(reshape(x, {x.dim(0), x.dim(1) * x.dim(2)})); }

}  // namespace

ConvGruParams ConvGruParams::init(Index channels, std::mt19937_64& rng) {
  const Index fan = channels * kTap * kTap;
  auto k = [&] { return glorot({channels, channels, kTap, kTap}, fan, fan, rng); };
  ConvGruParams p;
  p.w = k();
  p.wz = k();
  p.wr = k();
  p.u = k();
  p.uz = k();
  p.ur = k();
  return p;
}

void ConvGruParams::collect(ParameterMap& out, const std::string& prefix) const {
  register_param(out, prefix + ".w", w);
  register_param(out, prefix + ".wz", wz);
  register_param(out, prefix + ".wr", wr);
  register_param(out, prefix + ".u", u);
  register_param(out, prefix + ".uz", uz);
  register_param(out, prefix + ".ur", ur);
}

Tensor conv_gru_step(const Tensor& x, const Tensor& h_prev, const ConvGruParams& p) {
  require_same(x, h_prev, "conv_gru_step");
  const Tensor z = sigmoid(conv3(x, p.wz) + conv3(h_prev, p.uz));
  const Tensor r = sigmoid(conv3(x, p.wr) + conv3(h_prev, p.ur));
  const Tensor cand = tanh(conv3(x, p.w) + conv3(r * h_prev, p.u));
  return h_prev + z * (cand - h_prev);
}

StaParams StaParams::init(Index channels, std::mt19937_64& rng) {
  if (channels % 2 != 0) throw ConfigError("spatial attention needs an even channel count");
  const Index half = channels / 2;
  StaParams p;
  p.key = glorot({channels, half}, channels, half, rng);
  p.query = glorot({channels, half}, channels, half, rng);
  p.value = glorot({channels, half}, channels, half, rng);
  p.out = glorot({half, channels}, half, channels, rng);
  return p;
}

void StaParams::collect(ParameterMap& out, const std::string& prefix) const {
  register_param(out, prefix + ".key", key);
  register_param(out, prefix + ".query", query);
  register_param(out, prefix + ".value", value);
  register_param(out, prefix + ".out", this->out);
}

Tensor spatial_attention_weights(const Tensor& x, const StaParams& p) {
  const Tensor flat = positions(x);
  return softmax_rows(matmul(matmul(flat, p.query), transpose(matmul(flat, p.key))));
}

Tensor spatial_attention(const Tensor& x, const StaParams& p) {
  if (x.rank() != 3) throw DimensionError("spatial_attention expects [c,h,w], got " + shape_string(x.shape()));
  const Tensor flat = positions(x);
  const Tensor attn = spatial_attention_weights(x, p);
  const Tensor mixed = matmul(matmul(attn, matmul(flat, p.value)), p.out);  // [hw x c]
  return reshape(transpose(mixed), x.shape()) + x;
}

TtaParams TtaParams::init(Index channels, int layers, std::mt19937_64& rng, bool motion_map) {
  if (layers < 1) throw ConfigError("temporal attention needs at least one layer");
  TtaParams p;
  p.motion_map = motion_map;
  const Index taps = kTap * kTap;
  for (int l = 0; l < layers; ++l) {
    TtaLayer layer;
    layer.offset_kernel = Tensor::zeros({2 * taps, (motion_map ? 2 : 1) * channels, kTap, kTap}).set_requires_grad();
    layer.offset_bias = Tensor::zeros({2 * taps}).set_requires_grad();
    const double noise = 0.1 / static_cast<double>(channels * taps);
    layer.kernel = Tensor::uniform({channels, channels, kTap, kTap}, rng, -noise, noise);
    auto k = layer.kernel.mutable_values();
    for (Index c = 0; c < channels; ++c) k[((c * channels + c) * kTap + 1) * kTap + 1] += 1.0;
    layer.kernel.set_requires_grad();
    p.layers.push_back(layer);
  }
  return p;
}

void TtaParams::collect(ParameterMap& out, const std::string& prefix) const {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string name = prefix + ".layer" + std::to_string(l);
    register_param(out, name + ".offset_kernel", layers[l].offset_kernel);
    register_param(out, name + ".offset_bias", layers[l].offset_bias);
    register_param(out, name + ".kernel", layers[l].kernel);
  }
}

Tensor temporal_attention(const Tensor& h_prev, const Tensor& x_attended, const TtaParams& p) {
  require_same(h_prev, x_attended, "temporal_attention");
  Tensor h = h_prev;
  for (const auto& layer : p.layers) {
    const Tensor guide = p.motion_map ? concat({h, h - x_attended}, 0) : h;
    const Tensor offsets = conv2d(guide, layer.offset_kernel, layer.offset_bias, 1, kTap / 2);
    h = deform_conv2d(h, offsets, layer.kernel);
  }
  return h;
}

AstGruParams AstGruParams::init(Index channels, bool use_sta, bool use_tta, int tta_layers, std::mt19937_64& rng,
                                bool motion_map) {
  AstGruParams p;
  p.gru = ConvGruParams::init(channels, rng);
  p.use_sta = use_sta;
  p.use_tta = use_tta;
  if (use_sta) p.sta = StaParams::init(channels, rng);
  if (use_tta) p.tta = TtaParams::init(channels, tta_layers, rng, motion_map);
  return p;
}

void AstGruParams::collect(ParameterMap& out, const std::string& prefix) const {
  gru.collect(out, prefix + ".gru");
  if (use_sta) sta.collect(out, prefix + ".sta");
  if (use_tta) tta.collect(out, prefix + ".tta");
}

std::vector<Tensor> ast_gru_forward(const std::vector<Tensor>& sequence, const AstGruParams& p) {
  if (sequence.empty()) throw ContractError("ast_gru_forward needs a non-empty sequence");
  std::vector<Tensor> memories;
  Tensor h = Tensor::zeros(sequence.front().shape());
  for (std::size_t t = 0; t < sequence.size(); ++t) {
    const Tensor x = p.use_sta ? spatial_attention(sequence[t], p.sta) : sequence[t];
    if (t > 0 && p.use_tta) h = temporal_attention(h, x, p.tta);
    h = conv_gru_step(x, h, p.gru);
    memories.push_back(h);
  }
  return memories;
}

std::vector<Tensor> bidirectional_forward(const std::vector<Tensor>& sequence, const AstGruParams& fwd,
                                          const AstGruParams& bwd) {
  const std::vector<Tensor> f = ast_gru_forward(sequence, fwd);
  std::vector<Tensor> reversed(sequence.rbegin(), sequence.rend());
  std::vector<Tensor> b = ast_gru_forward(reversed, bwd);
  std::reverse(b.begin(), b.end());
  std::vector<Tensor> fused;
  for (std::size_t t = 0; t < f.size(); ++t) fused.push_back(concat({f[t], b[t]}, 0));
  return fused;
}

}  // namespace pcvd
