#pragma once

// Long-term aggregation over keyframe BEV maps: ConvGRU memory with spatial
// (self-attention) and temporal (deformable, motion-guided) attention.

#include <random>
#include <vector>

#include "pcvd/nn.hpp"
#include "pcvd/tensor.hpp"

namespace pcvd {

/// 3x3 channel-preserving kernels of the gated update, no biases.
struct ConvGruParams {
  Tensor w, wz, wr;  // input kernels
  Tensor u, uz, ur;  // memory kernels

  static ConvGruParams init(Index channels, std::mt19937_64& rng);
  void collect(ParameterMap& out, const std::string& prefix) const;
};

/// z = s(Wz*X + Uz*H), r = s(Wr*X + Ur*H), H~ = tanh(W*X + U*(r o H)), H' = (1-z) o H + z o H~.
Tensor conv_gru_step(const Tensor& x, const Tensor& h_prev, const ConvGruParams& p);

/// Pointwise embeddings c -> c/2 and output head c/2 -> c.
struct StaParams {
  Tensor key, query, value;  // [c x c']
  Tensor out;                // [c' x c]

  static StaParams init(Index channels, std::mt19937_64& rng);
  void collect(ParameterMap& out, const std::string& prefix) const;
};

/// X' = W_out(softmax(Q K^T) V) + X over the h*w flattened positions.
Tensor spatial_attention(const Tensor& x, const StaParams& p);
/// Row-stochastic attention matrix [hw x hw] used by spatial_attention.
Tensor spatial_attention_weights(const Tensor& x, const StaParams& p);

struct TtaLayer {
  Tensor offset_kernel;  // [2k^2 x 2c x 3 x 3], or [2k^2 x c x 3 x 3] without the motion map
  Tensor offset_bias;    // [2k^2]
  Tensor kernel;         // [c x c x k x k]
};

struct TtaParams {
  std::vector<TtaLayer> layers;
  bool motion_map = true;  // offsets from [H, H - X'], or from H alone

  /// Zero offset predictor and an identity-centred deformable kernel.
  static TtaParams init(Index channels, int layers, std::mt19937_64& rng, bool motion_map = true);
  void collect(ParameterMap& out, const std::string& prefix) const;
};

/// Refines the previous memory with motion-guided deformable convolutions.
Tensor temporal_attention(const Tensor& h_prev, const Tensor& x_attended, const TtaParams& p);

struct AstGruParams {
  ConvGruParams gru;
  bool use_sta = true;
  bool use_tta = true;
  StaParams sta;
  TtaParams tta;

  static AstGruParams init(Index channels, bool use_sta, bool use_tta, int tta_layers, std::mt19937_64& rng,
                           bool motion_map = true);
  void collect(ParameterMap& out, const std::string& prefix) const;
};

/// One memory per input step, starting from zero memory.
std::vector<Tensor> ast_gru_forward(const std::vector<Tensor>& sequence, const AstGruParams& p);

/// Forward and reversed-time passes with independent parameters, fused per step as [H_f, H_b].
std::vector<Tensor> bidirectional_forward(const std::vector<Tensor>& sequence, const AstGruParams& fwd,
                                          const AstGruParams& bwd);

}  // namespace pcvd
