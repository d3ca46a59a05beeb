#pragma once

// Grid message passing: a fixed k-NN graph over pillar nodes, S rounds of
// max-aggregated edge messages with a GRU node update, then a projection.

#include <Eigen/Core>

#include <random>
#include <vector>

#include "pcvd/grid.hpp"
#include "pcvd/nn.hpp"
#include "pcvd/tensor.hpp"

namespace pcvd {

struct GridGraph {
  Index n = 0;
  Index k = 0;
  std::vector<Index> neighbors;  // row-major [n x k]
  Eigen::Matrix<double, Eigen::Dynamic, 2> coords;

  Index neighbor(Index i, Index j) const { return neighbors[static_cast<std::size_t>(i * k + j)]; }
};

/// Exact k-NN without self loops; rows sorted by distance then node id.
GridGraph build_knn_graph(const Eigen::Matrix<double, Eigen::Dynamic, 2>& coords, Index k);
inline GridGraph build_knn_graph(const GridSet& grids, Index k) { return build_knn_graph(grids.centers, k); }

/// Standard GRU cell over row vectors: state L, input I.
struct GruParams {
  Tensor wz, uz, bz;
  Tensor wr, ur, br;
  Tensor wh, uh, bh;

  static GruParams init(Index input, Index state, std::mt19937_64& rng);
  static GruParams zeros(Index input, Index state);
  void collect(ParameterMap& out, const std::string& prefix) const;
};

/// h' = (1 - z) * h + z * tanh(x Wh + (r * h) Uh + bh).
Tensor gru_cell(const Tensor& h, const Tensor& x, const GruParams& p);

struct GmpParams {
  Linear message;  // 2L -> L'
  GruParams gru;   // state L, input L'
  Linear output;   // L -> L

  static GmpParams init(Index channels, Index message_channels, std::mt19937_64& rng);
  void collect(ParameterMap& out, const std::string& prefix) const;
};

/// [n x k x L]: entry (i, j) = h[neighbor(i, j)] - h[i].
Tensor edge_features(const Tensor& h, const GridGraph& graph);
/// m_i = max_j message([h_i, e_ji]) -> [n x L'].
Tensor aggregate_messages(const Tensor& h, const Tensor& edges, const GmpParams& params);
Tensor node_update(const Tensor& h, const Tensor& messages, const GmpParams& params);
/// S message-passing steps from h0 followed by the output projection.
Tensor run_gmpnet(const Tensor& h0, const GridGraph& graph, const GmpParams& params, int steps);

/// [L x H x W] map with each grid's features at its cell.
Tensor scatter_to_bev(const Tensor& v, const GridSet& grids, const GridSpec& spec);

}  // namespace pcvd
