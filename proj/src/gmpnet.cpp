#include "pcvd/gmpnet.hpp"

#include <algorithm>
#include <numeric>

#include "pcvd/errors.hpp"

namespace pcvd {

GridGraph build_knn_graph(const Eigen::Matrix<double, Eigen::Dynamic, 2>& coords, Index k) {
  const Index n = coords.rows();
  if (k < 1) throw ConfigError("k-NN graph needs K >= 1");
  if (k >= n)
    throw ConfigError("k-NN graph needs K < node count (K=" + std::to_string(k) + ", n=" + std::to_string(n) + ")");
  GridGraph g;
  g.n = n;
  g.k = k;
  g.coords = coords;
  g.neighbors.resize(static_cast<std::size_t>(n * k));
  std::vector<std::pair<double, Index>> cand(static_cast<std::size_t>(n - 1));
  for (Index i = 0; i < n; ++i) {
    std::size_t c = 0;
    for (Index j = 0; j < n; ++j)
      if (j != i) cand[c++] = {(coords.row(j) - coords.row(i)).squaredNorm(), j};
    std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
    for (Index j = 0; j < k; ++j) g.neighbors[static_cast<std::size_t>(i * k + j)] = cand[j].second;
  }
  return g;
}

GruParams GruParams::init(Index input, Index state, std::mt19937_64& rng) {
  GruParams p;
  auto bias = [&] { return Tensor::zeros({state}).set_requires_grad(); };
  p.wz = glorot({input, state}, input, state, rng);
  p.uz = glorot({state, state}, state, state, rng);
  p.bz = bias();
  p.wr = glorot({input, state}, input, state, rng);
  p.ur = glorot({state, state}, state, state, rng);
  p.br = bias();
  p.wh = glorot({input, state}, input, state, rng);
  p.uh = glorot({state, state}, state, state, rng);
  p.bh = bias();
  return p;
}

GruParams GruParams::zeros(Index input, Index state) {
  GruParams p;
  p.wz = Tensor::zeros({input, state});
  p.uz = Tensor::zeros({state, state});
  p.bz = Tensor::zeros({state});
  p.wr = Tensor::zeros({input, state});
  p.ur = Tensor::zeros({state, state});
  p.br = Tensor::zeros({state});
  p.wh = Tensor::zeros({input, state});
  p.uh = Tensor::zeros({state, state});
  p.bh = Tensor::zeros({state});
  return p;
}

void GruParams::collect(ParameterMap& out, const std::string& prefix) const {
  register_param(out, prefix + ".wz", wz);
  register_param(out, prefix + ".uz", uz);
  register_param(out, prefix + ".bz", bz);
  register_param(out, prefix + ".wr", wr);
  register_param(out, prefix + ".ur", ur);
  register_param(out, prefix + ".br", br);
  register_param(out, prefix + ".wh", wh);
  register_param(out, prefix + ".uh", uh);
  register_param(out, prefix + ".bh", bh);
}

Tensor gru_cell(const Tensor& h, const Tensor& x, const GruParams& p) {
  const Tensor z = sigmoid(matmul(x, p.wz) + matmul(h, p.uz) + p.bz);
  const Tensor r = sigmoid(matmul(x, p.wr) + matmul(h, p.ur) + p.br);
  const Tensor cand = tanh(matmul(x, p.wh) + matmul(r * h, p.uh) + p.bh);
  return h + z * (cand - h);
}

GmpParams GmpParams::init(Index channels, Index message_channels, std::mt19937_64& rng) {
  GmpParams p;
  p.message = Linear::init(2 * channels, message_channels, rng);
  p.gru = GruParams::init(message_channels, channels, rng);
  p.output = Linear::init(channels, channels, rng);
  return p;
}

void GmpParams::collect(ParameterMap& out, const std::string& prefix) const {
  message.collect(out, prefix + ".message");
  gru.collect(out, prefix + ".gru");
  output.collect(out, prefix + ".output");
}

Tensor edge_features(const Tensor& h, const GridGraph& graph) {
  if (h.rank() != 2 || h.dim(0) != graph.n)
    throw DimensionError("edge_features: states " + shape_string(h.shape()) + " do not match a graph of " +
                         std::to_string(graph.n) + " nodes");
  std::vector<Index> self(graph.neighbors.size());
  for (Index i = 0; i < graph.n; ++i)
    std::fill_n(self.begin() + i * graph.k, graph.k, i);
  const Tensor e = gather_rows(h, graph.neighbors) - gather_rows(h, self);
  return reshape(e, {graph.n, graph.k, h.dim(1)});
}

Tensor aggregate_messages(const Tensor& h, const Tensor& edges, const GmpParams& params) {
  if (edges.rank() != 3 || edges.dim(0) != h.dim(0) || edges.dim(2) != h.dim(1))
    throw DimensionError("aggregate_messages: edges " + shape_string(edges.shape()) + " vs states " +
                         shape_string(h.shape()));
  const Index n = edges.dim(0), k = edges.dim(1), l = edges.dim(2);
  std::vector<Index> self(static_cast<std::size_t>(n * k));
  for (Index i = 0; i < n; ++i) std::fill_n(self.begin() + i * k, k, i);
  const Tensor input = concat({gather_rows(h, self), reshape(edges, {n * k, l})}, 1);
  const std::vector<int> counts(static_cast<std::size_t>(n), static_cast<int>(k));
  return masked_group_max(params.message(input), k, counts);
}

Tensor node_update(const Tensor& h, const Tensor& messages, const GmpParams& params) {
  return gru_cell(h, messages, params.gru);
}

Tensor run_gmpnet(const Tensor& h0, const GridGraph& graph, const GmpParams& params, int steps) {
  if (steps < 0) throw ConfigError("message passing steps must be >= 0");
  Tensor h = h0;
  for (int s = 0; s < steps; ++s) h = node_update(h, aggregate_messages(h, edge_features(h, graph), params), params);
  return params.output(h);
}

Tensor scatter_to_bev(const Tensor& v, const GridSet& grids, const GridSpec& spec) {
  return scatter_cells(v, grids.cells, spec.height(), spec.width());
}

}  // namespace pcvd
