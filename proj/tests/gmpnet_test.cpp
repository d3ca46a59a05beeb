#include "pcvd/gmpnet.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "gradcheck.hpp"

namespace pcvd {
namespace {

using Coords = Eigen::Matrix<double, Eigen::Dynamic, 2>;

Coords line(std::initializer_list<double> xs) {
  Coords c(static_cast<Index>(xs.size()), 2);
  Index i = 0;
  for (double x : xs) c.row(i++) << x, 0.0;
  return c;
}

Coords random_coords(Index n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-10, 10);
  Coords c(n, 2);
  for (Index i = 0; i < n; ++i) c.row(i) << u(rng), u(rng);
  return c;
}

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

TEST(KnnGraph, ForcedByDistances) {
  const GridGraph g = build_knn_graph(line({0, 1, 3}), 1);
  EXPECT_EQ(g.neighbors, (std::vector<Index>{1, 0, 1}));
}

TEST(KnnGraph, DuplicatesBreakTiesById) {
  Coords c(4, 2);
  c << 0, 0, 1, 0, 1, 0, 1, 0;
  const GridGraph g = build_knn_graph(c, 2);
  EXPECT_EQ(g.neighbor(0, 0), 1);
  EXPECT_EQ(g.neighbor(0, 1), 2);
  EXPECT_EQ(g.neighbor(3, 0), 1);
  EXPECT_EQ(g.neighbor(3, 1), 2);
  EXPECT_EQ(build_knn_graph(c, 2).neighbors, g.neighbors);
}

TEST(KnnGraph, MatchesSortAllOracle) {
  std::mt19937_64 rng(1);
  const Coords c = random_coords(200, rng);
  const GridGraph g = build_knn_graph(c, 20);
  for (Index i = 0; i < 200; ++i) {
    std::vector<Index> ids;
    for (Index j = 0; j < 200; ++j)
      if (j != i) ids.push_back(j);
    std::stable_sort(ids.begin(), ids.end(), [&](Index a, Index b) {
      return (c.row(a) - c.row(i)).squaredNorm() < (c.row(b) - c.row(i)).squaredNorm();
    });
    for (Index k = 0; k < 20; ++k) {
      EXPECT_EQ(g.neighbor(i, k), ids[k]);
      EXPECT_NE(g.neighbor(i, k), i);
    }
  }
}

TEST(KnnGraph, KMustBeBelowNodeCount) {
  EXPECT_THROW(build_knn_graph(line({0, 1, 2}), 3), ConfigError);
  EXPECT_THROW(build_knn_graph(line({0}), 1), ConfigError);
}

TEST(EdgeFeatures, EqualStatesGiveZeroEdges) {
  const GridGraph g = build_knn_graph(line({0, 1, 2, 5}), 2);
  const Tensor e = edge_features(Tensor::full({4, 3}, 1.7), g);
  EXPECT_EQ(e.shape(), (Shape{4, 2, 3}));
  for (double v : e.values()) EXPECT_EQ(v, 0.0);
}

TEST(EdgeFeatures, AsymmetricSign) {
  const GridGraph g = build_knn_graph(line({0, 1}), 1);
  const Tensor e = edge_features(Tensor({2, 1}, {1, 3}), g);
  EXPECT_EQ(e.values()[0], 2.0);
  EXPECT_EQ(e.values()[1], -2.0);
}

TEST(EdgeFeatures, MutualPairsCancel) {
  std::mt19937_64 rng(2);
  const Coords c = random_coords(30, rng);
  const GridGraph g = build_knn_graph(c, 4);
  const Tensor h = Tensor::uniform({30, 5}, rng, -1, 1);
  const Tensor e = edge_features(h, g);
  int mutual = 0;
  for (Index i = 0; i < 30; ++i)
    for (Index a = 0; a < 4; ++a) {
      const Index j = g.neighbor(i, a);
      for (Index b = 0; b < 4; ++b) {
        if (g.neighbor(j, b) != i) continue;
        ++mutual;
        for (Index l = 0; l < 5; ++l) EXPECT_EQ(e.at({i, a, l}) + e.at({j, b, l}), 0.0);
      }
    }
  EXPECT_GT(mutual, 0);
}

TEST(AggregateMessages, SingleNeighbourNeedsNoMax) {
  std::mt19937_64 rng(3);
  const GridGraph g = build_knn_graph(line({0, 1, 3}), 1);
  const Tensor h = Tensor::uniform({3, 2}, rng, -1, 1);
  const GmpParams p = GmpParams::init(2, 3, rng);
  const Tensor m = aggregate_messages(h, edge_features(h, g), p);
  const Tensor direct = p.message(concat({h, reshape(edge_features(h, g), {3, 2})}, 1));
  for (Index i = 0; i < m.numel(); ++i) EXPECT_NEAR(m.values()[i], direct.values()[i], 1e-15);
}

TEST(AggregateMessages, NeighbourOrderDoesNotMatter) {
  std::mt19937_64 rng(4);
  const Coords c = random_coords(10, rng);
  GridGraph g = build_knn_graph(c, 3);
  const Tensor h = Tensor::uniform({10, 4}, rng, -1, 1);
  const GmpParams p = GmpParams::init(4, 4, rng);
  const Tensor a = aggregate_messages(h, edge_features(h, g), p);
  for (Index i = 0; i < g.n; ++i) std::reverse(g.neighbors.begin() + i * 3, g.neighbors.begin() + i * 3 + 3);
  const Tensor b = aggregate_messages(h, edge_features(h, g), p);
  for (Index i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.values()[i], b.values()[i], 1e-12);
}

TEST(AggregateMessages, MatchesLoopOracle) {
  std::mt19937_64 rng(5);
  const Coords c = random_coords(5, rng);
  const GridGraph g = build_knn_graph(c, 2);
  const Tensor h = Tensor::uniform({5, 4}, rng, -1, 1);
  const GmpParams p = GmpParams::init(4, 4, rng);
  const Tensor m = aggregate_messages(h, edge_features(h, g), p);
  const auto w = p.message.weight.values(), b = p.message.bias.values(), hv = h.values();
  for (Index i = 0; i < 5; ++i) {
    for (Index o = 0; o < 4; ++o) {
      double best = -1e300;
      for (Index k = 0; k < 2; ++k) {
        const Index j = g.neighbor(i, k);
        double acc = b[o];
        for (Index l = 0; l < 4; ++l) {
          acc += hv[i * 4 + l] * w[l * 4 + o];
          acc += (hv[j * 4 + l] - hv[i * 4 + l]) * w[(4 + l) * 4 + o];
        }
        best = std::max(best, acc);
      }
      EXPECT_NEAR(m.values()[i * 4 + o], best, 1e-12);
    }
  }
}

TEST(NodeUpdate, ClosedUpdateGateKeepsState) {
  std::mt19937_64 rng(6);
  GmpParams p = GmpParams::init(3, 2, rng);
  std::ranges::fill(p.gru.bz.mutable_values(), -50.0);
  const Tensor h = Tensor::uniform({4, 3}, rng, -1, 1);
  const Tensor m = Tensor::uniform({4, 2}, rng, -1, 1);
  const Tensor out = node_update(h, m, p);
  for (Index i = 0; i < h.numel(); ++i) EXPECT_NEAR(out.values()[i], h.values()[i], 1e-6);
}

TEST(NodeUpdate, ZeroWeightsHalveState) {
  GmpParams p;
  p.gru = GruParams::zeros(2, 3);
  const Tensor h({2, 3}, {1, -2, 3, 0.5, 0, -4});
  const Tensor out = node_update(h, Tensor::full({2, 2}, 7.0), p);
  for (Index i = 0; i < h.numel(); ++i) EXPECT_DOUBLE_EQ(out.values()[i], 0.5 * h.values()[i]);
}

TEST(NodeUpdate, MatchesScalarGruOracle) {
  std::mt19937_64 rng(7);
  const Index L = 3, I = 2, n = 4;
  GmpParams p = GmpParams::init(L, I, rng);
  for (Tensor* t : {&p.gru.bz, &p.gru.br, &p.gru.bh})
    for (double& v : t->mutable_values()) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  const Tensor h = Tensor::uniform({n, L}, rng, -1, 1);
  const Tensor x = Tensor::uniform({n, I}, rng, -1, 1);
  const Tensor out = node_update(h, x, p);
  const auto& g = p.gru;
  auto W = [](const Tensor& t, Index a, Index b) { return t.values()[a * t.dim(1) + b]; };
  for (Index i = 0; i < n; ++i) {
    std::vector<double> r(L);
    for (Index o = 0; o < L; ++o) {
      double a = g.br.values()[o];
      for (Index k = 0; k < I; ++k) a += x.at({i, k}) * W(g.wr, k, o);
      for (Index k = 0; k < L; ++k) a += h.at({i, k}) * W(g.ur, k, o);
      r[o] = sigm(a);
    }
    for (Index o = 0; o < L; ++o) {
      double az = g.bz.values()[o], ah = g.bh.values()[o];
      for (Index k = 0; k < I; ++k) {
        az += x.at({i, k}) * W(g.wz, k, o);
        ah += x.at({i, k}) * W(g.wh, k, o);
      }
      for (Index k = 0; k < L; ++k) {
        az += h.at({i, k}) * W(g.uz, k, o);
        ah += r[k] * h.at({i, k}) * W(g.uh, k, o);
      }
      const double z = sigm(az);
      EXPECT_NEAR(out.at({i, o}), (1 - z) * h.at({i, o}) + z * std::tanh(ah), 1e-12);
    }
  }
}

TEST(RunGmpnet, ZeroStepsIsOutputProjection) {
  std::mt19937_64 rng(8);
  const GridGraph g = build_knn_graph(line({0, 1, 2}), 1);
  const GmpParams p = GmpParams::init(4, 4, rng);
  const Tensor h0 = Tensor::uniform({3, 4}, rng, -1, 1);
  const Tensor v = run_gmpnet(h0, g, p, 0), direct = p.output(h0);
  for (Index i = 0; i < v.numel(); ++i) EXPECT_EQ(v.values()[i], direct.values()[i]);
}

TEST(RunGmpnet, DisconnectedClustersAreIndependent) {
  std::mt19937_64 rng(9);
  const GridGraph g = build_knn_graph(line({0, 1, 100, 101}), 1);
  const GmpParams p = GmpParams::init(3, 3, rng);
  Tensor h0 = Tensor::uniform({4, 3}, rng, -1, 1);
  const Tensor a = run_gmpnet(h0, g, p, 5);
  for (Index i = 6; i < 12; ++i) h0.mutable_values()[i] += 0.7;
  const Tensor b = run_gmpnet(h0, g, p, 5);
  for (Index i = 0; i < 6; ++i) EXPECT_EQ(a.values()[i], b.values()[i]);
}

TEST(RunGmpnet, ReceptiveFieldGrowsWithSteps) {
  // Path 0-1-2-3 with K=1: node 1 listens to 0 or 2, node 2 to 1 or 3.
  const GridGraph g = build_knn_graph(line({0, 1.0, 2.1, 3.3}), 1);
  ASSERT_EQ(g.neighbors, (std::vector<Index>{1, 0, 1, 2}));
  // Node 1 hears node 0 only; use a graph where 1 hears 2 and 2 hears 3.
  GridGraph path = g;
  path.neighbors = {1, 2, 3, 2};
  std::mt19937_64 rng(10);
  const GmpParams p = GmpParams::init(4, 4, rng);
  Tensor h0 = Tensor::uniform({4, 4}, rng, -1, 1);
  auto probe = [&](int steps) {
    Tensor base = run_gmpnet(h0, path, p, steps);
    Tensor bumped_h0 = h0.detach();
    for (Index l = 0; l < 4; ++l) bumped_h0.mutable_values()[3 * 4 + l] += 0.5;
    Tensor bumped = run_gmpnet(bumped_h0, path, p, steps);
    double diff = 0;
    for (Index l = 0; l < 4; ++l) diff += std::abs(base.at({1, l}) - bumped.at({1, l}));
    return diff;
  };
  EXPECT_EQ(probe(1), 0.0);
  EXPECT_GT(probe(2), 1e-9);
}

TEST(RunGmpnet, RelabelingEquivariance) {
  std::mt19937_64 rng(11);
  const Coords c = random_coords(12, rng);
  const GridGraph g = build_knn_graph(c, 3);
  const GmpParams p = GmpParams::init(4, 5, rng);
  const Tensor h0 = Tensor::uniform({12, 4}, rng, -1, 1);
  std::vector<Index> perm(12);
  std::iota(perm.begin(), perm.end(), Index{0});
  std::shuffle(perm.begin(), perm.end(), rng);  // new node i is old node perm[i]
  std::vector<Index> inv(12);
  for (Index i = 0; i < 12; ++i) inv[perm[i]] = i;
  GridGraph pg = g;
  for (Index i = 0; i < 12; ++i)
    for (Index k = 0; k < 3; ++k) pg.neighbors[i * 3 + k] = inv[g.neighbor(perm[i], k)];
  const Tensor a = run_gmpnet(h0, g, p, 3);
  const Tensor b = run_gmpnet(gather_rows(h0, perm), pg, p, 3);
  for (Index i = 0; i < 12; ++i)
    for (Index l = 0; l < 4; ++l) EXPECT_NEAR(b.at({i, l}), a.at({perm[i], l}), 1e-14);
}

TEST(RunGmpnet, ZeroMessagesStayFinite) {
  std::mt19937_64 rng(12);
  const Coords c = random_coords(8, rng);
  const GridGraph g = build_knn_graph(c, 3);
  GmpParams p = GmpParams::init(4, 4, rng);
  std::ranges::fill(p.message.weight.mutable_values(), 0.0);
  const Tensor v = run_gmpnet(Tensor::uniform({8, 4}, rng, -3, 3), g, p, 10);
  EXPECT_TRUE(v.all_finite());
}

TEST(RunGmpnet, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(13);
  const Coords c = random_coords(6, rng);
  const GridGraph g = build_knn_graph(c, 2);
  GmpParams p = GmpParams::init(3, 3, rng);
  for (Tensor* t : {&p.gru.bz, &p.gru.br, &p.gru.bh, &p.message.bias, &p.output.bias})
    for (double& v : t->mutable_values()) v = std::uniform_real_distribution<double>(-.5, .5)(rng);
  Tensor h0 = testing::random_param({6, 3}, rng);
  const Tensor mix = Tensor::uniform({6, 3}, rng, -1, 1);
  ParameterMap params;
  p.collect(params, "gmp");
  std::vector<Tensor> inputs{h0};
  for (auto& [_, t] : params) inputs.push_back(t);
  const auto report = testing::gradcheck(
      [&](const std::vector<Tensor>& in) { return sum(run_gmpnet(in[0], g, p, 2) * mix); }, inputs);
  EXPECT_TRUE(report.ok) << report.detail;
}

TEST(ScatterToBev, SingleGridAndConservation) {
  std::mt19937_64 rng(14);
  GridSpec s;
  s.x_min = s.y_min = -2;
  s.x_max = s.y_max = 2;
  s.dx = s.dy = 1;
  GridSet one;
  one.cells = {{0, 0}};
  const Tensor v({1, 3}, {1, 2, 3});
  const Tensor map = scatter_to_bev(v, one, s);
  EXPECT_EQ(map.shape(), (Shape{3, 4, 4}));
  int nonzero = 0;
  for (Index y = 0; y < 4; ++y)
    for (Index x = 0; x < 4; ++x) {
      bool any = false;
      for (Index l = 0; l < 3; ++l) any = any || map.at({l, y, x}) != 0.0;
      nonzero += any;
    }
  EXPECT_EQ(nonzero, 1);

  GridSet many;
  many.cells = {{0, 1}, {3, 3}, {2, 0}};
  const Tensor w = Tensor::uniform({3, 3}, rng, -1, 1);
  const Tensor m2 = scatter_to_bev(w, many, s);
  EXPECT_NEAR(sum(m2).item(), sum(w).item(), 1e-12);
  const Tensor back = gather_cells(m2, many.cells);
  for (Index i = 0; i < w.numel(); ++i) EXPECT_EQ(back.values()[i], w.values()[i]);
  many.cells.push_back({0, 1});
  EXPECT_THROW(scatter_to_bev(Tensor::zeros({4, 3}), many, s), ContractError);
}

}  // namespace
}  // namespace pcvd
