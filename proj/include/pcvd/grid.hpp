#pragma once

// Pillar quantization of a merged frame and the per-grid PointNet encoder.

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <vector>

#include "pcvd/nn.hpp"
#include "pcvd/scene.hpp"
#include "pcvd/tensor.hpp"

namespace pcvd {

inline constexpr Index kPointDims = 5;  // x y z r dt

struct GridSpec {
  double x_min = -12.0, x_max = 12.0;
  double y_min = -12.0, y_max = 12.0;
  double dx = 0.5, dy = 0.5;
  int max_points = 60;     // N
  int max_grids = 12000;

  /// Throws ConfigError unless ranges divide evenly by the cell size and N >= 1.
  void validate() const;
  Index width() const;   // cells along x
  Index height() const;  // cells along y
  Eigen::Vector2d cell_center(const Cell& c) const;
};

/// Non-empty pillars, sorted by (gy, gx). Buffers are [n*N x D], zero-padded;
/// `points` is left default-constructed when no pillar is occupied.
struct GridSet {
  std::vector<Cell> cells;
  Tensor points;
  std::vector<int> counts;
  Eigen::Matrix<double, Eigen::Dynamic, 2> centers;  // cell centres, metres
  int capacity = 0;                                  // N
  Tensor h;                                          // [n x L] once encoded

  Index size() const { return static_cast<Index>(cells.size()); }
};

GridSet voxelize(const PointCloud5& points, const GridSpec& spec, std::uint64_t seed);
inline GridSet voxelize(const MergedFrame& frame, const GridSpec& spec, std::uint64_t seed) {
  return voxelize(frame.points, spec, seed);
}

/// Subset of grids, in the order given.
GridSet select_grids(const GridSet& grids, std::span<const Index> keep);

struct PointNetParams {
  Linear f;  // D -> L

  static PointNetParams init(Index channels, std::mt19937_64& rng);
  void collect(ParameterMap& out, const std::string& prefix) const;
};

/// h0_i = max over the valid rows of f(V_i); sets and returns grids.h.
Tensor pointnet_init(GridSet& grids, const PointNetParams& params);

/// Farthest point sampling over cell centres; returns ascending indices.
std::vector<Index> farthest_point_sample(const GridSet& grids, Index n, std::uint64_t seed);
/// FPS over arbitrary points with a fixed first pick; indices in pick order.
std::vector<Index> farthest_point_order(const Eigen::Matrix<double, Eigen::Dynamic, 2>& pts, Index n, Index first);

}  // namespace pcvd
