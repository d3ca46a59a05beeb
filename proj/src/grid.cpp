#include "pcvd/grid.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "pcvd/errors.hpp"
#include "pcvd/rng.hpp"

namespace pcvd {

namespace {

Index cells_along(double lo, double hi, double step, const char* axis) {
  const double n = (hi - lo) / step;
  const double r = std::round(n);
  if (!(hi > lo) || !(step > 0) || std::abs(n - r) > 1e-9 * std::max(1.0, r))
    throw ConfigError(std::string("grid range along ") + axis + " does not divide evenly by the cell size");
  return static_cast<Index>(r);
}

}  // namespace

void GridSpec::validate() const {
  cells_along(x_min, x_max, dx, "x");
  cells_along(y_min, y_max, dy, "y");
  if (max_points < 1) throw ConfigError("max points per grid must be >= 1");
  if (max_grids < 1) throw ConfigError("max grids must be >= 1");
}

Index GridSpec::width() const { return cells_along(x_min, x_max, dx, "x"); }
Index GridSpec::height() const { return cells_along(y_min, y_max, dy, "y"); }

Eigen::Vector2d GridSpec::cell_center(const Cell& c) const {
  return {x_min + (static_cast<double>(c.x) + 0.5) * dx, y_min + (static_cast<double>(c.y) + 0.5) * dy};
}

GridSet voxelize(const PointCloud5& points, const GridSpec& spec, std::uint64_t seed) {
  spec.validate();
  const Index w = spec.width(), h = spec.height();
  std::vector<Index> order(static_cast<std::size_t>(points.rows()));
  std::iota(order.begin(), order.end(), Index{0});
  std::mt19937_64 rng(mix_seed(seed, 0x60dULL));
  std::shuffle(order.begin(), order.end(), rng);

  struct Bin {
    std::vector<Index> rows;
    Index total = 0;
  };
  std::map<std::pair<Index, Index>, Bin> bins;  // (gy, gx)
  for (Index i : order) {
    const double x = points(i, 0), y = points(i, 1);
    if (!(x >= spec.x_min && x < spec.x_max && y >= spec.y_min && y < spec.y_max)) continue;
    const Index gx = std::min(w - 1, static_cast<Index>(std::floor((x - spec.x_min) / spec.dx)));
    const Index gy = std::min(h - 1, static_cast<Index>(std::floor((y - spec.y_min) / spec.dy)));
    Bin& b = bins[{gy, gx}];
    ++b.total;
    if (static_cast<int>(b.rows.size()) < spec.max_points) b.rows.push_back(i);
  }

  std::vector<std::pair<std::pair<Index, Index>, const Bin*>> kept;
  kept.reserve(bins.size());
  for (const auto& [k, b] : bins) kept.emplace_back(k, &b);
  if (static_cast<Index>(kept.size()) > spec.max_grids) {
    std::stable_sort(kept.begin(), kept.end(),
                     [](const auto& a, const auto& b) { return a.second->total > b.second->total; });
    kept.resize(static_cast<std::size_t>(spec.max_grids));
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  }

  GridSet g;
  g.capacity = spec.max_points;
  const Index n = static_cast<Index>(kept.size());
  const Index cap = spec.max_points;
  std::vector<double> buf(static_cast<std::size_t>(n * cap * kPointDims), 0.0);
  g.centers.resize(n, 2);
  for (Index i = 0; i < n; ++i) {
    const auto& [key, bin] = kept[static_cast<std::size_t>(i)];
    g.cells.push_back({key.first, key.second});
    g.counts.push_back(static_cast<int>(bin->rows.size()));
    g.centers.row(i) = spec.cell_center(g.cells.back()).transpose();
    for (std::size_t r = 0; r < bin->rows.size(); ++r)
      for (Index d = 0; d < kPointDims; ++d)
        buf[static_cast<std::size_t>(((i * cap) + static_cast<Index>(r)) * kPointDims + d)] = points(bin->rows[r], d);
  }
  if (n > 0) g.points = Tensor({n * cap, kPointDims}, std::move(buf));
  return g;
}

GridSet select_grids(const GridSet& grids, std::span<const Index> keep) {
  GridSet out;
  out.capacity = grids.capacity;
  const Index cap = grids.capacity;
  const Index n = static_cast<Index>(keep.size());
  std::vector<Index> rows;
  rows.reserve(static_cast<std::size_t>(n * cap));
  out.centers.resize(n, 2);
  for (Index i = 0; i < n; ++i) {
    const Index k = keep[static_cast<std::size_t>(i)];
    if (k < 0 || k >= grids.size()) throw ContractError("select_grids: index out of range");
    out.cells.push_back(grids.cells[static_cast<std::size_t>(k)]);
    out.counts.push_back(grids.counts[static_cast<std::size_t>(k)]);
    out.centers.row(i) = grids.centers.row(k);
    for (Index r = 0; r < cap; ++r) rows.push_back(k * cap + r);
  }
  if (n > 0) out.points = gather_rows(grids.points, rows);
  if (grids.h.rank() == 2 && n > 0) out.h = gather_rows(grids.h, keep);
  return out;
}

PointNetParams PointNetParams::init(Index channels, std::mt19937_64& rng) {
  return {Linear::init(kPointDims, channels, rng)};
}

void PointNetParams::collect(ParameterMap& out, const std::string& prefix) const { f.collect(out, prefix + ".f"); }

Tensor pointnet_init(GridSet& grids, const PointNetParams& params) {
  if (grids.size() == 0) throw ContractError("pointnet_init: no grids");
  grids.h = masked_group_max(params.f(grids.points), grids.capacity, grids.counts);
  return grids.h;
}

std::vector<Index> farthest_point_order(const Eigen::Matrix<double, Eigen::Dynamic, 2>& pts, Index n, Index first) {
  const Index total = pts.rows();
  if (n < 1) throw ContractError("farthest point sampling needs n >= 1");
  if (first < 0 || first >= total) throw ContractError("farthest point sampling: first pick out of range");
  n = std::min(n, total);
  std::vector<Index> picks{first};
  Eigen::VectorXd dist = (pts.rowwise() - pts.row(first)).rowwise().squaredNorm();
  while (static_cast<Index>(picks.size()) < n) {
    Index best = 0;
    dist.maxCoeff(&best);  // first maximal index
    picks.push_back(best);
    dist = dist.cwiseMin((pts.rowwise() - pts.row(best)).rowwise().squaredNorm());
  }
  return picks;
}

std::vector<Index> farthest_point_sample(const GridSet& grids, Index n, std::uint64_t seed) {
  if (n < 1) throw ContractError("farthest point sampling needs n >= 1");
  const Index total = grids.size();
  std::vector<Index> out;
  if (n >= total) {
    out.resize(static_cast<std::size_t>(total));
    std::iota(out.begin(), out.end(), Index{0});
    return out;
  }
  std::mt19937_64 rng(mix_seed(seed, 0xf95ULL));
  const Index first = static_cast<Index>(rng() % static_cast<std::uint64_t>(total));
  out = farthest_point_order(grids.centers, n, first);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace pcvd
