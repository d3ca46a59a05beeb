#pragma once

// Dense row-major tensors of doubles with tape-based reverse-mode
// differentiation. Every learnable module of the detector is built from the
// free functions declared here.

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pcvd/errors.hpp"

namespace pcvd {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

std::string shape_string(const Shape& s);
Index shape_numel(const Shape& s);

namespace detail {
struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;

  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};
}  // namespace detail

class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi);

  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index dim(Index axis) const;
  Index numel() const { return static_cast<Index>(node_->value.size()); }

  std::span<const double> values() const { return node_->value; }
  /// Direct write access; reserved for parameter updates and leaf construction.
  std::span<double> mutable_values() { return node_->value; }
  double item() const;
  double at(std::initializer_list<Index> idx) const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    node_->requires_grad = on;
    return *this;
  }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->value.empty(); }
  std::span<const double> grad() const;
  void zero_grad();

  /// Detached copy: same values, no tape history, no grad.
  Tensor detach() const;
  bool all_finite() const;

  const std::shared_ptr<detail::TensorNode>& node() const { return node_; }

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

/// Ordered record of differentiable operations. Constructing a Tape makes it
/// the active recorder on the current thread until it is destroyed.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(const Tensor& output, BackwardFn fn);
  /// Zeroes intermediate gradients, seeds d(loss)=1 and runs every recorded
  /// rule in reverse order. Leaf gradients accumulate across calls.
  void backward(const Tensor& loss);
  std::size_t size() const { return entries_.size(); }

 private:
  struct Entry {
    std::shared_ptr<detail::TensorNode> output;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  Tape* previous_;
};

/// Suspends recording on the current thread (inference, oracles).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* saved_;
};

void backward(const Tensor& loss);

namespace autograd {
/// True when an op on these inputs must be recorded.
bool should_record(std::initializer_list<const Tensor*> inputs);
/// Marks `out` as differentiable and records `fn` on the active tape.
void record(Tensor& out, Tape::BackwardFn fn);
/// Gradient buffer of `t` or nullptr if `t` does not take gradients.
double* grad_ptr(const Tensor& t);
}  // namespace autograd

// elementwise (numpy-style broadcasting)
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor broadcast_to(const Tensor& a, const Shape& shape);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// reductions
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Max along `axis` (axis removed). Gradient flows to the first maximal index.
Tensor max_reduce(const Tensor& a, Index axis);
/// Rows [g*group, g*group + counts[g]) of a [G*group x L] matrix reduced by max.
Tensor masked_group_max(const Tensor& rows, Index group, std::span<const int> counts);

// shape manipulation
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts, Index axis);
Tensor slice(const Tensor& a, Index axis, Index begin, Index end);
Tensor gather_rows(const Tensor& a, std::span<const Index> rows);

// linear algebra / spatial
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax_rows(const Tensor& a);
Tensor conv2d(const Tensor& x, const Tensor& kernel, Index stride, Index pad);
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, Index stride, Index pad);
Tensor upsample_nearest(const Tensor& x, Index factor);
inline Tensor upsample_nearest2x(const Tensor& x) { return upsample_nearest(x, 2); }

/// Bilinear tap weight max(0, 1 - |a - b|).
inline double bilinear_kernel(double a, double b) {
  const double d = a - b < 0 ? b - a : a - b;
  return d < 1.0 ? 1.0 - d : 0.0;
}
/// map[c x h x w] sampled at fractional (y, x); out-of-bounds taps contribute zero.
Tensor bilinear_sample(const Tensor& map, double y, double x);
/// Same, differentiable w.r.t. the position tensor pos = [y, x].
Tensor bilinear_sample(const Tensor& map, const Tensor& pos);

/// Deformable 3x3-style convolution with stride 1 and "same" padding.
/// offsets: [2*k*k x h x w], channel 2m = dy, 2m+1 = dx of tap m (row-major taps).
Tensor deform_conv2d(const Tensor& x, const Tensor& offsets, const Tensor& kernel);

/// Writes row i of v [n x L] at (cells[i].y, cells[i].x) of an [L x h x w] map.
struct Cell {
  Index y;
  Index x;
  bool operator==(const Cell&) const = default;
};
Tensor scatter_cells(const Tensor& v, std::span<const Cell> cells, Index height, Index width);
Tensor gather_cells(const Tensor& map, std::span<const Cell> cells);

/// Throws ContractError if any value is NaN or infinite.
void check_finite(const Tensor& t, const std::string& context);

}  // namespace pcvd
