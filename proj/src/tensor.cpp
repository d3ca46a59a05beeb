#include "pcvd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace pcvd {

namespace {

thread_local Tape* g_active_tape = nullptr;

Index checked_numel(const Shape& s) {
  Index n = 1;
  for (Index e : s) {
    if (e < 1) throw DimensionError("tensor extents must be positive, got " + shape_string(s));
    n *= e;
  }
  return n;
}

// Row-major strides of `s`.
std::vector<Index> strides_of(const Shape& s) {
  std::vector<Index> st(s.size(), 1);
  for (Index i = static_cast<Index>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const Index ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const Index eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1)
      throw DimensionError("cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Flat source index of each output element of `out` when reading from `src`.
std::vector<Index> broadcast_index(const Shape& src, const Shape& out) {
  const Index n = shape_numel(out);
  std::vector<Index> idx(static_cast<std::size_t>(n));
  const std::size_t r = out.size();
  const std::size_t lead = r - src.size();
  const auto src_st = strides_of(src);
  std::vector<Index> eff(r, 0);
  for (std::size_t i = lead; i < r; ++i) eff[i] = src[i - lead] == 1 ? 0 : src_st[i - lead];
  std::vector<Index> counter(r, 0);
  Index pos = 0;
  for (Index k = 0; k < n; ++k) {
    idx[static_cast<std::size_t>(k)] = pos;
    for (Index d = static_cast<Index>(r) - 1; d >= 0; --d) {
      if (++counter[d] < out[d]) {
        pos += eff[d];
        break;
      }
      pos -= eff[d] * (out[d] - 1);
      counter[d] = 0;
    }
  }
  return idx;
}

template <typename Fwd, typename Back>
Tensor binary_broadcast(const Tensor& a, const Tensor& b, Fwd fwd, Back back) {
  const Shape out_shape = a.shape() == b.shape() ? a.shape() : broadcast_shape(a.shape(), b.shape());
  const Index n = shape_numel(out_shape);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(static_cast<std::size_t>(n));
  std::shared_ptr<std::vector<Index>> ia, ib;
  if (a.shape() == out_shape && b.shape() == out_shape) {
    for (Index i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    ia = std::make_shared<std::vector<Index>>(broadcast_index(a.shape(), out_shape));
    ib = std::make_shared<std::vector<Index>>(broadcast_index(b.shape(), out_shape));
    for (Index i = 0; i < n; ++i) out[i] = fwd(av[(*ia)[i]], bv[(*ib)[i]]);
  }
  Tensor result(out_shape, std::move(out));
  if (autograd::should_record({&a, &b})) {
    autograd::record(result, [a, b, result, ia, ib, back, n] {
      const auto g = result.grad();
      double* ga = autograd::grad_ptr(a);
      double* gb = autograd::grad_ptr(b);
      const auto av = a.values();
      const auto bv = b.values();
      for (Index i = 0; i < n; ++i) {
        const Index x = ia ? (*ia)[i] : i;
        const Index y = ib ? (*ib)[i] : i;
        double da = 0, db = 0;
        back(av[x], bv[y], g[i], da, db);
        if (ga) ga[x] += da;
        if (gb) gb[y] += db;
      }
    });
  }
  return result;
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  Tensor result(a.shape(), std::move(out));
  if (autograd::should_record({&a})) {
    autograd::record(result, [a, result, deriv] {
      const auto g = result.grad();
      const auto av = a.values();
      const auto ov = result.values();
      double* ga = autograd::grad_ptr(a);
      for (std::size_t i = 0; i < av.size(); ++i) ga[i] += g[i] * deriv(av[i], ov[i]);
    });
  }
  return result;
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct BilinearTaps {
  Index y0, x0;
  double ly, lx;
};

BilinearTaps bilinear_taps(double y, double x) {
  const double fy = std::floor(y), fx = std::floor(x);
  return {static_cast<Index>(fy), static_cast<Index>(fx), y - fy, x - fx};
}

// Value of one channel plane at (y, x) with zero outside, plus its partials.
inline double bilinear_value(const double* plane, Index h, Index w, const BilinearTaps& t,
                             double* dy = nullptr, double* dx = nullptr) {
  auto px = [&](Index yy, Index xx) {
    return (yy >= 0 && yy < h && xx >= 0 && xx < w) ? plane[yy * w + xx] : 0.0;
  };
  const double v00 = px(t.y0, t.x0), v01 = px(t.y0, t.x0 + 1);
  const double v10 = px(t.y0 + 1, t.x0), v11 = px(t.y0 + 1, t.x0 + 1);
  if (dy) *dy = (1 - t.lx) * (v10 - v00) + t.lx * (v11 - v01);
  if (dx) *dx = (1 - t.ly) * (v01 - v00) + t.ly * (v11 - v10);
  return (1 - t.ly) * ((1 - t.lx) * v00 + t.lx * v01) + t.ly * ((1 - t.lx) * v10 + t.lx * v11);
}

inline void bilinear_scatter(double* plane, Index h, Index w, const BilinearTaps& t, double g) {
  auto put = [&](Index yy, Index xx, double wgt) {
    if (yy >= 0 && yy < h && xx >= 0 && xx < w) plane[yy * w + xx] += g * wgt;
  };
  put(t.y0, t.x0, (1 - t.ly) * (1 - t.lx));
  put(t.y0, t.x0 + 1, (1 - t.ly) * t.lx);
  put(t.y0 + 1, t.x0, t.ly * (1 - t.lx));
  put(t.y0 + 1, t.x0 + 1, t.ly * t.lx);
}

}  // namespace

std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

Index shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), Index{1}, std::multiplies<>());
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : Tensor(Shape{1}, {0.0}) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : node_(std::make_shared<detail::TensorNode>()) {
  const Index n = checked_numel(shape);
  if (n != static_cast<Index>(values.size()))
    throw DimensionError("shape " + shape_string(shape) + " holds " + std::to_string(n) +
                         " values, got " + std::to_string(values.size()));
  node_->shape = std::move(shape);
  node_->value = std::move(values);
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }
Tensor Tensor::full(Shape shape, double value) {
  const Index n = checked_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value));
}
Tensor Tensor::scalar(double value) { return Tensor(Shape{1}, {value}); }

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  const Index n = checked_numel(shape);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

Index Tensor::dim(Index axis) const {
  if (axis < 0 || axis >= rank())
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(shape()));
  return shape()[axis];
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_string(shape()));
  return node_->value[0];
}

double Tensor::at(std::initializer_list<Index> idx) const {
  if (static_cast<Index>(idx.size()) != rank()) throw DimensionError("index rank mismatch");
  Index flat = 0, d = 0;
  for (Index i : idx) {
    if (i < 0 || i >= shape()[d]) throw DimensionError("index out of range for " + shape_string(shape()));
    flat = flat * shape()[d++] + i;
  }
  return node_->value[flat];
}

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->value); }

bool Tensor::all_finite() const {
  return std::all_of(node_->value.begin(), node_->value.end(), [](double v) { return std::isfinite(v); });
}

void check_finite(const Tensor& t, const std::string& context) {
  if (!t.all_finite()) throw ContractError("non-finite value in " + context);
}

// ---------------------------------------------------------------------------
// Tape

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }
Tape::~Tape() { g_active_tape = previous_; }
Tape* Tape::active() { return g_active_tape; }

void Tape::record(const Tensor& output, BackwardFn fn) { entries_.push_back({output.node(), std::move(fn)}); }

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ContractError("backward() needs a scalar loss, got " + shape_string(loss.shape()));
  if (!loss.requires_grad()) throw ContractError("loss is not connected to any differentiable input");
  for (auto& e : entries_) {
    auto& g = e.output->ensure_grad();
    std::fill(g.begin(), g.end(), 0.0);
  }
  loss.node()->ensure_grad()[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->fn();
}

NoGradGuard::NoGradGuard() : saved_(g_active_tape) { g_active_tape = nullptr; }
NoGradGuard::~NoGradGuard() { g_active_tape = saved_; }

void backward(const Tensor& loss) {
  Tape* tape = Tape::active();
  if (!tape) throw ContractError("backward() without an active tape");
  tape->backward(loss);
}

namespace autograd {
bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (!g_active_tape) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}
void record(Tensor& out, Tape::BackwardFn fn) {
  out.set_requires_grad(true);
  g_active_tape->record(out, std::move(fn));
}
double* grad_ptr(const Tensor& t) {
  if (!t.requires_grad()) return nullptr;
  return t.node()->ensure_grad().data();
}
}  // namespace autograd

// ---------------------------------------------------------------------------
// elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_broadcast(a, b, [](double x, double y) { return x + y; },
                          [](double, double, double g, double& da, double& db) { da = g; db = g; });
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_broadcast(a, b, [](double x, double y) { return x - y; },
                          [](double, double, double g, double& da, double& db) { da = g; db = -g; });
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_broadcast(a, b, [](double x, double y) { return x * y; },
                          [](double x, double y, double g, double& da, double& db) { da = g * y; db = g * x; });
}
Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}
Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}
Tensor neg(const Tensor& a) { return scale(a, -1.0); }
Tensor sigmoid(const Tensor& a) {
  return unary(a, stable_sigmoid, [](double, double y) { return y * (1 - y); });
}
Tensor tanh(const Tensor& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1 - y * y; });
}
Tensor relu(const Tensor& a) {
  return unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  if (broadcast_shape(a.shape(), shape) != shape)
    throw DimensionError("cannot broadcast " + shape_string(a.shape()) + " to " + shape_string(shape));
  return add(a, Tensor::zeros(shape));
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum(const Tensor& a) {
  const auto av = a.values();
  Tensor result = Tensor::scalar(std::accumulate(av.begin(), av.end(), 0.0));
  if (autograd::should_record({&a})) {
    autograd::record(result, [a, result] {
      const double g = result.grad()[0];
      double* ga = autograd::grad_ptr(a);
      for (Index i = 0; i < a.numel(); ++i) ga[i] += g;
    });
  }
  return result;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor max_reduce(const Tensor& a, Index axis) {
  const Index r = a.rank();
  if (axis < 0 || axis >= r) throw DimensionError("max_reduce axis out of range for " + shape_string(a.shape()));
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= a.shape()[i];
  for (Index i = axis + 1; i < r; ++i) inner *= a.shape()[i];
  const Index n = a.shape()[axis];
  Shape out_shape;
  for (Index i = 0; i < r; ++i)
    if (i != axis) out_shape.push_back(a.shape()[i]);
  if (out_shape.empty()) out_shape.push_back(1);

  const auto av = a.values();
  std::vector<double> out(static_cast<std::size_t>(outer * inner));
  auto arg = std::make_shared<std::vector<Index>>(out.size());
  for (Index o = 0; o < outer; ++o)
    for (Index i = 0; i < inner; ++i) {
      Index best = 0;
      double bv = av[o * n * inner + i];
      for (Index k = 1; k < n; ++k) {
        const double v = av[(o * n + k) * inner + i];
        if (v > bv) {
          bv = v;
          best = k;
        }
      }
      out[o * inner + i] = bv;
      (*arg)[o * inner + i] = (o * n + best) * inner + i;
    }
  Tensor result(out_shape, std::move(out));
  if (autograd::should_record({&a})) {
    autograd::record(result, [a, result, arg] {
      const auto g = result.grad();
      double* ga = autograd::grad_ptr(a);
      for (std::size_t i = 0; i < arg->size(); ++i) ga[(*arg)[i]] += g[i];
    });
  }
  return result;
}

Tensor masked_group_max(const Tensor& rows, Index group, std::span<const int> counts) {
  if (rows.rank() != 2) throw DimensionError("masked_group_max expects a matrix, got " + shape_string(rows.shape()));
  const Index groups = static_cast<Index>(counts.size());
  const Index width = rows.dim(1);
  if (rows.dim(0) != groups * group)
    throw DimensionError("masked_group_max: " + shape_string(rows.shape()) + " is not " +
                         std::to_string(groups) + " groups of " + std::to_string(group));
  const auto rv = rows.values();
  std::vector<double> out(static_cast<std::size_t>(groups * width));
  auto arg = std::make_shared<std::vector<Index>>(out.size());
  for (Index g = 0; g < groups; ++g) {
    const int valid = counts[g];
    if (valid < 1 || valid > group) throw ContractError("masked_group_max: valid count out of range");
    for (Index l = 0; l < width; ++l) {
      Index best = g * group * width + l;
      for (Index k = 1; k < valid; ++k) {
        const Index idx = (g * group + k) * width + l;
        if (rv[idx] > rv[best]) best = idx;
      }
      out[g * width + l] = rv[best];
      (*arg)[g * width + l] = best;
    }
  }
  Tensor result(Shape{groups, width}, std::move(out));
  if (autograd::should_record({&rows})) {
    autograd::record(result, [rows, result, arg] {
      const auto g = result.grad();
      double* gr = autograd::grad_ptr(rows);
      for (std::size_t i = 0; i < arg->size(); ++i) gr[(*arg)[i]] += g[i];
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// shape manipulation

Tensor reshape(const Tensor& a, Shape shape) {
  if (checked_numel(shape) != a.numel())
    throw DimensionError("cannot reshape " + shape_string(a.shape()) + " to " + shape_string(shape));
  Tensor result(std::move(shape), std::vector<double>(a.values().begin(), a.values().end()));
  if (autograd::should_record({&a})) {
    autograd::record(result, [a, result] {
      const auto g = result.grad();
      double* ga = autograd::grad_ptr(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return result;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose expects a matrix, got " + shape_string(a.shape()));
  const Index n = a.dim(0), m = a.dim(1);
  std::vector<double> out(static_cast<std::size_t>(n * m));
  MatrixMap(out.data(), m, n) = ConstMatrixMap(a.values().data(), n, m).transpose();
  Tensor result(Shape{m, n}, std::move(out));
  if (autograd::should_record({&a})) {
    autograd::record(result, [a, result, n, m] {
      MatrixMap(autograd::grad_ptr(a), n, m) += ConstMatrixMap(result.grad().data(), m, n).transpose();
    });
  }
  return result;
}

Tensor concat(const std::vector<Tensor>& parts, Index axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  const Index r = static_cast<Index>(first.size());
  if (axis < 0 || axis >= r) throw DimensionError("concat axis out of range for " + shape_string(first));
  Index outer = 1, inner = 1, total = 0;
  for (Index i = 0; i < axis; ++i) outer *= first[i];
  for (Index i = axis + 1; i < r; ++i) inner *= first[i];
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (static_cast<Index>(s.size()) != r) throw DimensionError("concat rank mismatch");
    s[axis] = first[axis];
    if (s != first)
      throw DimensionError("concat shape mismatch: " + shape_string(first) + " vs " + shape_string(p.shape()));
    total += p.shape()[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = total;
  std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)));
  Index offset = 0;
  for (const auto& p : parts) {
    const Index span = p.shape()[axis] * inner;
    const auto pv = p.values();
    for (Index o = 0; o < outer; ++o)
      std::copy_n(pv.begin() + o * span, span, out.begin() + o * total * inner + offset);
    offset += span;
  }
  Tensor result(out_shape, std::move(out));
  bool any = false;
  for (const auto& p : parts) any = any || autograd::should_record({&p});
  if (any) {
    autograd::record(result, [parts, result, outer, inner, total] {
      const auto g = result.grad();
      Index offset = 0;
      for (const auto& p : parts) {
        const Index span = p.numel() / outer;
        if (double* gp = autograd::grad_ptr(p))
          for (Index o = 0; o < outer; ++o)
            for (Index k = 0; k < span; ++k) gp[o * span + k] += g[o * total * inner + offset + k];
        offset += span;
      }
    });
  }
  return result;
}

Tensor slice(const Tensor& a, Index axis, Index begin, Index end) {
  const Index r = a.rank();
  if (axis < 0 || axis >= r || begin < 0 || end > a.shape()[axis] || begin >= end)
    throw DimensionError("invalid slice [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                         std::to_string(axis) + " of " + shape_string(a.shape()));
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= a.shape()[i];
  for (Index i = axis + 1; i < r; ++i) inner *= a.shape()[i];
  const Index n = a.shape()[axis], len = end - begin;
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  std::vector<double> out(static_cast<std::size_t>(outer * len * inner));
  const auto av = a.values();
  for (Index o = 0; o < outer; ++o)
    std::copy_n(av.begin() + (o * n + begin) * inner, len * inner, out.begin() + o * len * inner);
  Tensor result(out_shape, std::move(out));
  if (autograd::should_record({&a})) {
    autograd::record(result, [a, result, outer, inner, n, len, begin] {
      const auto g = result.grad();
      double* ga = autograd::grad_ptr(a);
      for (Index o = 0; o < outer; ++o)
        for (Index k = 0; k < len * inner; ++k) ga[(o * n + begin) * inner + k] += g[o * len * inner + k];
    });
  }
  return result;
}

Tensor gather_rows(const Tensor& a, std::span<const Index> rows) {
  if (a.rank() != 2) throw DimensionError("gather_rows expects a matrix, got " + shape_string(a.shape()));
  const Index n = a.dim(0), w = a.dim(1);
  auto idx = std::make_shared<std::vector<Index>>(rows.begin(), rows.end());
  if (idx->empty()) throw DimensionError("gather_rows with no rows");
  std::vector<double> out(idx->size() * static_cast<std::size_t>(w));
  const auto av = a.values();
  for (std::size_t i = 0; i < idx->size(); ++i) {
    const Index r = (*idx)[i];
    if (r < 0 || r >= n) throw DimensionError("gather_rows index " + std::to_string(r) + " out of range");
    std::copy_n(av.begin() + r * w, w, out.begin() + static_cast<Index>(i) * w);
  }
  Tensor result(Shape{static_cast<Index>(idx->size()), w}, std::move(out));
  if (autograd::should_record({&a})) {
    autograd::record(result, [a, result, idx, w] {
      const auto g = result.grad();
      double* ga = autograd::grad_ptr(a);
      for (std::size_t i = 0; i < idx->size(); ++i)
        for (Index k = 0; k < w; ++k) ga[(*idx)[i] * w + k] += g[static_cast<Index>(i) * w + k];
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// linear algebra / spatial

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul shape mismatch: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  const Index p = a.dim(0), q = a.dim(1), s = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(p * s));
  MatrixMap(out.data(), p, s).noalias() =
      ConstMatrixMap(a.values().data(), p, q) * ConstMatrixMap(b.values().data(), q, s);
  Tensor result(Shape{p, s}, std::move(out));
  if (autograd::should_record({&a, &b})) {
    autograd::record(result, [a, b, result, p, q, s] {
      ConstMatrixMap g(result.grad().data(), p, s);
      if (double* ga = autograd::grad_ptr(a))
        MatrixMap(ga, p, q).noalias() += g * ConstMatrixMap(b.values().data(), q, s).transpose();
      if (double* gb = autograd::grad_ptr(b))
        MatrixMap(gb, q, s).noalias() += ConstMatrixMap(a.values().data(), p, q).transpose() * g;
    });
  }
  return result;
}

Tensor softmax_rows(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("softmax_rows expects a matrix, got " + shape_string(a.shape()));
  const Index n = a.dim(0), m = a.dim(1);
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (Index i = 0; i < n; ++i) {
    const double* row = av.data() + i * m;
    const double mx = *std::max_element(row, row + m);
    double z = 0;
    for (Index j = 0; j < m; ++j) z += (out[i * m + j] = std::exp(row[j] - mx));
    for (Index j = 0; j < m; ++j) out[i * m + j] /= z;
  }
  Tensor result(a.shape(), std::move(out));
  if (autograd::should_record({&a})) {
    autograd::record(result, [a, result, n, m] {
      const auto g = result.grad();
      const auto y = result.values();
      double* ga = autograd::grad_ptr(a);
      for (Index i = 0; i < n; ++i) {
        double dot = 0;
        for (Index j = 0; j < m; ++j) dot += g[i * m + j] * y[i * m + j];
        for (Index j = 0; j < m; ++j) ga[i * m + j] += y[i * m + j] * (g[i * m + j] - dot);
      }
    });
  }
  return result;
}

namespace {

struct ConvGeometry {
  Index c, h, w, o, k, stride, pad, ho, wo;
};

ConvGeometry conv_geometry(const Tensor& x, const Tensor& kernel, Index stride, Index pad) {
  if (x.rank() != 3 || kernel.rank() != 4)
    throw DimensionError("conv2d expects x[c,h,w] and kernel[o,c,k,k], got " + shape_string(x.shape()) + " and " +
                         shape_string(kernel.shape()));
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), kernel.dim(0), kernel.dim(2), stride, pad, 0, 0};
  if (kernel.dim(1) != g.c || kernel.dim(3) != g.k)
    throw DimensionError("conv2d kernel " + shape_string(kernel.shape()) + " does not match input " +
                         shape_string(x.shape()));
  if (g.k % 2 == 0) throw ContractError("conv2d kernel size must be odd");
  if (stride < 1 || pad < 0) throw ContractError("conv2d needs stride >= 1 and pad >= 0");
  const Index hn = g.h + 2 * pad - g.k, wn = g.w + 2 * pad - g.k;
  if (hn < 0 || wn < 0) throw DimensionError("conv2d output extent < 1 for input " + shape_string(x.shape()));
  g.ho = hn / stride + 1;
  g.wo = wn / stride + 1;
  return g;
}

// cols[(c*k + ky)*k + kx, oy*wo + ox]
void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const Index hw = g.ho * g.wo;
  for (Index c = 0; c < g.c; ++c)
    for (Index ky = 0; ky < g.k; ++ky)
      for (Index kx = 0; kx < g.k; ++kx) {
        double* row = cols + ((c * g.k + ky) * g.k + kx) * hw;
        for (Index oy = 0; oy < g.ho; ++oy) {
          const Index iy = oy * g.stride - g.pad + ky;
          for (Index ox = 0; ox < g.wo; ++ox) {
            const Index ix = ox * g.stride - g.pad + kx;
            row[oy * g.wo + ox] = (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w) ? x[(c * g.h + iy) * g.w + ix] : 0.0;
          }
        }
      }
}

void col2im(const double* cols, const ConvGeometry& g, double* x) {
  const Index hw = g.ho * g.wo;
  for (Index c = 0; c < g.c; ++c)
    for (Index ky = 0; ky < g.k; ++ky)
      for (Index kx = 0; kx < g.k; ++kx) {
        const double* row = cols + ((c * g.k + ky) * g.k + kx) * hw;
        for (Index oy = 0; oy < g.ho; ++oy) {
          const Index iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (Index ox = 0; ox < g.wo; ++ox) {
            const Index ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) x[(c * g.h + iy) * g.w + ix] += row[oy * g.wo + ox];
          }
        }
      }
}

Tensor conv2d_impl(const Tensor& x, const Tensor& kernel, const Tensor* bias, Index stride, Index pad) {
  const ConvGeometry g = conv_geometry(x, kernel, stride, pad);
  if (bias && (bias->rank() != 1 || bias->dim(0) != g.o))
    throw DimensionError("conv2d bias " + shape_string(bias->shape()) + " does not match " + std::to_string(g.o) +
                         " output channels");
  const Index ckk = g.c * g.k * g.k, hw = g.ho * g.wo;
  auto cols = std::make_shared<std::vector<double>>(static_cast<std::size_t>(ckk * hw));
  im2col(x.values().data(), g, cols->data());
  std::vector<double> out(static_cast<std::size_t>(g.o * hw));
  MatrixMap om(out.data(), g.o, hw);
  om.noalias() = ConstMatrixMap(kernel.values().data(), g.o, ckk) * ConstMatrixMap(cols->data(), ckk, hw);
  if (bias)
    for (Index o = 0; o < g.o; ++o) om.row(o).array() += bias->values()[o];
  Tensor result(Shape{g.o, g.ho, g.wo}, std::move(out));
  const Tensor b = bias ? *bias : Tensor::scalar(0.0);
  const bool has_bias = bias != nullptr;
  if (autograd::should_record({&x, &kernel, &b})) {
    autograd::record(result, [x, kernel, b, has_bias, result, cols, g, ckk, hw] {
      ConstMatrixMap gout(result.grad().data(), g.o, hw);
      if (double* gk = autograd::grad_ptr(kernel))
        MatrixMap(gk, g.o, ckk).noalias() += gout * ConstMatrixMap(cols->data(), ckk, hw).transpose();
      if (has_bias)
        if (double* gb = autograd::grad_ptr(b))
          for (Index o = 0; o < g.o; ++o) {
            // Plain loop: a vectorized reduction would depend on the buffer's alignment.
            const double* row = result.grad().data() + o * hw;
            double acc = 0.0;
            for (Index q = 0; q < hw; ++q) acc += row[q];
            gb[o] += acc;
          }
      if (double* gx = autograd::grad_ptr(x)) {
        RowMatrix gcols = ConstMatrixMap(kernel.values().data(), g.o, ckk).transpose() * gout;
        col2im(gcols.data(), g, gx);
      }
    });
  }
  return result;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, Index stride, Index pad) {
  return conv2d_impl(x, kernel, nullptr, stride, pad);
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, Index stride, Index pad) {
  return conv2d_impl(x, kernel, &bias, stride, pad);
}

Tensor upsample_nearest(const Tensor& x, Index factor) {
  if (x.rank() != 3) throw DimensionError("upsample expects [c,h,w], got " + shape_string(x.shape()));
  if (factor < 1) throw ContractError("upsample factor must be >= 1");
  const Index c = x.dim(0), h = x.dim(1), w = x.dim(2), H = h * factor, W = w * factor;
  std::vector<double> out(static_cast<std::size_t>(c * H * W));
  const auto xv = x.values();
  for (Index ch = 0; ch < c; ++ch)
    for (Index y = 0; y < H; ++y)
      for (Index xx = 0; xx < W; ++xx) out[(ch * H + y) * W + xx] = xv[(ch * h + y / factor) * w + xx / factor];
  Tensor result(Shape{c, H, W}, std::move(out));
  if (autograd::should_record({&x})) {
    autograd::record(result, [x, result, c, h, w, H, W, factor] {
      const auto g = result.grad();
      double* gx = autograd::grad_ptr(x);
      for (Index ch = 0; ch < c; ++ch)
        for (Index y = 0; y < H; ++y)
          for (Index xx = 0; xx < W; ++xx) gx[(ch * h + y / factor) * w + xx / factor] += g[(ch * H + y) * W + xx];
    });
  }
  return result;
}

Tensor bilinear_sample(const Tensor& map, double y, double x) {
  return bilinear_sample(map, Tensor(Shape{2}, {y, x}));
}

Tensor bilinear_sample(const Tensor& map, const Tensor& pos) {
  if (map.rank() != 3) throw DimensionError("bilinear_sample expects [c,h,w], got " + shape_string(map.shape()));
  if (pos.numel() != 2) throw DimensionError("bilinear_sample position must hold (y, x)");
  const Index c = map.dim(0), h = map.dim(1), w = map.dim(2);
  const BilinearTaps t = bilinear_taps(pos.values()[0], pos.values()[1]);
  std::vector<double> out(static_cast<std::size_t>(c));
  for (Index ch = 0; ch < c; ++ch) out[ch] = bilinear_value(map.values().data() + ch * h * w, h, w, t);
  Tensor result(Shape{c}, std::move(out));
  if (autograd::should_record({&map, &pos})) {
    autograd::record(result, [map, pos, result, t, c, h, w] {
      const auto g = result.grad();
      double* gm = autograd::grad_ptr(map);
      double* gp = autograd::grad_ptr(pos);
      for (Index ch = 0; ch < c; ++ch) {
        const double* plane = map.values().data() + ch * h * w;
        if (gm) bilinear_scatter(gm + ch * h * w, h, w, t, g[ch]);
        if (gp) {
          double dy = 0, dx = 0;
          bilinear_value(plane, h, w, t, &dy, &dx);
          gp[0] += g[ch] * dy;
          gp[1] += g[ch] * dx;
        }
      }
    });
  }
  return result;
}

Tensor deform_conv2d(const Tensor& x, const Tensor& offsets, const Tensor& kernel) {
  if (x.rank() != 3 || kernel.rank() != 4 || offsets.rank() != 3)
    throw DimensionError("deform_conv2d expects x[c,h,w], offsets[2kk,h,w], kernel[o,c,k,k]");
  const Index c = x.dim(0), h = x.dim(1), w = x.dim(2), o = kernel.dim(0), k = kernel.dim(2);
  if (kernel.dim(1) != c || kernel.dim(3) != k || k % 2 == 0)
    throw DimensionError("deform_conv2d kernel " + shape_string(kernel.shape()) + " incompatible with " +
                         shape_string(x.shape()));
  const Index taps = k * k, hw = h * w, pad = k / 2;
  if (offsets.dim(0) != 2 * taps || offsets.dim(1) != h || offsets.dim(2) != w)
    throw DimensionError("deform_conv2d offsets " + shape_string(offsets.shape()) + " must be [" +
                         std::to_string(2 * taps) + "," + std::to_string(h) + "," + std::to_string(w) + "]");
  const auto ov = offsets.values();
  const auto xv = x.values();
  // Sampling positions are shared by all channels.
  auto where = std::make_shared<std::vector<BilinearTaps>>(static_cast<std::size_t>(taps * hw));
  for (Index m = 0; m < taps; ++m) {
    const Index ky = m / k, kx = m % k;
    for (Index qy = 0; qy < h; ++qy)
      for (Index qx = 0; qx < w; ++qx) {
        const Index q = qy * w + qx;
        const double py = static_cast<double>(qy - pad + ky) + ov[(2 * m) * hw + q];
        const double px = static_cast<double>(qx - pad + kx) + ov[(2 * m + 1) * hw + q];
        (*where)[m * hw + q] = bilinear_taps(py, px);
      }
  }
  const Index ckk = c * taps;
  auto cols = std::make_shared<std::vector<double>>(static_cast<std::size_t>(ckk * hw));
  for (Index ch = 0; ch < c; ++ch)
    for (Index m = 0; m < taps; ++m)
      for (Index q = 0; q < hw; ++q)
        (*cols)[(ch * taps + m) * hw + q] = bilinear_value(xv.data() + ch * hw, h, w, (*where)[m * hw + q]);
  std::vector<double> out(static_cast<std::size_t>(o * hw));
  MatrixMap(out.data(), o, hw).noalias() =
      ConstMatrixMap(kernel.values().data(), o, ckk) * ConstMatrixMap(cols->data(), ckk, hw);
  Tensor result(Shape{o, h, w}, std::move(out));
  if (autograd::should_record({&x, &offsets, &kernel})) {
    autograd::record(result, [x, offsets, kernel, result, where, cols, c, h, w, o, taps, hw, ckk] {
      ConstMatrixMap gout(result.grad().data(), o, hw);
      if (double* gk = autograd::grad_ptr(kernel))
        MatrixMap(gk, o, ckk).noalias() += gout * ConstMatrixMap(cols->data(), ckk, hw).transpose();
      double* gx = autograd::grad_ptr(x);
      double* go = autograd::grad_ptr(offsets);
      if (!gx && !go) return;
      const RowMatrix gcols = ConstMatrixMap(kernel.values().data(), o, ckk).transpose() * gout;
      const auto xv = x.values();
      for (Index ch = 0; ch < c; ++ch)
        for (Index m = 0; m < taps; ++m)
          for (Index q = 0; q < hw; ++q) {
            const double g = gcols(ch * taps + m, q);
            if (g == 0.0) continue;
            const BilinearTaps& t = (*where)[m * hw + q];
            if (gx) bilinear_scatter(gx + ch * hw, h, w, t, g);
            if (go) {
              double dy = 0, dx = 0;
              bilinear_value(xv.data() + ch * hw, h, w, t, &dy, &dx);
              go[(2 * m) * hw + q] += g * dy;
              go[(2 * m + 1) * hw + q] += g * dx;
            }
          }
    });
  }
  return result;
}

Tensor scatter_cells(const Tensor& v, std::span<const Cell> cells, Index height, Index width) {
  if (v.rank() != 2 || v.dim(0) != static_cast<Index>(cells.size()))
    throw DimensionError("scatter_cells: features " + shape_string(v.shape()) + " vs " +
                         std::to_string(cells.size()) + " cells");
  const Index n = v.dim(0), l = v.dim(1), hw = height * width;
  auto flat = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(n));
  std::vector<char> seen(static_cast<std::size_t>(hw), 0);
  for (Index i = 0; i < n; ++i) {
    const Cell& cl = cells[i];
    if (cl.y < 0 || cl.y >= height || cl.x < 0 || cl.x >= width)
      throw ContractError("scatter_cells: cell outside the map");
    const Index f = cl.y * width + cl.x;
    if (seen[f]) throw ContractError("scatter_cells: duplicate cell (" + std::to_string(cl.y) + "," +
                                     std::to_string(cl.x) + ")");
    seen[f] = 1;
    (*flat)[i] = f;
  }
  std::vector<double> out(static_cast<std::size_t>(l * hw), 0.0);
  const auto vv = v.values();
  for (Index i = 0; i < n; ++i)
    for (Index ch = 0; ch < l; ++ch) out[ch * hw + (*flat)[i]] = vv[i * l + ch];
  Tensor result(Shape{l, height, width}, std::move(out));
  if (autograd::should_record({&v})) {
    autograd::record(result, [v, result, flat, n, l, hw] {
      const auto g = result.grad();
      double* gv = autograd::grad_ptr(v);
      for (Index i = 0; i < n; ++i)
        for (Index ch = 0; ch < l; ++ch) gv[i * l + ch] += g[ch * hw + (*flat)[i]];
    });
  }
  return result;
}

Tensor gather_cells(const Tensor& map, std::span<const Cell> cells) {
  if (map.rank() != 3) throw DimensionError("gather_cells expects [l,h,w], got " + shape_string(map.shape()));
  const Index l = map.dim(0), h = map.dim(1), w = map.dim(2), n = static_cast<Index>(cells.size());
  if (n == 0) throw DimensionError("gather_cells with no cells");
  std::vector<double> out(static_cast<std::size_t>(n * l));
  for (Index i = 0; i < n; ++i) {
    if (cells[i].y < 0 || cells[i].y >= h || cells[i].x < 0 || cells[i].x >= w)
      throw ContractError("gather_cells: cell outside the map");
    for (Index ch = 0; ch < l; ++ch) out[i * l + ch] = map.values()[(ch * h + cells[i].y) * w + cells[i].x];
  }
  auto kept = std::make_shared<std::vector<Cell>>(cells.begin(), cells.end());
  Tensor result(Shape{n, l}, std::move(out));
  if (autograd::should_record({&map})) {
    autograd::record(result, [map, result, kept, l, h, w, n] {
      const auto g = result.grad();
      double* gm = autograd::grad_ptr(map);
      for (Index i = 0; i < n; ++i)
        for (Index ch = 0; ch < l; ++ch) gm[(ch * h + (*kept)[i].y) * w + (*kept)[i].x] += g[i * l + ch];
    });
  }
  return result;
}

}  // namespace pcvd
