#include "seqdens/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "seqdens/error.hpp"

namespace seqdens {

using detail::Node;

int64_t shape_size(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

namespace detail {

namespace {
thread_local bool g_grad_mode = true;
std::atomic<uint64_t> g_seq{1};
}  // namespace

bool grad_mode_enabled() { return g_grad_mode; }
void set_grad_mode(bool on) { g_grad_mode = on; }

void Node::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
}

}  // namespace detail

namespace {

std::shared_ptr<Node> alloc_node(Shape shape) {
  auto n = std::make_shared<Node>();
  n->value.assign(static_cast<size_t>(shape_size(shape)), 0.0);
  n->shape = std::move(shape);
  n->seq = detail::g_seq.fetch_add(1, std::memory_order_relaxed);
  return n;
}

// Wires the result node into the graph if recording is on and any parent
// requires grad; otherwise the result is a constant.
void attach(const std::shared_ptr<Node>& out,
            std::vector<std::shared_ptr<Node>> parents,
            std::function<void()> backward) {
  bool any = false;
  for (const auto& p : parents) any = any || (p && p->requires_grad);
  if (!detail::grad_mode_enabled() || !any) return;
  out->requires_grad = true;
  out->is_leaf = false;
  out->parents = std::move(parents);
  out->backward = std::move(backward);
}

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

// Resolves a possibly-negative axis and checks range.
int fix_axis(const Tensor& a, int axis) {
  int r = a.rank();
  int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r)
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_str(a.shape()));
  return ax;
}

void axis_extents(const Shape& s, int axis, int64_t* outer, int64_t* n,
                  int64_t* inner) {
  *outer = 1;
  *inner = 1;
  for (int i = 0; i < axis; ++i) *outer *= s[i];
  *n = s[axis];
  for (size_t i = axis + 1; i < s.size(); ++i) *inner *= s[i];
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor basics

Tensor Tensor::wrap(std::shared_ptr<Node> n) {
  Tensor t;
  t.node_ = std::move(n);
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = alloc_node(std::move(shape));
  n->requires_grad = requires_grad;
  return wrap(n);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  auto n = alloc_node(std::move(shape));
  std::fill(n->value.begin(), n->value.end(), v);
  n->requires_grad = requires_grad;
  return wrap(n);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  if (shape_size(shape) != static_cast<int64_t>(data.size()))
    throw ShapeError("from_data: " + shape_str(shape) + " wants " +
                     std::to_string(shape_size(shape)) + " values, got " +
                     std::to_string(data.size()));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  n->seq = detail::g_seq.fetch_add(1, std::memory_order_relaxed);
  return wrap(n);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from_data({}, {v}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  auto n = alloc_node(std::move(shape));
  for (auto& x : n->value) x = rng.normal() * stddev;
  n->requires_grad = requires_grad;
  return wrap(n);
}

const Shape& Tensor::shape() const {
  if (!node_) throw Error("use of undefined tensor");
  return node_->shape;
}

int64_t Tensor::dim(int axis) const {
  int ax = fix_axis(*this, axis);
  return shape()[ax];
}

int64_t Tensor::size() const { return static_cast<int64_t>(node_->value.size()); }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

std::span<const double> Tensor::data() const {
  return {node_->value.data(), node_->value.size()};
}

std::span<double> Tensor::raw() { return {node_->value.data(), node_->value.size()}; }

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of size " + std::to_string(size()));
  return node_->value[0];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
  const Shape& s = shape();
  if (idx.size() != s.size()) throw ShapeError("at(): rank mismatch");
  int64_t flat = 0;
  size_t k = 0;
  for (int64_t i : idx) {
    if (i < 0 || i >= s[k]) throw IndexError("at(): index out of range");
    flat = flat * s[k] + i;
    ++k;
  }
  return node_->value[static_cast<size_t>(flat)];
}

std::span<const double> Tensor::grad() const {
  if (!node_ || node_->grad.empty()) return {};
  return {node_->grad.data(), node_->grad.size()};
}

void Tensor::zero_grad() {
  if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  auto n = std::make_shared<Node>();
  n->shape = node_->shape;
  n->value = node_->value;
  n->seq = detail::g_seq.fetch_add(1, std::memory_order_relaxed);
  return wrap(n);
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

Tensor binary_op(const Tensor& a, const Tensor& b, const char* name,
                 const std::function<double(double, double)>& f,
                 // accumulate (g, av, bv) into (da, db); nb = b size
                 const std::function<void(const Node&, Node*, Node*, int64_t)>& bwd) {
  if (!is_suffix(b.shape(), a.shape()))
    throw ShapeError(std::string(name) + ": " + shape_str(b.shape()) +
                     " is not a suffix of " + shape_str(a.shape()));
  auto pa = a.node();
  auto pb = b.node();
  auto out = alloc_node(pa->shape);
  const int64_t na = a.size(), nb = b.size();
  for (int64_t i = 0; i < na; ++i)
    out->value[i] = f(pa->value[i], pb->value[i % nb]);
  Node* self = out.get();
  attach(out, {pa, pb},
         [self, pa, pb, nb, bwd]() { bwd(*self, pa.get(), pb.get(), nb); });
  return Tensor::wrap(out);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, "add", [](double x, double y) { return x + y; },
                   [](const Node& self, Node* pa, Node* pb, int64_t nb) {
                     const int64_t n = static_cast<int64_t>(self.value.size());
                     if (pa->requires_grad) {
                       pa->ensure_grad();
                       for (int64_t i = 0; i < n; ++i) pa->grad[i] += self.grad[i];
                     }
                     if (pb->requires_grad) {
                       pb->ensure_grad();
                       for (int64_t i = 0; i < n; ++i) pb->grad[i % nb] += self.grad[i];
                     }
                   });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, "sub", [](double x, double y) { return x - y; },
                   [](const Node& self, Node* pa, Node* pb, int64_t nb) {
                     const int64_t n = static_cast<int64_t>(self.value.size());
                     if (pa->requires_grad) {
                       pa->ensure_grad();
                       for (int64_t i = 0; i < n; ++i) pa->grad[i] += self.grad[i];
                     }
                     if (pb->requires_grad) {
                       pb->ensure_grad();
                       for (int64_t i = 0; i < n; ++i) pb->grad[i % nb] -= self.grad[i];
                     }
                   });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, "mul", [](double x, double y) { return x * y; },
                   [](const Node& self, Node* pa, Node* pb, int64_t nb) {
                     const int64_t n = static_cast<int64_t>(self.value.size());
                     if (pa->requires_grad) {
                       pa->ensure_grad();
                       for (int64_t i = 0; i < n; ++i)
                         pa->grad[i] += self.grad[i] * pb->value[i % nb];
                     }
                     if (pb->requires_grad) {
                       pb->ensure_grad();
                       for (int64_t i = 0; i < n; ++i)
                         pb->grad[i % nb] += self.grad[i] * pa->value[i];
                     }
                   });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, "div", [](double x, double y) { return x / y; },
                   [](const Node& self, Node* pa, Node* pb, int64_t nb) {
                     const int64_t n = static_cast<int64_t>(self.value.size());
                     if (pa->requires_grad) {
                       pa->ensure_grad();
                       for (int64_t i = 0; i < n; ++i)
                         pa->grad[i] += self.grad[i] / pb->value[i % nb];
                     }
                     if (pb->requires_grad) {
                       pb->ensure_grad();
                       for (int64_t i = 0; i < n; ++i) {
                         const double bv = pb->value[i % nb];
                         pb->grad[i % nb] -= self.grad[i] * pa->value[i] / (bv * bv);
                       }
                     }
                   });
}

namespace {

Tensor unary_op(const Tensor& a, const std::function<double(double)>& f,
                // df(x, y) = derivative given input x and output y
                const std::function<double(double, double)>& df) {
  auto pa = a.node();
  auto out = alloc_node(pa->shape);
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) out->value[i] = f(pa->value[i]);
  Node* self = out.get();
  attach(out, {pa}, [self, pa, df]() {
    pa->ensure_grad();
    const int64_t n = static_cast<int64_t>(self->value.size());
    for (int64_t i = 0; i < n; ++i)
      pa->grad[i] += self->grad[i] * df(pa->value[i], self->value[i]);
  });
  return Tensor::wrap(out);
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor add_scalar(const Tensor& a, double v) {
  return unary_op(a, [v](double x) { return x + v; },
                  [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double v) {
  return unary_op(a, [v](double x) { return x * v; },
                  [v](double, double) { return v; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor exp(const Tensor& a) {
  return unary_op(a, [](double x) { return std::exp(x); },
                  [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double x : a.data())
    if (!(x > 0.0)) throw NumericalError("log of non-positive value");
  return unary_op(a, [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; });
}

Tensor log_abs(const Tensor& a) {
  for (double x : a.data())
    if (x == 0.0 || !std::isfinite(x)) throw NumericalError("log_abs of zero");
  return unary_op(a, [](double x) { return std::log(std::fabs(x)); },
                  [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  for (double x : a.data())
    if (x < 0.0) throw NumericalError("sqrt of negative value");
  return unary_op(a, [](double x) { return std::sqrt(x); },
                  [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& a) {
  return unary_op(a, [](double x) { return x * x; },
                  [](double x, double) { return 2.0 * x; });
}

Tensor tanh(const Tensor& a) {
  return unary_op(a, [](double x) { return std::tanh(x); },
                  [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(a, stable_sigmoid,
                  [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
  return unary_op(a,
                  [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); },
                  [](double x, double) { return stable_sigmoid(x); });
}

Tensor relu(const Tensor& a) {
  return unary_op(a, [](double x) { return x > 0 ? x : 0.0; },
                  [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  return unary_op(a,
                  [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
                  [](double x, double) {
                    const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                    return cdf + x * pdf;
                  });
}

// ---------------------------------------------------------------------------
// Shape ops

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  auto pa = a.node();
  auto out = std::make_shared<Node>();
  out->shape = std::move(shape);
  out->value = pa->value;
  out->seq = detail::g_seq.fetch_add(1, std::memory_order_relaxed);
  Node* self = out.get();
  attach(out, {pa}, [self, pa]() {
    pa->ensure_grad();
    for (size_t i = 0; i < self->value.size(); ++i) pa->grad[i] += self->grad[i];
  });
  return Tensor::wrap(out);
}

namespace {

std::vector<int64_t> strides_of(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[i] = st[i + 1] * s[i + 1];
  return st;
}

// flat index mapping out -> in for a permutation
std::vector<int64_t> permute_map(const Shape& in_shape, const std::vector<int>& perm) {
  const int r = static_cast<int>(in_shape.size());
  Shape out_shape(r);
  for (int k = 0; k < r; ++k) out_shape[k] = in_shape[perm[k]];
  auto in_st = strides_of(in_shape);
  auto out_st = strides_of(out_shape);
  const int64_t n = shape_size(in_shape);
  std::vector<int64_t> map(n);
  for (int64_t oi = 0; oi < n; ++oi) {
    int64_t rem = oi, ii = 0;
    for (int k = 0; k < r; ++k) {
      const int64_t c = rem / out_st[k];
      rem -= c * out_st[k];
      ii += c * in_st[perm[k]];
    }
    map[oi] = ii;
  }
  return map;
}

}  // namespace

Tensor permute(const Tensor& a, const std::vector<int>& perm) {
  const int r = a.rank();
  if (static_cast<int>(perm.size()) != r) throw ShapeError("permute: rank mismatch");
  std::vector<bool> seen(r, false);
  for (int p : perm) {
    if (p < 0 || p >= r || seen[p]) throw ShapeError("permute: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(r);
  for (int k = 0; k < r; ++k) out_shape[k] = a.shape()[perm[k]];
  auto pa = a.node();
  auto out = alloc_node(out_shape);
  auto map = permute_map(pa->shape, perm);
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) out->value[i] = pa->value[map[i]];
  Node* self = out.get();
  attach(out, {pa}, [self, pa, map = std::move(map)]() {
    pa->ensure_grad();
    for (size_t i = 0; i < self->value.size(); ++i)
      pa->grad[map[i]] += self->grad[i];
  });
  return Tensor::wrap(out);
}

Tensor transpose_last2(const Tensor& a) {
  const int r = a.rank();
  if (r < 2) throw ShapeError("transpose_last2 needs rank >= 2");
  std::vector<int> perm(r);
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[r - 1], perm[r - 2]);
  return permute(a, perm);
}

Tensor take(const Tensor& a, int axis, const std::vector<int64_t>& indices) {
  const int ax = fix_axis(a, axis);
  int64_t outer, n, inner;
  axis_extents(a.shape(), ax, &outer, &n, &inner);
  for (int64_t id : indices)
    if (id < 0 || id >= n) throw IndexError("take: index out of range");
  Shape out_shape = a.shape();
  out_shape[ax] = static_cast<int64_t>(indices.size());
  auto pa = a.node();
  auto out = alloc_node(out_shape);
  const int64_t m = static_cast<int64_t>(indices.size());
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t k = 0; k < m; ++k)
      std::memcpy(&out->value[(o * m + k) * inner],
                  &pa->value[(o * n + indices[k]) * inner],
                  sizeof(double) * inner);
  Node* self = out.get();
  attach(out, {pa}, [self, pa, indices, outer, n, inner, m]() {
    pa->ensure_grad();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t k = 0; k < m; ++k) {
        const double* g = &self->grad[(o * m + k) * inner];
        double* dst = &pa->grad[(o * n + indices[k]) * inner];
        for (int64_t j = 0; j < inner; ++j) dst[j] += g[j];
      }
  });
  return Tensor::wrap(out);
}

Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len) {
  const int ax = fix_axis(a, axis);
  const int64_t n = a.shape()[ax];
  if (start < 0 || len < 0 || start + len > n)
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of " + std::to_string(n));
  std::vector<int64_t> idx(len);
  std::iota(idx.begin(), idx.end(), start);
  return take(a, ax, idx);
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat of empty list");
  const int ax = fix_axis(xs[0], axis);
  Shape out_shape = xs[0].shape();
  int64_t total = 0;
  for (const auto& x : xs) {
    if (x.rank() != xs[0].rank()) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < x.rank(); ++i)
      if (i != ax && x.shape()[i] != out_shape[i])
        throw ShapeError("concat: shape mismatch off-axis");
    total += x.shape()[ax];
  }
  out_shape[ax] = total;
  int64_t outer, n_out, inner;
  axis_extents(out_shape, ax, &outer, &n_out, &inner);
  auto out = alloc_node(out_shape);
  std::vector<std::shared_ptr<Node>> parents;
  std::vector<int64_t> offsets;
  int64_t off = 0;
  for (const auto& x : xs) {
    const int64_t nx = x.shape()[ax];
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(&out->value[(o * n_out + off) * inner],
                  &x.node()->value[o * nx * inner], sizeof(double) * nx * inner);
    parents.push_back(x.node());
    offsets.push_back(off);
    off += nx;
  }
  Node* self = out.get();
  attach(out, parents,
         [self, parents, offsets, outer, n_out, inner]() {
           for (size_t pi = 0; pi < parents.size(); ++pi) {
             Node* p = parents[pi].get();
             if (!p->requires_grad) continue;
             p->ensure_grad();
             const int64_t nx = static_cast<int64_t>(p->value.size()) / (outer * inner);
             for (int64_t o = 0; o < outer; ++o) {
               const double* g = &self->grad[(o * n_out + offsets[pi]) * inner];
               double* dst = &p->grad[o * nx * inner];
               for (int64_t j = 0; j < nx * inner; ++j) dst[j] += g[j];
             }
           }
         });
  return Tensor::wrap(out);
}

Tensor expand_scalar(const Tensor& s, int64_t n) {
  if (s.size() != 1) throw ShapeError("expand_scalar needs a scalar");
  auto ps = s.node();
  auto out = alloc_node({n});
  std::fill(out->value.begin(), out->value.end(), ps->value[0]);
  Node* self = out.get();
  attach(out, {ps}, [self, ps]() {
    ps->ensure_grad();
    double acc = 0;
    for (double g : self->grad) acc += g;
    ps->grad[0] += acc;
  });
  return Tensor::wrap(out);
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum_all(const Tensor& a) {
  auto pa = a.node();
  double acc = 0;
  for (double v : pa->value) acc += v;
  auto out = alloc_node({});
  out->value[0] = acc;
  Node* self = out.get();
  attach(out, {pa}, [self, pa]() {
    pa->ensure_grad();
    const double g = self->grad[0];
    for (auto& d : pa->grad) d += g;
  });
  return Tensor::wrap(out);
}

Tensor mean_all(const Tensor& a) {
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

Tensor sum_axis(const Tensor& a, int axis) {
  const int ax = fix_axis(a, axis);
  int64_t outer, n, inner;
  axis_extents(a.shape(), ax, &outer, &n, &inner);
  Shape out_shape;
  for (int i = 0; i < a.rank(); ++i)
    if (i != ax) out_shape.push_back(a.shape()[i]);
  auto pa = a.node();
  auto out = alloc_node(out_shape);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t k = 0; k < n; ++k) {
      const double* src = &pa->value[(o * n + k) * inner];
      double* dst = &out->value[o * inner];
      for (int64_t j = 0; j < inner; ++j) dst[j] += src[j];
    }
  Node* self = out.get();
  attach(out, {pa}, [self, pa, outer, n, inner]() {
    pa->ensure_grad();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t k = 0; k < n; ++k) {
        double* dst = &pa->grad[(o * n + k) * inner];
        const double* g = &self->grad[o * inner];
        for (int64_t j = 0; j < inner; ++j) dst[j] += g[j];
      }
  });
  return Tensor::wrap(out);
}

Tensor mean_axis(const Tensor& a, int axis) {
  const int ax = fix_axis(a, axis);
  return mul_scalar(sum_axis(a, ax), 1.0 / static_cast<double>(a.shape()[ax]));
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul needs rank >= 2");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const int64_t M = sa[sa.size() - 2], K = sa[sa.size() - 1];
  const int64_t Kb = sb[sb.size() - 2], N = sb[sb.size() - 1];
  if (K != Kb)
    throw ShapeError("matmul: inner extents disagree, " + shape_str(sa) + " x " +
                     shape_str(sb));
  const bool broadcast_b = (b.rank() == 2 && a.rank() >= 2);
  if (!broadcast_b) {
    if (a.rank() != b.rank() ||
        !std::equal(sa.begin(), sa.end() - 2, sb.begin()))
      throw ShapeError("matmul: leading dims disagree, " + shape_str(sa) + " x " +
                       shape_str(sb));
  }
  const int64_t batch = a.size() / (M * K);
  Shape out_shape(sa.begin(), sa.end() - 2);
  out_shape.push_back(M);
  out_shape.push_back(N);
  auto pa = a.node();
  auto pb = b.node();
  auto out = alloc_node(out_shape);
  for (int64_t i = 0; i < batch; ++i) {
    CMapMat A(&pa->value[i * M * K], M, K);
    CMapMat B(&pb->value[broadcast_b ? 0 : i * K * N], K, N);
    MapMat C(&out->value[i * M * N], M, N);
    C.noalias() = A * B;
  }
  Node* self = out.get();
  attach(out, {pa, pb}, [self, pa, pb, M, K, N, batch, broadcast_b]() {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (int64_t i = 0; i < batch; ++i) {
        CMapMat G(&self->grad[i * M * N], M, N);
        CMapMat B(&pb->value[broadcast_b ? 0 : i * K * N], K, N);
        MapMat dA(&pa->grad[i * M * K], M, K);
        dA.noalias() += G * B.transpose();
      }
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (int64_t i = 0; i < batch; ++i) {
        CMapMat G(&self->grad[i * M * N], M, N);
        CMapMat A(&pa->value[i * M * K], M, K);
        MapMat dB(&pb->grad[broadcast_b ? 0 : i * K * N], K, N);
        dB.noalias() += A.transpose() * G;
      }
    }
  });
  return Tensor::wrap(out);
}

Tensor logdet(const Tensor& a) {
  if (a.rank() != 2 || a.shape()[0] != a.shape()[1])
    throw ShapeError("logdet needs a square matrix, got " + shape_str(a.shape()));
  const int64_t n = a.shape()[0];
  auto pa = a.node();
  CMapMat A(pa->value.data(), n, n);
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(A);
  double log_abs_det = 0;
  for (int64_t i = 0; i < n; ++i) {
    const double d = lu.matrixLU()(i, i);
    if (d == 0.0 || !std::isfinite(d))
      throw NumericalError("logdet of singular matrix");
    log_abs_det += std::log(std::fabs(d));
  }
  auto out = alloc_node({});
  out->value[0] = log_abs_det;
  // Gradient of log|det A| is inv(A)^T; computed eagerly while LU is hot.
  Eigen::MatrixXd inv = lu.inverse();
  std::vector<double> inv_t(static_cast<size_t>(n * n));
  for (int64_t r = 0; r < n; ++r)
    for (int64_t c = 0; c < n; ++c) inv_t[r * n + c] = inv(c, r);
  Node* self = out.get();
  attach(out, {pa}, [self, pa, inv_t = std::move(inv_t)]() {
    pa->ensure_grad();
    const double g = self->grad[0];
    for (size_t i = 0; i < inv_t.size(); ++i) pa->grad[i] += g * inv_t[i];
  });
  return Tensor::wrap(out);
}

Tensor weight_norm(const Tensor& v, const Tensor& g) {
  if (v.rank() != 2 || g.rank() != 1 || g.shape()[0] != v.shape()[0])
    throw ShapeError("weight_norm: v must be (O,I), g must be (O)");
  const int64_t O = v.shape()[0], I = v.shape()[1];
  auto pv = v.node();
  auto pg = g.node();
  auto out = alloc_node(v.shape());
  std::vector<double> norms(O);
  for (int64_t o = 0; o < O; ++o) {
    double s = 0;
    for (int64_t i = 0; i < I; ++i) s += pv->value[o * I + i] * pv->value[o * I + i];
    norms[o] = std::sqrt(s);
    if (norms[o] < 1e-12) throw NumericalError("weight_norm: zero direction row");
    const double scale = pg->value[o] / norms[o];
    for (int64_t i = 0; i < I; ++i) out->value[o * I + i] = scale * pv->value[o * I + i];
  }
  Node* self = out.get();
  attach(out, {pv, pg}, [self, pv, pg, norms = std::move(norms), O, I]() {
    for (int64_t o = 0; o < O; ++o) {
      const double n = norms[o];
      double dot = 0;
      for (int64_t i = 0; i < I; ++i)
        dot += self->grad[o * I + i] * pv->value[o * I + i];
      if (pg->requires_grad) {
        pg->ensure_grad();
        pg->grad[o] += dot / n;
      }
      if (pv->requires_grad) {
        pv->ensure_grad();
        const double gain = pg->value[o];
        for (int64_t i = 0; i < I; ++i)
          pv->grad[o * I + i] += gain / n * (self->grad[o * I + i] -
                                             dot * pv->value[o * I + i] / (n * n));
      }
    }
  });
  return Tensor::wrap(out);
}

// ---------------------------------------------------------------------------
// NN primitives

Tensor softmax(const Tensor& a, int axis) {
  const int ax = fix_axis(a, axis);
  int64_t outer, n, inner;
  axis_extents(a.shape(), ax, &outer, &n, &inner);
  auto pa = a.node();
  auto out = alloc_node(a.shape());
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < inner; ++j) {
      double mx = -HUGE_VAL;
      for (int64_t k = 0; k < n; ++k)
        mx = std::max(mx, pa->value[(o * n + k) * inner + j]);
      double z = 0;
      for (int64_t k = 0; k < n; ++k) {
        const double e = std::exp(pa->value[(o * n + k) * inner + j] - mx);
        out->value[(o * n + k) * inner + j] = e;
        z += e;
      }
      for (int64_t k = 0; k < n; ++k) out->value[(o * n + k) * inner + j] /= z;
    }
  Node* self = out.get();
  attach(out, {pa}, [self, pa, outer, n, inner]() {
    pa->ensure_grad();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t j = 0; j < inner; ++j) {
        double s = 0;
        for (int64_t k = 0; k < n; ++k) {
          const int64_t idx = (o * n + k) * inner + j;
          s += self->grad[idx] * self->value[idx];
        }
        for (int64_t k = 0; k < n; ++k) {
          const int64_t idx = (o * n + k) * inner + j;
          pa->grad[idx] += self->value[idx] * (self->grad[idx] - s);
        }
      }
  });
  return Tensor::wrap(out);
}

Tensor log_softmax(const Tensor& a, int axis) {
  const int ax = fix_axis(a, axis);
  int64_t outer, n, inner;
  axis_extents(a.shape(), ax, &outer, &n, &inner);
  auto pa = a.node();
  auto out = alloc_node(a.shape());
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < inner; ++j) {
      double mx = -HUGE_VAL;
      for (int64_t k = 0; k < n; ++k)
        mx = std::max(mx, pa->value[(o * n + k) * inner + j]);
      double z = 0;
      for (int64_t k = 0; k < n; ++k)
        z += std::exp(pa->value[(o * n + k) * inner + j] - mx);
      const double lse = mx + std::log(z);
      for (int64_t k = 0; k < n; ++k) {
        const int64_t idx = (o * n + k) * inner + j;
        out->value[idx] = pa->value[idx] - lse;
      }
    }
  Node* self = out.get();
  attach(out, {pa}, [self, pa, outer, n, inner]() {
    pa->ensure_grad();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t j = 0; j < inner; ++j) {
        double s = 0;
        for (int64_t k = 0; k < n; ++k) s += self->grad[(o * n + k) * inner + j];
        for (int64_t k = 0; k < n; ++k) {
          const int64_t idx = (o * n + k) * inner + j;
          pa->grad[idx] += self->grad[idx] - std::exp(self->value[idx]) * s;
        }
      }
  });
  return Tensor::wrap(out);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  const int64_t D = x.shape().back();
  if (gain.rank() != 1 || gain.shape()[0] != D || bias.rank() != 1 ||
      bias.shape()[0] != D)
    throw ShapeError("layer_norm: gain/bias must be (" + std::to_string(D) + ")");
  const int64_t rows = x.size() / D;
  auto px = x.node();
  auto pg = gain.node();
  auto pb = bias.node();
  auto out = alloc_node(x.shape());
  std::vector<double> inv_std(rows), xhat(px->value.size());
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = &px->value[r * D];
    double m = 0;
    for (int64_t i = 0; i < D; ++i) m += xr[i];
    m /= D;
    double var = 0;
    for (int64_t i = 0; i < D; ++i) var += (xr[i] - m) * (xr[i] - m);
    var /= D;
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (int64_t i = 0; i < D; ++i) {
      const double h = (xr[i] - m) * inv;
      xhat[r * D + i] = h;
      out->value[r * D + i] = h * pg->value[i] + pb->value[i];
    }
  }
  Node* self = out.get();
  attach(out, {px, pg, pb},
         [self, px, pg, pb, inv_std = std::move(inv_std), xhat = std::move(xhat),
          rows, D]() {
           if (pg->requires_grad) pg->ensure_grad();
           if (pb->requires_grad) pb->ensure_grad();
           if (px->requires_grad) px->ensure_grad();
           std::vector<double> dxhat(D);
           for (int64_t r = 0; r < rows; ++r) {
             const double* g = &self->grad[r * D];
             const double* h = &xhat[r * D];
             double m1 = 0, m2 = 0;
             for (int64_t i = 0; i < D; ++i) {
               dxhat[i] = g[i] * pg->value[i];
               m1 += dxhat[i];
               m2 += dxhat[i] * h[i];
               if (pg->requires_grad) pg->grad[i] += g[i] * h[i];
               if (pb->requires_grad) pb->grad[i] += g[i];
             }
             m1 /= D;
             m2 /= D;
             if (px->requires_grad)
               for (int64_t i = 0; i < D; ++i)
                 px->grad[r * D + i] += inv_std[r] * (dxhat[i] - m1 - h[i] * m2);
           }
         });
  return Tensor::wrap(out);
}

Tensor embed(const Tensor& table, const std::vector<int64_t>& ids,
             const Shape& ids_shape) {
  if (table.rank() != 2) throw ShapeError("embed: table must be (V, D)");
  if (shape_size(ids_shape) != static_cast<int64_t>(ids.size()))
    throw ShapeError("embed: ids_shape mismatch");
  const int64_t V = table.shape()[0], D = table.shape()[1];
  for (int64_t id : ids)
    if (id < 0 || id >= V)
      throw IndexError("embed: token id " + std::to_string(id) +
                       " out of vocabulary range [0," + std::to_string(V) + ")");
  auto pt = table.node();
  Shape out_shape = ids_shape;
  out_shape.push_back(D);
  auto out = alloc_node(out_shape);
  for (size_t k = 0; k < ids.size(); ++k)
    std::memcpy(&out->value[k * D], &pt->value[ids[k] * D], sizeof(double) * D);
  Node* self = out.get();
  attach(out, {pt}, [self, pt, ids, D]() {
    pt->ensure_grad();
    for (size_t k = 0; k < ids.size(); ++k) {
      const double* g = &self->grad[k * D];
      double* dst = &pt->grad[ids[k] * D];
      for (int64_t j = 0; j < D; ++j) dst[j] += g[j];
    }
  });
  return Tensor::wrap(out);
}

Tensor gather_last(const Tensor& a, const std::vector<int64_t>& ids) {
  if (a.rank() < 1) throw ShapeError("gather_last needs rank >= 1");
  const int64_t V = a.shape().back();
  const int64_t rows = a.size() / V;
  if (static_cast<int64_t>(ids.size()) != rows)
    throw ShapeError("gather_last: need one index per row");
  for (int64_t id : ids)
    if (id < 0 || id >= V)
      throw IndexError("gather_last: index " + std::to_string(id) +
                       " out of range [0," + std::to_string(V) + ")");
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  auto pa = a.node();
  auto out = alloc_node(out_shape);
  for (int64_t r = 0; r < rows; ++r) out->value[r] = pa->value[r * V + ids[r]];
  Node* self = out.get();
  attach(out, {pa}, [self, pa, ids, V, rows]() {
    pa->ensure_grad();
    for (int64_t r = 0; r < rows; ++r)
      pa->grad[r * V + ids[r]] += self->grad[r];
  });
  return Tensor::wrap(out);
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& targets) {
  return neg(mean_all(gather_last(log_softmax(logits, -1), targets)));
}

Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0) throw Error("dropout: rate must be in [0,1)");
  if (!training || rate == 0.0) return x;
  const double keep = 1.0 - rate;
  std::vector<double> mask(static_cast<size_t>(x.size()));
  for (auto& m : mask) m = (rng.uniform01() < rate) ? 0.0 : 1.0 / keep;
  return mul(x, Tensor::from_data(x.shape(), std::move(mask)));
}

bool all_finite(const Tensor& a) {
  for (double v : a.data())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace seqdens
