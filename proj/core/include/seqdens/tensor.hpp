#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "seqdens/rng.hpp"

namespace seqdens {

using Shape = std::vector<int64_t>;

int64_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily, same size as value
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward;  // propagates this->grad into parents
  uint64_t seq = 0;                // creation order, for deterministic tapes

  void ensure_grad();
};

// Thread-local switch: when disabled, ops produce constant results and no
// graph is recorded (used by inference and evaluation paths).
bool grad_mode_enabled();
void set_grad_mode(bool on);

}  // namespace detail

struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_mode_enabled()) { detail::set_grad_mode(false); }
  ~NoGradGuard() { detail::set_grad_mode(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Dense row-major tensor of doubles with an optional reverse-mode record.
// A Tensor with no live graph reference is immutable from the library's
// point of view and safe to share across threads; graph construction and
// backward are single-threaded per tape.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int64_t dim(int axis) const;  // negative axis counts from the back
  int64_t size() const;
  bool requires_grad() const;

  std::span<const double> data() const;
  std::span<double> raw();  // mutable view; only sane on leaf tensors
  double item() const;      // requires size() == 1
  double at(std::initializer_list<int64_t> idx) const;

  std::span<const double> grad() const;  // empty span if no grad buffer
  void zero_grad();

  // Same values, detached from any graph.
  Tensor detach() const;

  std::shared_ptr<detail::Node> node() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::Node> n);

 private:
  std::shared_ptr<detail::Node> node_;
};

// ---- elementwise ----
// Binary ops require b.shape == a.shape, or b.shape to be a suffix of
// a.shape (b is then broadcast across the leading batch dimensions).
// No other broadcasting is supported; reshape explicitly instead.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double v);
Tensor mul_scalar(const Tensor& a, double v);
Tensor neg(const Tensor& a);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor log_abs(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);

// ---- shape ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<int>& perm);
Tensor transpose_last2(const Tensor& a);
Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len);
Tensor take(const Tensor& a, int axis, const std::vector<int64_t>& indices);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor expand_scalar(const Tensor& s, int64_t n);  // scalar -> shape (n)

// ---- reductions ----
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis);   // removes the axis
Tensor mean_axis(const Tensor& a, int axis);  // removes the axis

// ---- linear algebra ----
// a: (..., M, K). b: (K, N) is broadcast across a's leading dims; otherwise
// b must be (..., K, N) with leading dims equal to a's.
Tensor matmul(const Tensor& a, const Tensor& b);
// log|det| of a square matrix, via LU. Gradient is inv(a)^T.
Tensor logdet(const Tensor& a);
// Row-wise weight normalization: W_ij = g_i * v_ij / ||v_i||.
Tensor weight_norm(const Tensor& v, const Tensor& g);

// ---- neural-net primitives ----
Tensor softmax(const Tensor& a, int axis);
Tensor log_softmax(const Tensor& a, int axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-6);
// table: (V, D); ids indexes rows; result shape = ids_shape + (D).
Tensor embed(const Tensor& table, const std::vector<int64_t>& ids,
             const Shape& ids_shape);
// Picks data[..., ids[...]] along the last axis; result drops that axis.
Tensor gather_last(const Tensor& a, const std::vector<int64_t>& ids);
// Mean negative log-likelihood of targets under softmax(logits), last axis.
Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& targets);
// Inverted dropout; identity when !training or rate == 0.
Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training);

bool all_finite(const Tensor& a);

}  // namespace seqdens
