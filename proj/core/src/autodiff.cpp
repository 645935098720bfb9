#include "seqdens/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "seqdens/error.hpp"

namespace seqdens {

using detail::Node;

Tape Tape::linearize(const Tensor& root) {
  Tape tape;
  tape.root_ = root.node();
  if (!tape.root_ || !tape.root_->requires_grad) return tape;
  // Iterative post-order DFS; recursion would overflow on long op chains.
  std::unordered_set<Node*> visited;
  std::vector<std::pair<std::shared_ptr<Node>, size_t>> stack;
  stack.emplace_back(tape.root_, 0);
  visited.insert(tape.root_.get());
  while (!stack.empty()) {
    auto& [node, next_parent] = stack.back();
    bool descended = false;
    while (next_parent < node->parents.size()) {
      auto& p = node->parents[next_parent++];
      if (p && p->requires_grad && !visited.count(p.get())) {
        visited.insert(p.get());
        stack.emplace_back(p, 0);
        descended = true;
        break;
      }
    }
    if (!descended && next_parent >= node->parents.size()) {
      tape.order_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

bool Tape::is_topologically_ordered() const {
  std::unordered_set<Node*> seen;
  for (const auto& n : order_) {
    for (const auto& p : n->parents)
      if (p && p->requires_grad && !seen.count(p.get())) return false;
    seen.insert(n.get());
  }
  return true;
}

void Tape::backward() {
  if (!root_ || order_.empty()) return;
  if (root_->value.size() != 1)
    throw ShapeError("backward root must be a scalar");
  // Interior gradients are recomputed per pass; leaf gradients accumulate.
  for (auto& n : order_) {
    if (!n->is_leaf) {
      n->ensure_grad();
      std::fill(n->grad.begin(), n->grad.end(), 0.0);
    } else {
      n->ensure_grad();
    }
  }
  if (root_->is_leaf) {
    root_->grad[0] += 1.0;
    return;
  }
  root_->grad[0] = 1.0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it)
    if ((*it)->backward) (*it)->backward();
}

void backward(const Tensor& loss) { Tape::linearize(loss).backward(); }

namespace {

double rel_err(double a, double b) {
  const double denom = std::max({std::fabs(a), std::fabs(b), 1e-3});
  return std::fabs(a - b) / denom;
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& x, double eps, double tol) {
  Tensor xv = x.detach();
  auto param = Tensor::from_data(xv.shape(), {xv.data().begin(), xv.data().end()},
                                 /*requires_grad=*/true);
  Tensor y = f(param);
  if (y.size() != 1) throw ShapeError("grad_check: f must be scalar-valued");
  if (!std::isfinite(y.item()))
    throw NumericalError("grad_check: f(x) is not finite");
  backward(y);
  std::vector<double> analytic(param.grad().begin(), param.grad().end());

  GradCheckReport rep;
  NoGradGuard ng;
  for (int64_t i = 0; i < param.size(); ++i) {
    const double orig = param.raw()[i];
    param.raw()[i] = orig + eps;
    const double fp = f(param).item();
    param.raw()[i] = orig - eps;
    const double fm = f(param).item();
    param.raw()[i] = orig;
    const double fd = (fp - fm) / (2 * eps);
    const double err = rel_err(analytic[i], fd);
    if (err > rep.max_rel_err) {
      rep.max_rel_err = err;
      rep.worst_index = i;
    }
    ++rep.checked;
  }
  rep.pass = rep.max_rel_err < tol;
  return rep;
}

GradCheckReport grad_check_params(
    const std::function<Tensor()>& f,
    const std::vector<std::pair<std::string, Tensor>>& params, double eps,
    double tol, Rng& rng, int max_coords) {
  for (auto& [name, p] : params) {
    Tensor t = p;
    t.zero_grad();
  }
  Tensor y = f();
  if (y.size() != 1) throw ShapeError("grad_check_params: f must be scalar-valued");
  if (!std::isfinite(y.item()))
    throw NumericalError("grad_check_params: f() is not finite");
  backward(y);

  GradCheckReport rep;
  NoGradGuard ng;
  for (auto& [name, p] : params) {
    Tensor param = p;
    std::vector<double> analytic(param.grad().begin(), param.grad().end());
    if (analytic.empty()) analytic.assign(static_cast<size_t>(param.size()), 0.0);
    std::vector<int64_t> coords;
    if (param.size() <= max_coords) {
      coords.resize(static_cast<size_t>(param.size()));
      for (int64_t i = 0; i < param.size(); ++i) coords[static_cast<size_t>(i)] = i;
    } else {
      for (int i = 0; i < max_coords; ++i)
        coords.push_back(static_cast<int64_t>(
            rng.uniform_int(static_cast<uint64_t>(param.size()))));
    }
    for (int64_t i : coords) {
      const double orig = param.raw()[i];
      param.raw()[i] = orig + eps;
      const double fp = f().item();
      param.raw()[i] = orig - eps;
      const double fm = f().item();
      param.raw()[i] = orig;
      const double fd = (fp - fm) / (2 * eps);
      const double err = rel_err(analytic[i], fd);
      if (err > rep.max_rel_err) {
        rep.max_rel_err = err;
        rep.worst_index = i;
        rep.worst_param = name;
      }
      ++rep.checked;
    }
  }
  rep.pass = rep.max_rel_err < tol;
  return rep;
}

}  // namespace seqdens
