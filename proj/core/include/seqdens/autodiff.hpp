#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "seqdens/rng.hpp"
#include "seqdens/tensor.hpp"

namespace seqdens {

// The recorded reverse-mode program for one forward pass: nodes in
// topological order (every parent precedes its child). Built on demand by
// linearizing the graph reachable from a root; discarded after backward.
class Tape {
 public:
  static Tape linearize(const Tensor& root);

  // Reverse sweep. Seeds the scalar root with gradient 1, visits each node
  // exactly once, and accumulates into leaf gradients. Calling backward
  // again adds the same leaf gradients again (deterministic accumulation).
  void backward();

  size_t node_count() const { return order_.size(); }
  // Test hook: true iff every node appears after all of its parents.
  bool is_topologically_ordered() const;

 private:
  std::vector<std::shared_ptr<detail::Node>> order_;
  std::shared_ptr<detail::Node> root_;
};

// linearize + backward in one call.
void backward(const Tensor& loss);

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int64_t worst_index = -1;
  int64_t checked = 0;
  bool pass = false;
};

// Compares the reverse-mode gradient of a scalar-valued f against central
// finite differences at x. Checks every coordinate.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& x, double eps = 1e-5,
                           double tol = 1e-4);

// Same idea for a loss closed over many parameter tensors; perturbs up to
// max_coords randomly chosen coordinates per tensor.
GradCheckReport grad_check_params(
    const std::function<Tensor()>& f,
    const std::vector<std::pair<std::string, Tensor>>& params, double eps,
    double tol, Rng& rng, int max_coords = 16);

}  // namespace seqdens
