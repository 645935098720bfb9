#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "seqdens/autodiff.hpp"
#include "seqdens/error.hpp"
#include "seqdens/tensor.hpp"
#include "testutil.hpp"

using namespace seqdens;
using testutil::close;
using testutil::close_rel;

TEST_CASE("matmul identity and hand arithmetic") {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor eye = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor out = matmul(a, eye);
  for (int64_t i = 0; i < 6; ++i) CHECK(out.data()[i] == a.data()[i]);

  Tensor m = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor v = Tensor::from_data({2, 1}, {1, 1});
  Tensor r = matmul(m, v);
  CHECK(r.at({0, 0}) == 3.0);
  CHECK(r.at({1, 0}) == 7.0);
}

TEST_CASE("matmul shape mismatch raises") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("matmul gradient equals ones x B^T (finite differences)") {
  Rng rng(7);
  Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
  Tensor b = Tensor::randn({4, 2}, rng);
  Tensor loss = sum_all(matmul(a, b));
  backward(loss);
  // analytic: dA = ones(3,2) x B^T
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 4; ++j) {
      double expect = 0;
      for (int64_t k = 0; k < 2; ++k) expect += b.at({j, k});
      CHECK(close_rel(a.grad()[i * 4 + j], expect, 1e-6));
    }
  // and against central differences
  auto rep = grad_check(
      [&](const Tensor& x) { return sum_all(matmul(x, b)); }, a, 1e-5, 1e-6);
  CHECK(rep.pass);
}

TEST_CASE("batched matmul with broadcast weight") {
  Rng rng(9);
  Tensor a = Tensor::randn({2, 3, 4}, rng);
  Tensor w = Tensor::randn({4, 5}, rng);
  Tensor out = matmul(a, w);
  CHECK(out.shape() == Shape{2, 3, 5});
  // spot-check one element against a hand loop
  double acc = 0;
  for (int64_t k = 0; k < 4; ++k) acc += a.at({1, 2, k}) * w.at({k, 3});
  CHECK(close(out.at({1, 2, 3}), acc, 1e-12));
}

TEST_CASE("softmax symmetry, stability, simplex") {
  Tensor x = Tensor::from_data({3}, {0, 0, 0});
  Tensor y = softmax(x, -1);
  for (int i = 0; i < 3; ++i) CHECK(close(y.data()[i], 1.0 / 3));

  Tensor big = Tensor::from_data({2}, {1000, 0});
  Tensor yb = softmax(big, -1);
  CHECK(close(yb.data()[0], 1.0, 1e-12));
  CHECK(close(yb.data()[1], 0.0, 1e-12));
  CHECK(std::isfinite(yb.data()[0]));

  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor r = Tensor::randn({4, 7}, rng, 3.0);
    Tensor s = softmax(r, -1);
    for (int row = 0; row < 4; ++row) {
      double sum = 0;
      for (int j = 0; j < 7; ++j) {
        const double v = s.at({row, j});
        CHECK(v >= 0.0);
        sum += v;
      }
      CHECK(std::fabs(sum - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("softmax gradient matches finite differences on random 4-vector") {
  Rng rng(11);
  Tensor x = Tensor::randn({4}, rng, 1.0, true);
  Tensor w = Tensor::randn({4}, rng);
  auto rep = grad_check(
      [&](const Tensor& t) { return sum_all(mul(softmax(t, -1), w)); }, x,
      1e-5, 1e-5);
  CHECK(rep.pass);
}

TEST_CASE("layer_norm of constant vector is zero") {
  Tensor x = Tensor::from_data({1, 4}, {5, 5, 5, 5});
  Tensor gain = Tensor::full({4}, 1.0);
  Tensor bias = Tensor::zeros({4});
  Tensor y = layer_norm(x, gain, bias);
  for (int i = 0; i < 4; ++i) CHECK(std::fabs(y.data()[i]) < 1e-9);
}

TEST_CASE("cross_entropy of uniform logits is log V") {
  Tensor logits = Tensor::zeros({3, 4});
  Tensor ce = cross_entropy(logits, {0, 2, 3});
  CHECK(close(ce.item(), std::log(4.0), 1e-12));
}

TEST_CASE("cross_entropy rejects out-of-vocabulary targets") {
  Tensor logits = Tensor::zeros({2, 4});
  CHECK_THROWS_AS(cross_entropy(logits, {0, 4}), IndexError);
}

TEST_CASE("embed gradient accumulates only at used rows") {
  Tensor table = Tensor::from_data({5, 2}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9}, true);
  Tensor out = embed(table, {1, 3, 1}, {3});
  backward(sum_all(out));
  auto g = table.grad();
  // row 1 used twice, row 3 once, rows 0/2/4 untouched
  CHECK(g[1 * 2 + 0] == 2.0);
  CHECK(g[3 * 2 + 0] == 1.0);
  CHECK(g[0] == 0.0);
  CHECK(g[2 * 2 + 0] == 0.0);
  CHECK(g[4 * 2 + 0] == 0.0);
  CHECK_THROWS_AS(embed(table, {5}, {1}), IndexError);
}

TEST_CASE("grad_check on f = sum(x^2)") {
  Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
  auto rep = grad_check(
      [](const Tensor& t) { return sum_all(square(t)); }, x, 1e-5, 1e-6);
  CHECK(rep.pass);
  CHECK(rep.max_rel_err < 1e-6);
  // analytic gradient [2,4,6]
  Tensor x2 = Tensor::from_data({3}, {1, 2, 3}, true);
  backward(sum_all(square(x2)));
  CHECK(close_rel(x2.grad()[0], 2.0, 1e-9));
  CHECK(close_rel(x2.grad()[1], 4.0, 1e-9));
  CHECK(close_rel(x2.grad()[2], 6.0, 1e-9));
}

TEST_CASE("grad_check raises on non-finite f") {
  Tensor x = Tensor::from_data({1}, {0.0}, true);
  CHECK_THROWS_AS(
      grad_check([](const Tensor& t) { return mul_scalar(log(add_scalar(t, 1.0)), HUGE_VAL); },
                 x),
      NumericalError);
}

TEST_CASE("property: reverse-mode matches central differences on random ops") {
  Rng rng(21);
  const double tol = 1e-4;
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = Tensor::randn({2, 3}, rng, 0.8, true);
    auto rep1 = grad_check(
        [&](const Tensor& t) {
          return mean_all(mul(tanh(t), sigmoid(add_scalar(t, 0.3))));
        },
        x, 1e-5, tol);
    CHECK(rep1.pass);

    Tensor y = Tensor::randn({4}, rng, 0.5, true);
    auto rep2 = grad_check(
        [&](const Tensor& t) {
          return sum_all(mul(softplus(t), exp(mul_scalar(t, 0.5))));
        },
        y, 1e-5, tol);
    CHECK(rep2.pass);

    Tensor z = Tensor::randn({3, 4}, rng, 1.0, true);
    Tensor gain = Tensor::randn({4}, rng, 0.3);
    Tensor bias = Tensor::randn({4}, rng, 0.3);
    Tensor w = Tensor::randn({4}, rng);
    auto rep3 = grad_check(
        [&](const Tensor& t) {
          return sum_all(mul(layer_norm(t, gain, bias), w));
        },
        z, 1e-5, tol);
    CHECK(rep3.pass);

    Tensor u = Tensor::randn({6}, rng, 1.2, true);
    auto rep4 = grad_check(
        [&](const Tensor& t) {
          return sum_all(mul(gelu(t), relu(add_scalar(t, 0.1))));
        },
        u, 1e-5, tol);
    CHECK(rep4.pass);

    Tensor v = Tensor::randn({2, 4}, rng, 1.0, true);
    std::vector<int64_t> ids{1, 3};
    auto rep5 = grad_check(
        [&](const Tensor& t) {
          return mean_all(gather_last(log_softmax(t, -1), ids));
        },
        v, 1e-5, tol);
    CHECK(rep5.pass);
  }
}

TEST_CASE("take/slice/concat/permute gradients") {
  Rng rng(31);
  Tensor x = Tensor::randn({3, 4}, rng, 1.0, true);
  Tensor w = Tensor::randn({2, 4}, rng);
  auto rep = grad_check(
      [&](const Tensor& t) {
        Tensor taken = take(t, 0, {2, 0});
        return sum_all(mul(taken, w));
      },
      x, 1e-5, 1e-6);
  CHECK(rep.pass);

  Tensor y = Tensor::randn({2, 6}, rng, 1.0, true);
  Tensor wy = Tensor::randn({2, 6}, rng);
  auto rep2 = grad_check(
      [&](const Tensor& t) {
        Tensor a = slice(t, 1, 0, 3);
        Tensor b = slice(t, 1, 3, 3);
        return sum_all(mul(concat({b, a}, 1), wy));
      },
      y, 1e-5, 1e-6);
  CHECK(rep2.pass);

  Tensor z = Tensor::randn({2, 3, 4}, rng, 1.0, true);
  auto rep3 = grad_check(
      [&](const Tensor& t) {
        return sum_all(square(permute(t, {2, 0, 1})));
      },
      z, 1e-5, 1e-6);
  CHECK(rep3.pass);
}

TEST_CASE("weight_norm and logdet gradients") {
  Rng rng(41);
  Tensor v = Tensor::randn({3, 4}, rng, 1.0, true);
  Tensor g = Tensor::randn({3}, rng, 0.5);
  Tensor w = Tensor::randn({3, 4}, rng);
  auto rep = grad_check(
      [&](const Tensor& t) { return sum_all(mul(weight_norm(t, g), w)); }, v,
      1e-5, 1e-5);
  CHECK(rep.pass);

  // gradient of log|det| wrt the gain as well
  Tensor g2 = Tensor::randn({3}, rng, 0.5, true);
  auto repg = grad_check(
      [&](const Tensor& t) { return sum_all(mul(weight_norm(v.detach(), t), w)); },
      g2, 1e-5, 1e-5);
  CHECK(repg.pass);

  Tensor m = Tensor::from_data({2, 2}, {2, 0.3, -0.1, 1.5}, true);
  auto repl = grad_check([](const Tensor& t) { return logdet(t); }, m, 1e-6, 1e-5);
  CHECK(repl.pass);
  CHECK(close(logdet(m).item(), std::log(std::fabs(2 * 1.5 - 0.3 * -0.1)), 1e-12));
}

TEST_CASE("suffix broadcasting in elementwise ops") {
  Tensor a = Tensor::from_data({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8}, true);
  Tensor b = Tensor::from_data({2}, {10, 100});
  Tensor out = add(a, b);
  CHECK(out.at({0, 0, 0}) == 11.0);
  CHECK(out.at({1, 1, 1}) == 108.0);
  backward(sum_all(mul(out, out.detach())));
  CHECK(a.grad().size() == 8);
  // non-suffix broadcast is rejected
  Tensor bad = Tensor::from_data({2, 1}, {1, 2});
  CHECK_THROWS_AS(add(a, bad), ShapeError);
}

TEST_CASE("backward twice accumulates deterministically (leaf grads double)") {
  Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
  Tensor loss = sum_all(square(x));
  Tape tape = Tape::linearize(loss);
  tape.backward();
  std::vector<double> once(x.grad().begin(), x.grad().end());
  tape.backward();
  for (size_t i = 0; i < once.size(); ++i)
    CHECK(close(x.grad()[i], 2 * once[i], 1e-12));
}

TEST_CASE("tape is topologically ordered and visits each node once") {
  Rng rng(5);
  Tensor x = Tensor::randn({4, 4}, rng, 1.0, true);
  Tensor h = tanh(matmul(x, x));  // diamond: x used twice
  Tensor loss = mean_all(mul(h, h));
  Tape tape = Tape::linearize(loss);
  CHECK(tape.is_topologically_ordered());
  CHECK(tape.node_count() >= 4);
}

TEST_CASE("no-grad mode records nothing") {
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  NoGradGuard ng;
  Tensor y = square(x);
  CHECK_FALSE(y.requires_grad());
  Tape tape = Tape::linearize(y);
  CHECK(tape.node_count() == 0);
}

TEST_CASE("dropout is identity in eval mode and scales in train mode") {
  Rng rng(17);
  Tensor x = Tensor::full({1000}, 1.0);
  Tensor eval_out = dropout(x, 0.5, rng, false);
  CHECK(eval_out.data()[0] == 1.0);
  Tensor train_out = dropout(x, 0.5, rng, true);
  double mean = 0;
  for (double v : train_out.data()) {
    CHECK((v == 0.0 || close(v, 2.0)));
    mean += v;
  }
  mean /= 1000;
  CHECK(std::fabs(mean - 1.0) < 0.15);
}

TEST_CASE("reductions over an axis") {
  Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor s0 = sum_axis(x, 0);
  CHECK(s0.shape() == Shape{3});
  CHECK(s0.data()[0] == 5.0);
  Tensor m1 = mean_axis(x, 1);
  CHECK(m1.shape() == Shape{2});
  CHECK(close(m1.data()[0], 2.0));
  CHECK(close(m1.data()[1], 5.0));
}

TEST_CASE("rng determinism and split independence") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(42);
  Rng d = c.split();
  CHECK(c.next_u64() != d.next_u64());
  // normal has roughly unit variance
  Rng e(7);
  double s = 0, s2 = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double z = e.normal();
    s += z;
    s2 += z * z;
  }
  CHECK(std::fabs(s / n) < 0.03);
  CHECK(std::fabs(s2 / n - 1.0) < 0.05);
}
