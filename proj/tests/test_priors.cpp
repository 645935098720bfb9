#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "seqdens/error.hpp"
#include "seqdens/estimators.hpp"
#include "seqdens/priors.hpp"
#include "testutil.hpp"

using namespace seqdens;
using testutil::close;
using testutil::close_rel;

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

ModelConfig flow_config(std::vector<int> depths, int64_t d_latent, int heads) {
  ModelConfig c;
  c.d_model = 16;
  c.d_latent = d_latent;
  c.d_filter = 32;
  c.heads = 2;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.posterior_layers = 1;
  c.vocab_size = 8;
  c.max_len = 16;
  c.dropout_rate = 0.0;
  c.flow_depths = std::move(depths);
  c.flow_heads = heads;
  return c;
}

// One source row replicated B times so every batch element shares x.
EncodedSource fake_src(int64_t B, int64_t len, int64_t d_model, uint64_t seed) {
  Rng rng(seed);
  Tensor row = Tensor::randn({len, d_model}, rng);
  std::vector<double> data;
  for (int64_t b = 0; b < B; ++b)
    data.insert(data.end(), row.data().begin(), row.data().end());
  return {Tensor::from_data({B, len, d_model}, std::move(data)), B, len};
}

// Sets every layer to (numerically) the identity map: unit actnorm,
// identity mixing matrices, couplings with s = 1 and b = 0.
void rig_identity(ParamRegistry& reg, const FlowStack& stack) {
  // raw chosen so sigmoid(raw + 2) + 1e-3 == 1 up to fp rounding
  const double raw_one = std::log(0.999 / 0.001) - 2.0;
  for (auto& [name, t] : reg.items()) {
    Tensor p = t;
    if (name.find(".mix.w") != std::string::npos) {
      const int64_t n = p.shape()[0];
      std::fill(p.raw().begin(), p.raw().end(), 0.0);
      for (int64_t i = 0; i < n; ++i) p.raw()[i * n + i] = 1.0;
    } else if (name.find(".cpl.out.g") != std::string::npos) {
      std::fill(p.raw().begin(), p.raw().end(), 0.0);
    } else if (name.find(".cpl.out.b") != std::string::npos) {
      const int64_t half = p.size() / 2;
      for (int64_t i = 0; i < half; ++i) p.raw()[i] = raw_one;
      for (int64_t i = half; i < p.size(); ++i) p.raw()[i] = 0.0;
    }
  }
  (void)stack;
}

// Flattened forward map z -> base for the numerical Jacobian oracle.
std::vector<double> forward_map(const FlowStack& stack, const EncodedSource& src,
                                const std::vector<double>& z_flat, int64_t T,
                                int64_t d) {
  NoGradGuard ng;
  Tensor z = Tensor::from_data({1, T, d}, z_flat);
  LatentBlock base = stack.forward_to_base(src, z, EvalContext::eval());
  return {base.values.data().begin(), base.values.data().end()};
}

double logabsdet_dense(const std::vector<std::vector<double>>& jac) {
  // Gaussian elimination with partial pivoting on a copy.
  const size_t n = jac.size();
  std::vector<std::vector<double>> a = jac;
  double acc = 0;
  for (size_t col = 0; col < n; ++col) {
    size_t piv = col;
    for (size_t r = col + 1; r < n; ++r)
      if (std::fabs(a[r][col]) > std::fabs(a[piv][col])) piv = r;
    std::swap(a[piv], a[col]);
    const double d = a[col][col];
    REQUIRE(std::fabs(d) > 1e-14);
    acc += std::log(std::fabs(d));
    for (size_t r = col + 1; r < n; ++r) {
      const double f = a[r][col] / d;
      for (size_t c = col; c < n; ++c) a[r][c] -= f * a[col][c];
    }
  }
  return acc;
}

}  // namespace

TEST_CASE("affine coupling core: identity, log 2, hand inverse") {
  Tensor z = Tensor::from_data({1, 1, 1}, {7.0});
  auto [same, inc0] = affine_couple(z, Tensor::full({1, 1, 1}, 1.0),
                                    Tensor::zeros({1, 1, 1}));
  CHECK(close(same.item(), 7.0, 1e-15));
  CHECK(close(inc0.data()[0], 0.0, 1e-15));

  auto [scaled, inc] = affine_couple(z, Tensor::full({1, 1, 1}, 2.0),
                                     Tensor::full({1, 1, 1}, 3.0));
  CHECK(close(scaled.item(), 17.0, 1e-15));
  CHECK(close(inc.data()[0], std::log(2.0), 1e-15));

  Tensor back = affine_uncouple(Tensor::from_data({1, 1, 1}, {7.0}),
                                Tensor::full({1, 1, 1}, 2.0),
                                Tensor::full({1, 1, 1}, 3.0));
  CHECK(close(back.item(), 2.0, 1e-15));

  CHECK_THROWS_AS(affine_uncouple(z, Tensor::full({1, 1, 1}, 1e-13),
                                  Tensor::zeros({1, 1, 1})),
                  NumericalError);
}

TEST_CASE("coupling layer log_det matches a numerical Jacobian on 4 dims") {
  // single coupling layer on (T=2, d=2): 4 total dimensions
  ModelConfig c = flow_config({1}, 2, 1);
  ParamRegistry reg;
  Rng rng(3);
  EncodedSource src = fake_src(1, 3, c.d_model, 77);
  for (SplitPattern pattern :
       {SplitPattern::feature_halves, SplitPattern::alternating_time,
        SplitPattern::alternating_features}) {
    FlowLayer layer;
    layer.kind = FlowLayerKind::coupling;
    layer.pattern = pattern;
    layer.swapped = false;
    layer.net = CouplingNet(reg, "p" + std::to_string(static_cast<int>(pattern)),
                            pattern == SplitPattern::alternating_time ? 2 : 1,
                            pattern == SplitPattern::alternating_time ? 4 : 2, c,
                            rng);
    Rng zr(11);
    std::vector<double> z_flat = testutil::randn_vec(4, zr);
    auto f = [&](const std::vector<double>& x) {
      NoGradGuard ng;
      Tensor z = Tensor::from_data({1, 2, 2}, x);
      auto [out, inc] = layer.forward(z, src, EvalContext::eval());
      return std::vector<double>{out.data().begin(), out.data().end()};
    };
    auto jac = testutil::numerical_jacobian(f, z_flat, 1e-6);
    const double oracle = logabsdet_dense(jac);
    Tensor z = Tensor::from_data({1, 2, 2}, z_flat);
    auto [out, inc] = layer.forward(z, src, EvalContext::eval());
    CHECK(close_rel(inc.data()[0], oracle, 1e-4));
  }
}

TEST_CASE("coupling inverse round trip per split pattern, both polarities") {
  ModelConfig c = flow_config({1}, 4, 1);
  ParamRegistry reg;
  Rng rng(5);
  EncodedSource src = fake_src(2, 3, c.d_model, 88);
  int idx = 0;
  for (SplitPattern pattern :
       {SplitPattern::feature_halves, SplitPattern::alternating_time,
        SplitPattern::alternating_features}) {
    for (bool swapped : {false, true}) {
      FlowLayer layer;
      layer.kind = FlowLayerKind::coupling;
      layer.pattern = pattern;
      layer.swapped = swapped;
      layer.index = idx;
      layer.net = CouplingNet(reg, "rt" + std::to_string(idx++),
                              pattern == SplitPattern::alternating_time ? 4 : 2,
                              pattern == SplitPattern::alternating_time ? 8 : 4,
                              c, rng);
      Rng zr(100 + idx);
      for (int trial = 0; trial < 20; ++trial) {
        Tensor z = Tensor::randn({2, 4, 4}, zr);
        auto [fwd, inc] = layer.forward(z, src, EvalContext::eval());
        Tensor back = layer.inverse(fwd, src, EvalContext::eval());
        for (int64_t i = 0; i < z.size(); ++i)
          CHECK(std::fabs(back.data()[i] - z.data()[i]) < 1e-8);
      }
    }
  }
}

TEST_CASE("identity flow stack reduces to the standard normal density") {
  ModelConfig c = flow_config({1, 1, 1}, 4, 2);
  ParamRegistry reg;
  Rng rng(7);
  FlowStack stack(reg, "flow", c, rng);
  rig_identity(reg, stack);
  EncodedSource src = fake_src(2, 3, c.d_model, 99);
  Rng zr(9);
  Tensor z = Tensor::randn({2, 8, 4}, zr);
  Tensor ld = stack.log_density(src, z, EvalContext::eval());
  Tensor expect = std_normal_log_density(z);
  for (int64_t b = 0; b < 2; ++b)
    CHECK(close(ld.data()[b], expect.data()[b], 1e-6));
}

TEST_CASE("log density is invariant under appending an identity step") {
  ModelConfig c1 = flow_config({1}, 4, 2);
  ModelConfig c2 = flow_config({2}, 4, 2);
  ParamRegistry r1, r2;
  Rng rng1(13), rng2(13);
  FlowStack s1(r1, "flow", c1, rng1);
  FlowStack s2(r2, "flow", c2, rng2);
  // same parameters for the first step (identical rng stream), identity for
  // the appended second step
  rig_identity(r2, s2);
  // re-copy first step params from s1 (rig_identity overwrote them)
  for (auto& [name, t] : r1.items()) {
    Tensor dst = r2.get(name);
    std::copy(t.data().begin(), t.data().end(), dst.raw().begin());
  }
  EncodedSource src = fake_src(1, 3, c1.d_model, 21);
  Rng zr(15);
  Tensor z = Tensor::randn({1, 4, 4}, zr);
  const double a = s1.log_density(src, z, EvalContext::eval()).data()[0];
  const double b = s2.log_density(src, z, EvalContext::eval()).data()[0];
  CHECK(close(a, b, 1e-6));
}

TEST_CASE("flow log density matches a dense change-of-variables oracle (T=4, d=2)") {
  ModelConfig c = flow_config({1, 1, 1}, 2, 1);
  ParamRegistry reg;
  Rng rng(17);
  FlowStack stack(reg, "flow", c, rng);
  EncodedSource src = fake_src(1, 3, c.d_model, 23);
  Rng zr(19);
  std::vector<double> z_flat = testutil::randn_vec(8, zr, 0.8);
  auto f = [&](const std::vector<double>& x) {
    return forward_map(stack, src, x, 4, 2);
  };
  auto jac = testutil::numerical_jacobian(f, z_flat, 1e-6);
  const double logdet_oracle = logabsdet_dense(jac);
  const auto eps = f(z_flat);
  double base_ld = 0;
  for (double e : eps) base_ld += -0.5 * (e * e + kLog2Pi);
  const double oracle = base_ld + logdet_oracle;
  Tensor z = Tensor::from_data({1, 4, 2}, z_flat);
  const double got = stack.log_density(src, z, EvalContext::eval()).data()[0];
  CHECK(close_rel(got, oracle, 1e-3));
}

TEST_CASE("multi-scale invertibility over random latents") {
  ModelConfig c = flow_config({2, 2, 2}, 4, 2);
  ParamRegistry reg;
  Rng rng(29);
  FlowStack stack(reg, "flow", c, rng);
  EncodedSource src = fake_src(2, 3, c.d_model, 31);
  Rng zr(37);
  double max_err = 0;
  for (int trial = 0; trial < 50; ++trial) {
    Tensor z = Tensor::randn({2, 8, 4}, zr);
    LatentBlock base = stack.forward_to_base(src, z, EvalContext::eval());
    Tensor back = stack.inverse_from_base(src, base.values, EvalContext::eval());
    for (int64_t i = 0; i < z.size(); ++i)
      max_err = std::max(max_err, std::fabs(back.data()[i] - z.data()[i]));
  }
  CHECK(max_err < 1e-6);
}

TEST_CASE("flow sampling: determinism and forward round trip") {
  ModelConfig c = flow_config({2, 2}, 4, 2);
  ParamRegistry reg;
  Rng rng(41);
  FlowStack stack(reg, "flow", c, rng);
  EncodedSource src = fake_src(2, 3, c.d_model, 43);
  Rng s1(55), s2(55);
  Tensor a = stack.sample(src, 8, s1, EvalContext::eval());
  Tensor b = stack.sample(src, 8, s2, EvalContext::eval());
  for (int64_t i = 0; i < a.size(); ++i) CHECK(a.data()[i] == b.data()[i]);
  // f(f^{-1}(eps)) == eps
  Rng er(57);
  Tensor eps = Tensor::randn({2, 8, 4}, er);
  Tensor z = stack.inverse_from_base(src, eps, EvalContext::eval());
  LatentBlock fwd = stack.forward_to_base(src, z, EvalContext::eval());
  for (int64_t i = 0; i < eps.size(); ++i)
    CHECK(std::fabs(fwd.values.data()[i] - eps.data()[i]) < 1e-8);
  // log density of samples is finite
  Tensor ld = stack.log_density(src, a, EvalContext::eval());
  for (double v : ld.data()) CHECK(std::isfinite(v));
}

TEST_CASE("identity stack samples are standard normal (Monte Carlo)") {
  ModelConfig c = flow_config({1}, 4, 2);
  ParamRegistry reg;
  Rng rng(61);
  FlowStack stack(reg, "flow", c, rng);
  rig_identity(reg, stack);
  EncodedSource src = fake_src(100, 3, c.d_model, 63);
  Rng sr(65);
  double acc = 0;
  int64_t n = 0;
  const int reps = 25;  // 100 sequences x 4 x 4 per draw
  for (int r = 0; r < reps; ++r) {
    Tensor s = stack.sample(src, 4, sr, EvalContext::eval());
    for (double v : s.data()) acc += v;
    n += s.size();
  }
  const double mean = acc / static_cast<double>(n);
  CHECK(std::fabs(mean) <= 3.0 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("prior mean: gaussian returns mu, identity flow returns zero, flow round trips") {
  ModelConfig c = flow_config({1, 1}, 4, 2);
  // gaussian prior
  LvmModel gm(c, PriorKind::gaussian, 67);
  auto enc = gm.encode({{3, 4, 5, 6}, {4, 3, 6, 5}}, EvalContext::eval());
  GaussianSequence p = gm.prior().gaussian_params(enc, 8, EvalContext::eval());
  Tensor mean = gm.prior().mean(enc, 8, EvalContext::eval());
  for (int64_t i = 0; i < mean.size(); ++i)
    CHECK(mean.data()[i] == p.mu.data()[i]);

  // identity flow returns the zero block
  ParamRegistry reg;
  Rng rng(71);
  FlowStack stack(reg, "flow", c, rng);
  rig_identity(reg, stack);
  EncodedSource src = fake_src(1, 3, c.d_model, 73);
  Tensor zero_mean = stack.mean(src, 8, EvalContext::eval());
  for (double v : zero_mean.data()) CHECK(std::fabs(v) < 1e-9);

  // generic flow: pushing the mean forward recovers the zero base point
  ParamRegistry reg2;
  Rng rng2(79);
  FlowStack stack2(reg2, "flow", c, rng2);
  Tensor m2 = stack2.mean(src, 8, EvalContext::eval());
  LatentBlock base = stack2.forward_to_base(src, m2, EvalContext::eval());
  for (double v : base.values.data()) CHECK(std::fabs(v) < 1e-8);
}

TEST_CASE("flow normalizes to 1 on a 2-dimensional latent (grid quadrature)") {
  ModelConfig c = flow_config({2}, 2, 1);
  ParamRegistry reg;
  Rng rng(83);
  FlowStack stack(reg, "flow", c, rng);
  EncodedSource srcs = fake_src(1, 3, c.d_model, 85);
  const int n = 121;
  const double lo = -6.0, hi = 6.0;
  const double h = (hi - lo) / (n - 1);
  // batch the whole grid through one forward pass
  std::vector<double> zs;
  zs.reserve(static_cast<size_t>(n) * n * 2);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      zs.push_back(lo + i * h);
      zs.push_back(lo + j * h);
    }
  const int64_t B = static_cast<int64_t>(n) * n;
  EncodedSource src_b = fake_src(B, 3, c.d_model, 85);
  Tensor z = Tensor::from_data({B, 1, 2}, std::move(zs));
  NoGradGuard ng;
  Tensor ld = stack.log_density(src_b, z, EvalContext::eval());
  (void)srcs;
  double integral = 0;
  for (double v : ld.data()) integral += std::exp(v) * h * h;
  CHECK(std::fabs(integral - 1.0) < 1e-2);
}

TEST_CASE("actnorm init standardizes every actnorm input and guards misuse") {
  ModelConfig c = flow_config({2}, 4, 2);
  ParamRegistry reg;
  Rng rng(89);
  FlowStack stack(reg, "flow", c, rng);
  EncodedSource src = fake_src(8, 3, c.d_model, 91);
  Rng zr(93);
  Tensor batch = add_scalar(mul_scalar(Tensor::randn({8, 4, 4}, zr), 2.5), 1.4);

  CHECK_THROWS_AS(
      [&] {
        ModelConfig c2 = flow_config({1}, 4, 2);
        ParamRegistry r2;
        Rng rr(95);
        FlowStack s2(r2, "f", c2, rr);
        EncodedSource one = fake_src(1, 3, c2.d_model, 97);
        Rng z2(99);
        s2.actnorm_init(one, Tensor::randn({1, 4, 4}, z2), EvalContext::eval());
      }(),
      DataError);

  stack.actnorm_init(src, batch, EvalContext::eval());
  CHECK(stack.actnorm_initialized());

  // verify each actnorm output is standardized on the init batch
  Tensor state = batch;
  for (const auto& layer : stack.layers()) {
    auto [next, inc] = layer.forward(state, src, EvalContext::eval());
    if (layer.kind == FlowLayerKind::actnorm) {
      const int64_t rows = next.dim(0) * next.dim(1);
      const int64_t d = next.dim(2);
      for (int64_t ch = 0; ch < d; ++ch) {
        double mean = 0, var = 0;
        for (int64_t r = 0; r < rows; ++r) mean += next.data()[r * d + ch];
        mean /= static_cast<double>(rows);
        for (int64_t r = 0; r < rows; ++r) {
          const double dv = next.data()[r * d + ch] - mean;
          var += dv * dv;
        }
        var /= static_cast<double>(rows);
        CHECK(std::fabs(mean) < 1e-6);
        CHECK(std::fabs(std::sqrt(var) - 1.0) < 1e-6);
      }
    }
    state = next;
  }

  CHECK_THROWS_AS(stack.actnorm_init(src, batch, EvalContext::eval()), Error);
}

TEST_CASE("six-combo split cycle transforms every coordinate") {
  const int64_t T = 8, d = 4;
  std::set<std::pair<int64_t, int64_t>> covered;
  for (int combo = 0; combo < 6; ++combo) {
    const SplitPattern p = static_cast<SplitPattern>(combo % 3);
    const bool swapped = combo >= 3;
    SplitIndices si = split_indices(p, swapped, T, d);
    for (int64_t tr : si.transformed) {
      if (si.axis == 1)
        for (int64_t f = 0; f < d; ++f) covered.insert({tr, f});
      else
        for (int64_t t = 0; t < T; ++t) covered.insert({t, tr});
    }
    // each pattern with its polarity pair covers everything by itself
    SplitIndices other = split_indices(p, !swapped, T, d);
    std::set<int64_t> both(si.transformed.begin(), si.transformed.end());
    both.insert(other.transformed.begin(), other.transformed.end());
    CHECK(static_cast<int64_t>(both.size()) == (si.axis == 1 ? T : d));
  }
  CHECK(static_cast<int64_t>(covered.size()) == T * d);
}
