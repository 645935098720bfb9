#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "seqdens/error.hpp"
#include "seqdens/metrics.hpp"
#include "testutil.hpp"

using namespace seqdens;
using testutil::close;
using testutil::close_rel;
using testutil::LinearGaussianToy;

using Sent = std::vector<int64_t>;
using Refs = std::vector<std::vector<int64_t>>;

TEST_CASE("bleu: identical corpus scores 100") {
  std::vector<Sent> hyp = {{3, 4, 5, 6, 7}, {4, 4, 4, 4}};
  std::vector<Refs> refs = {{hyp[0]}, {hyp[1]}};
  CHECK(close(bleu(hyp, refs), 100.0, 1e-9));
}

TEST_CASE("bleu: disjoint vocabularies score exactly 0") {
  std::vector<Sent> hyp = {{3, 4, 5, 6}};
  std::vector<Refs> refs = {{{7, 8, 9, 10}}};
  CHECK(bleu(hyp, refs) == 0.0);
}

TEST_CASE("bleu: hand-computed micro example") {
  // hyp "the cat sat" vs ref "the cat sat down" (ids stand in for words):
  // p1 = 3/3 unsmoothed; p2..p4 = (c+1)/(t+1) = 3/3, 2/2, 1/1; BP = e^(1-4/3).
  // BLEU = 100 * e^(-1/3) = 71.65313105737893, by hand.
  std::vector<Sent> hyp = {{3, 4, 5}};
  std::vector<Refs> refs = {{{3, 4, 5, 6}}};
  CHECK(close(bleu(hyp, refs), 100.0 * std::exp(-1.0 / 3.0), 1e-9));
  CHECK(close(bleu(hyp, refs), 71.65313105737893, 1e-9));
}

TEST_CASE("bleu: multi-reference clipping and corpus-order invariance") {
  std::vector<Sent> hyp = {{3, 3, 4}, {5, 6, 7, 8}};
  std::vector<Refs> refs = {{{3, 4, 4}, {3, 3, 5}}, {{5, 6, 7, 8}}};
  const double a = bleu(hyp, refs);
  std::vector<Sent> hyp2 = {hyp[1], hyp[0]};
  std::vector<Refs> refs2 = {refs[1], refs[0]};
  CHECK(close(a, bleu(hyp2, refs2), 1e-12));
  CHECK(a > 0.0);
  CHECK(a < 100.0);
}

TEST_CASE("bleu: empty hypothesis set raises") {
  CHECK_THROWS_AS(bleu({}, {}), NumericalError);
  std::vector<Sent> hyp = {{}};
  std::vector<Refs> refs = {{{3, 4}}};
  CHECK_THROWS_AS(bleu(hyp, refs), NumericalError);
}

TEST_CASE("pairwise bleu: identical, disjoint, brute-force enumeration") {
  std::vector<std::vector<Sent>> identical = {{{3, 4, 5, 6}, {3, 4, 5, 6}, {3, 4, 5, 6}}};
  CHECK(close(pairwise_bleu(identical), 100.0, 1e-9));

  std::vector<std::vector<Sent>> disjoint = {{{3, 4, 5, 6}, {7, 8, 9, 10}}};
  CHECK(pairwise_bleu(disjoint) == 0.0);

  // 3 candidates, exactly two identical: verify against explicit pair loop
  std::vector<Sent> cands = {{3, 4, 5, 6}, {3, 4, 5, 6}, {3, 4, 6, 5}};
  double brute = 0;
  int n_pairs = 0;
  for (size_t i = 0; i < cands.size(); ++i)
    for (size_t j = 0; j < cands.size(); ++j) {
      if (i == j) continue;
      brute += bleu({cands[i]}, {{cands[j]}});
      ++n_pairs;
    }
  brute /= n_pairs;
  CHECK(close(pairwise_bleu({cands}), brute, 1e-9));

  // symmetric under candidate reordering
  std::vector<Sent> perm = {cands[2], cands[0], cands[1]};
  CHECK(close(pairwise_bleu({cands}), pairwise_bleu({perm}), 1e-12));

  CHECK_THROWS_AS(pairwise_bleu({{{3, 4}}}), Error);
}

TEST_CASE("pearson and spearman hand fixtures") {
  std::vector<double> x = {1, 2, 3}, y2 = {2, 4, 6}, y3 = {3, 2, 1};
  CHECK(close(pearson(x, y2), 1.0, 1e-12));
  CHECK(close(pearson(x, y3), -1.0, 1e-12));

  // 5-point fixture verified against the covariance formula by hand:
  // x = (1,2,3,4,5), y = (2,1,4,3,5):
  // cov = 1.4 (n denominator), sx^2 = 2, sy^2 = 2 -> r = 1.4/2 = 0.7
  std::vector<double> x5 = {1, 2, 3, 4, 5}, y5 = {2, 1, 4, 3, 5};
  CHECK(close(pearson(x5, y5), 0.7, 1e-12));
  // spearman on the same data: ranks equal values -> also 0.7
  CHECK(close(spearman(x5, y5), 0.7, 1e-12));

  // invariances
  std::vector<double> xa(x5), ya(y5);
  for (auto& v : xa) v = 3.0 * v + 7.0;
  CHECK(close(pearson(xa, y5), pearson(x5, y5), 1e-12));
  for (auto& v : ya) v = std::exp(v);  // strictly monotone
  CHECK(close(spearman(x5, ya), spearman(x5, y5), 1e-12));

  std::vector<double> flat = {1, 1, 1};
  CHECK_THROWS_AS(pearson(x, flat), NumericalError);
  std::vector<double> two = {1, 2};
  CHECK_THROWS_AS(pearson(two, two), NumericalError);
}

TEST_CASE("spearman averages tied ranks") {
  std::vector<double> x = {1, 2, 2, 4};
  std::vector<double> y = {10, 20, 30, 40};
  // ranks of x: 1, 2.5, 2.5, 4
  const double rho = spearman(x, y);
  CHECK(rho > 0.9);
  CHECK(rho < 1.0);
}

TEST_CASE("correlation report: monotone series and skip handling") {
  CorrelationSeries mono{"ar/raw", {-3, -2.5, -2, -1.5}, {10, 20, 30, 40}};
  CorrelationSeries tiny{"small", {-1, -2}, {1, 2}};
  auto rows = correlation_report({mono, tiny}, false);
  REQUIRE(rows.size() == 2);
  CHECK(close(rows[0].rho, 1.0, 1e-12));
  CHECK(rows[0].r > 0.99);
  CHECK(rows[1].skipped);
}

TEST_CASE("correlation report flags across-family sign disagreements") {
  // model A: better LL, worse BLEU than model B
  CorrelationSeries a{"flow", {-1.0}, {20.0}};
  CorrelationSeries b{"gauss", {-1.5}, {25.0}};
  CorrelationSeries c{"ar", {-1.4}, {30.0}};
  auto rows = correlation_report({a, b, c}, true);
  const auto& summary = rows.back();
  CHECK(summary.group == "across-family");
  CHECK(summary.note.find("disagree") != std::string::npos);
}

TEST_CASE("importance sampling recovers the exact marginal with q = posterior") {
  Rng rng(101);
  for (int trial = 0; trial < 20; ++trial) {
    LinearGaussianToy toy = LinearGaussianToy::random(rng);
    double mu[2], cov[2][2];
    toy.posterior(mu, cov);
    const double exact = toy.log_marginal();
    for (int S : {1, 3, 50}) {
      std::vector<double> lj(S), lq(S);
      Rng sr(1000 + trial * 10 + S);
      for (int s = 0; s < S; ++s) {
        double z[2];
        LinearGaussianToy::sample_full(mu, cov, sr, z);
        lj[s] = toy.log_joint(z);
        lq[s] = LinearGaussianToy::log_density_full(z, mu, cov);
      }
      CHECK(std::fabs(importance_sample_ll(lj, lq) - exact) < 1e-6);
    }
  }
}

TEST_CASE("IS estimate medians are non-decreasing in S (widened q)") {
  Rng rng(202);
  LinearGaussianToy toy = LinearGaussianToy::random(rng);
  double mu[2], cov[2][2];
  toy.posterior(mu, cov);
  // widen the proposal so the estimator has real variance
  double wide[2][2] = {{cov[0][0] * 4, cov[0][1] * 4},
                       {cov[1][0] * 4, cov[1][1] * 4}};
  auto run = [&](int S, uint64_t seed) {
    std::vector<double> lj(S), lq(S);
    Rng sr(seed);
    for (int s = 0; s < S; ++s) {
      double z[2];
      LinearGaussianToy::sample_full(mu, wide, sr, z);
      lj[s] = toy.log_joint(z);
      lq[s] = LinearGaussianToy::log_density_full(z, mu, wide);
    }
    return importance_sample_ll(lj, lq);
  };
  std::vector<double> small, big;
  for (uint64_t seed = 0; seed < 50; ++seed) {
    small.push_back(run(10, 777 + seed));
    big.push_back(run(1000, 970 + seed));
  }
  std::sort(small.begin(), small.end());
  std::sort(big.begin(), big.end());
  CHECK(big[25] >= small[25]);
  // and both lower-bound the exact marginal in the median
  CHECK(big[25] <= toy.log_marginal() + 1e-6);
}

TEST_CASE("single-sample IS identity at the posterior mean") {
  Rng rng(303);
  LinearGaussianToy toy = LinearGaussianToy::random(rng);
  double mu[2], cov[2][2];
  toy.posterior(mu, cov);
  const double lj = toy.log_joint(mu);
  const double lq = LinearGaussianToy::log_density_full(mu, mu, cov);
  std::vector<double> ljv = {lj}, lqv = {lq};
  CHECK(close(importance_sample_ll(ljv, lqv), lj - lq, 1e-12));
}

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.d_model = 16;
  c.d_latent = 4;
  c.d_filter = 32;
  c.heads = 2;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.posterior_layers = 1;
  c.vocab_size = 8;
  c.max_len = 16;
  c.dropout_rate = 0.0;
  return c;
}

std::vector<SequencePair> tiny_pairs() {
  std::vector<SequencePair> pairs;
  SequencePair a;
  a.source = {3, 4, 5};
  a.target = {4, 5, 6, 2};
  a.raw_target_len = 3;
  pairs.push_back(a);
  SequencePair b;
  b.source = {5, 4, 3, 6};
  b.target = {6, 5, 4, 3};
  b.raw_target_len = 4;
  pairs.push_back(b);
  SequencePair c;
  c.source = {3, 3, 3};
  c.target = {7, 7, 2, 2};
  c.raw_target_len = 2;
  pairs.push_back(c);
  return pairs;
}

}  // namespace

TEST_CASE("ar_test_ll: uniform model gives -log V per token, shuffle invariant") {
  ArModel m(tiny_config(), 5);
  Tensor w = m.params().get("dec.out.w");
  Tensor b = m.params().get("dec.out.b");
  std::fill(w.raw().begin(), w.raw().end(), 0.0);
  std::fill(b.raw().begin(), b.raw().end(), 0.0);
  auto pairs = tiny_pairs();
  LLEstimate est = ar_test_ll(m, pairs);
  CHECK(close(est.mean_per_token, -std::log(8.0), 1e-12));
  CHECK(est.std_error == 0.0);
  CHECK(est.samples == 1);

  // shuffling the test set changes nothing
  ArModel m2(tiny_config(), 6);
  LLEstimate e1 = ar_test_ll(m2, pairs);
  std::vector<SequencePair> shuffled = {pairs[2], pairs[0], pairs[1]};
  LLEstimate e2 = ar_test_ll(m2, shuffled);
  CHECK(close(e1.mean_per_token, e2.mean_per_token, 1e-12));

  // and the total matches an independent per-pair recomputation
  double ll_sum = 0;
  int64_t tok = 0;
  for (const auto& p : pairs) {
    EncodedSource enc = m2.encode({p.source}, EvalContext::eval());
    Tensor lp = m2.per_token_log_probs(enc, {p.target}, EvalContext::eval());
    ll_sum += sum_all(lp).item();
    tok += p.counted_tokens();
  }
  CHECK(close_rel(e1.mean_per_token, ll_sum / tok, 1e-9));
}

TEST_CASE("lvm_test_ll: finite estimates, counted tokens, degenerate-q warning") {
  LvmModel m(tiny_config(), PriorKind::gaussian, 7);
  auto pairs = tiny_pairs();
  LLEstimate est = lvm_test_ll(m, pairs, 16, 99);
  CHECK(est.samples == 16);
  for (double v : est.per_sentence) CHECK(std::isfinite(v));
  CHECK(est.token_counts[0] == 4);  // 3 content + first EOS
  CHECK(est.token_counts[1] == 4);  // no EOS added: counted = raw
  CHECK(est.token_counts[2] == 3);  // 2 content + first EOS
  CHECK_FALSE(est.degenerate_q_warning);

  // rig the posterior head so sigma pins at the link floor
  LvmModel degen(tiny_config(), PriorKind::gaussian, 8);
  Tensor g = degen.params().get("post.out.g");
  std::fill(g.raw().begin(), g.raw().end(), 0.0);
  Tensor bias = degen.params().get("post.out.b");
  for (int64_t i = 4; i < 8; ++i) bias.raw()[i] = -30.0;  // sigma channels
  LLEstimate est2 = lvm_test_ll(degen, pairs, 4, 99);
  CHECK(est2.degenerate_q_warning);
}

TEST_CASE("pass counts: k+1 decoder passes for non-AR, >= T for AR greedy") {
  ModelConfig c = tiny_config();
  LvmModel lvm(c, PriorKind::gaussian, 9);
  std::vector<int64_t> src = {3, 4, 5, 6};
  for (int k : {0, 1, 4}) {
    GenSettings s;
    s.refine_steps = k;
    s.forced_length = 8;
    lvm.reset_pass_count();
    DecodeOutput out = generate(lvm, src, s);
    CHECK(out.decoder_passes == k + 1);
  }

  // AR model rigged so EOS never wins: greedy runs max_len steps
  ArModel ar(c, 10);
  Tensor b = ar.params().get("dec.out.b");
  b.raw()[kEosId] = -1e9;
  GenSettings s;
  s.beam_width = 1;
  DecodeOutput out = generate(ar, src, s);
  CHECK(static_cast<int64_t>(out.decoder_passes) >= c.max_len);
  CHECK_FALSE(out.finished);

  // doubling the latent length leaves the non-AR count fixed
  GenSettings s8, s16;
  s8.refine_steps = 0;
  s8.forced_length = 8;
  s16.refine_steps = 0;
  s16.forced_length = 16;
  lvm.reset_pass_count();
  generate(lvm, src, s8);
  const long passes8 = lvm.pass_count();
  lvm.reset_pass_count();
  generate(lvm, src, s16);
  CHECK(lvm.pass_count() == passes8);
}

TEST_CASE("speed benchmark runs, reports medians and pass counts") {
  ModelConfig c = tiny_config();
  LvmModel lvm(c, PriorKind::gaussian, 11);
  TokenRows inputs = {{3, 4, 5, 6}, {4, 5, 6, 3}};
  GenSettings s;
  s.refine_steps = 1;
  s.forced_length = 8;
  SpeedReport rep = speed_benchmark(lvm, inputs, s, 5);
  CHECK(rep.sentences_per_second > 0.0);
  CHECK(rep.sentences == 2);
  CHECK(rep.decoder_passes == 2 * 2);  // (k+1) per sentence
  CHECK(!rep.environment.empty());
}

TEST_CASE("export_latents writes 2n+1 tagged rows deterministically") {
  ModelConfig c = tiny_config();
  LvmModel lvm(c, PriorKind::gaussian, 13);
  SequencePair pair;
  pair.source = {3, 4, 5};
  pair.target = {4, 5, 6, 2};
  pair.raw_target_len = 3;
  const std::string path = "/tmp/seqdens_test_latents.tsv";
  export_latents(lvm, pair, 5, 42, path, 2);
  std::ifstream in(path);
  std::string line;
  int rows = 0, priors = 0, posts = 0, deltas = 0;
  std::string delta_line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    ++rows;
    if (line.rfind("prior", 0) == 0) ++priors;
    if (line.rfind("posterior", 0) == 0) ++posts;
    if (line.rfind("delta", 0) == 0) {
      ++deltas;
      delta_line = line;
    }
  }
  CHECK(rows == 11);
  CHECK(priors == 5);
  CHECK(posts == 5);
  CHECK(deltas == 1);

  export_latents(lvm, pair, 5, 42, path, 2);
  std::ifstream in2(path);
  std::string delta2;
  while (std::getline(in2, line))
    if (line.rfind("delta", 0) == 0) delta2 = line;
  CHECK(delta_line == delta2);
}

TEST_CASE("prior sample empirical mean approaches the prior mean") {
  ModelConfig c = tiny_config();
  LvmModel lvm(c, PriorKind::gaussian, 17);
  EncodedSource enc = lvm.encode({{3, 4, 5}}, EvalContext::eval());
  GaussianSequence p = lvm.prior().gaussian_params(enc, 4, EvalContext::eval());
  Rng rng(55);
  const int n = 4000;
  std::vector<double> acc(static_cast<size_t>(p.mu.size()), 0.0);
  for (int i = 0; i < n; ++i) {
    Tensor z = lvm.prior().sample(enc, 4, rng, EvalContext::eval());
    for (int64_t j = 0; j < z.size(); ++j) acc[j] += z.data()[j];
  }
  for (int64_t j = 0; j < p.mu.size(); ++j) {
    const double se = p.sigma.data()[j] / std::sqrt(static_cast<double>(n));
    CHECK(std::fabs(acc[j] / n - p.mu.data()[j]) <= 4.0 * se);
  }
}
