#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <map>

#include "seqdens/error.hpp"
#include "seqdens/inference.hpp"
#include "testutil.hpp"

using namespace seqdens;
using testutil::close;

namespace {

// Enumerable conditional table model over token ids {0, 1, EOS=2}.
class TableScorer : public ArStepScorer {
 public:
  TableScorer(int64_t vocab,
              std::function<std::vector<double>(const std::vector<int64_t>&)> fn)
      : vocab_(vocab), fn_(std::move(fn)) {}
  int64_t vocab() const override { return vocab_; }
  std::vector<std::vector<double>> step_log_probs(
      const TokenRows& prefixes) const override {
    std::vector<std::vector<double>> out;
    for (const auto& p : prefixes) {
      std::vector<double> probs = fn_(p);
      std::vector<double> lp(probs.size());
      for (size_t i = 0; i < probs.size(); ++i) lp[i] = std::log(probs[i]);
      out.push_back(std::move(lp));
    }
    return out;
  }

 private:
  int64_t vocab_;
  std::function<std::vector<double>(const std::vector<int64_t>&)> fn_;
};

// Exhaustive argmax over finished sequences of total length <= max_len.
std::pair<std::vector<int64_t>, double> enumerate_argmax(
    const ArStepScorer& scorer, int64_t max_len) {
  std::vector<int64_t> best_tokens;
  double best_score = -HUGE_VAL;
  const int64_t V = scorer.vocab();
  std::function<void(std::vector<int64_t>&, double)> recurse =
      [&](std::vector<int64_t>& prefix, double score) {
        if (static_cast<int64_t>(prefix.size()) >= max_len) return;
        auto lp = scorer.step_log_probs({prefix})[0];
        for (int64_t v = 0; v < V; ++v) {
          prefix.push_back(v);
          const double s = score + lp[v];
          if (v == kEosId) {
            if (s > best_score) {
              best_score = s;
              best_tokens = prefix;
            }
          } else {
            recurse(prefix, s);
          }
          prefix.pop_back();
        }
      };
  std::vector<int64_t> prefix;
  recurse(prefix, 0.0);
  return {best_tokens, best_score};
}

// A model where the greedy first step is a trap: token 0 looks best but
// leads to a weak continuation, token 1 finishes strongly.
TableScorer garden_path() {
  return TableScorer(3, [](const std::vector<int64_t>& p) -> std::vector<double> {
    if (p.empty()) return {0.50, 0.45, 0.05};
    if (p.back() == 0) return {0.45, 0.45, 0.10};
    return {0.05, 0.05, 0.90};
  });
}

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

}  // namespace

TEST_CASE("beam width 1 equals greedy decoding") {
  TableScorer model = garden_path();
  BeamResult beam1 = beam_search(model, 1, 3);
  // greedy by hand: step1 argmax = 0, then argmax of {0.45,0.45,0.10} is
  // token 0 (tie broken by lower id), then {0.45,.45,.1} again -> unfinished
  CHECK(beam1.best.tokens == std::vector<int64_t>{0, 0, 0});
  CHECK_FALSE(beam1.best.finished);

  // on a model whose greedy path finishes, width 1 returns it
  TableScorer finisher(3, [](const std::vector<int64_t>& p) -> std::vector<double> {
    if (p.empty()) return {0.6, 0.3, 0.1};
    return {0.1, 0.1, 0.8};
  });
  BeamResult g = beam_search(finisher, 1, 3);
  CHECK(g.best.finished);
  CHECK(g.best.tokens == std::vector<int64_t>{0, 2});
}

TEST_CASE("beam width 4 finds the exact argmax where greedy is suboptimal") {
  TableScorer model = garden_path();
  auto [best_tokens, best_score] = enumerate_argmax(model, 3);
  // the greedy trap: step-1 argmax (token 0) is not on the optimal path
  CHECK(best_tokens.front() == 1);
  BeamResult beam = beam_search(model, 4, 3);
  CHECK(beam.found_finished);
  CHECK(beam.best.tokens == best_tokens);
  CHECK(close(beam.best.log_prob, best_score, 1e-12));
}

TEST_CASE("beam score is monotone in width on enumerable models") {
  // deterministic sweep over random table models
  for (uint64_t seed = 0; seed < 40; ++seed) {
    Rng rng(seed);
    // conditional distributions keyed by (len, last token)
    std::map<std::pair<int, int64_t>, std::vector<double>> table;
    auto fn = [&table, &rng](const std::vector<int64_t>& p) {
      auto key = std::make_pair(static_cast<int>(p.size()),
                                p.empty() ? int64_t{-1} : p.back());
      auto it = table.find(key);
      if (it == table.end()) {
        std::vector<double> probs(3);
        double z = 0;
        for (auto& v : probs) {
          v = 0.05 + rng.uniform01();
          z += v;
        }
        for (auto& v : probs) v /= z;
        it = table.emplace(key, probs).first;
      }
      return it->second;
    };
    TableScorer model(3, fn);
    double prev = -HUGE_VAL;
    bool prev_finished = false;
    for (int width = 1; width <= 4; ++width) {
      BeamResult r = beam_search(model, width, 3);
      if (prev_finished && r.found_finished)
        CHECK(r.best.log_prob >= prev - 1e-12);
      if (r.found_finished) {
        prev = r.best.log_prob;
        prev_finished = true;
      }
    }
  }
}

TEST_CASE("beam score self-consistency against teacher-forced recomputation") {
  ModelConfig c = tiny_config();
  c.max_len = 8;
  ArModel m(c, 21);
  std::vector<int64_t> src = {3, 4, 5, 6};
  GenSettings s;
  s.beam_width = 4;
  DecodeOutput out = generate(m, src, s);
  // recompute the model's own log-prob of the returned sequence
  std::vector<int64_t> seq = out.tokens;
  if (out.finished) seq.push_back(kEosId);
  EncodedSource enc = m.encode({src}, EvalContext::eval());
  Tensor lp = m.per_token_log_probs(enc, {seq}, EvalContext::eval());
  CHECK(std::fabs(sum_all(lp).item() - out.score) < 1e-9);
}

TEST_CASE("init_delta_posterior is the prior mean and deterministic") {
  ModelConfig c = tiny_config();
  LvmModel m(c, PriorKind::gaussian, 23);
  EncodedSource enc = m.encode({{3, 4, 5}}, EvalContext::eval());
  Tensor mu1 = init_delta_posterior(m, enc, 8);
  Tensor mu2 = init_delta_posterior(m, enc, 8);
  GaussianSequence p = m.prior().gaussian_params(enc, 8, EvalContext::eval());
  for (int64_t i = 0; i < mu1.size(); ++i) {
    CHECK(mu1.data()[i] == mu2.data()[i]);
    CHECK(mu1.data()[i] == p.mu.data()[i]);
  }
}

TEST_CASE("refinement trace: length k+1, finite proxies, fixed-point equality") {
  ModelConfig c = tiny_config();
  LvmModel m(c, PriorKind::gaussian, 29);
  std::vector<int64_t> src = {3, 4, 5, 6};
  IterativeResult r8 = iterative_inference(m, src, 8, 8);
  CHECK(r8.trace.steps.size() == 9);
  for (const auto& step : r8.trace.steps) {
    CHECK(std::isfinite(step.proxy));
    CHECK(std::isfinite(step.elbo));
  }
  // early exit never changes the final output
  if (r8.trace.fixed_point_step >= 0 && r8.trace.fixed_point_step <= 2) {
    IterativeResult r2 = iterative_inference(m, src, 2, 8);
    CHECK(r2.tokens == r8.tokens);
  }
  // k = 0 decodes at the initialization
  IterativeResult r0 = iterative_inference(m, src, 0, 8);
  CHECK(r0.trace.steps.size() == 1);
  CHECK(r0.tokens == r8.trace.steps[0].tokens);
  // determinism end to end
  IterativeResult again = iterative_inference(m, src, 8, 8);
  CHECK(again.tokens == r8.tokens);
}

TEST_CASE("decoder that ignores z converges in exactly one step") {
  ModelConfig c = tiny_config();
  LvmModel m(c, PriorKind::gaussian, 31);
  Tensor zw = m.params().get("dec.z_proj.w");
  std::fill(zw.raw().begin(), zw.raw().end(), 0.0);
  Tensor zb = m.params().get("dec.z_proj.b");
  std::fill(zb.raw().begin(), zb.raw().end(), 0.0);
  IterativeResult res = iterative_inference(m, {3, 4, 5, 6}, 4, 8);
  CHECK(res.trace.fixed_point_step == 1);
}

TEST_CASE("argmax stage is exactly optimal for the factorized decoder") {
  // enumerate all V^T sequences at V=4 (content ids 0..3), T=4
  ModelConfig c = tiny_config();
  c.vocab_size = 4;
  LvmModel m(c, PriorKind::gaussian, 37);
  EncodedSource enc = m.encode({{3, 3, 2, 3}}, EvalContext::eval());
  Tensor mu = init_delta_posterior(m, enc, 4);
  Tensor logits = m.decode_logits(enc, mu, EvalContext::eval());
  Tensor lp = log_softmax(logits, -1);
  // returned argmax decode
  auto [mu2, y] = refine_step(m, enc, mu, {0, 0, 0, 0});
  (void)mu2;
  // recompute the argmax at mu directly for the enumeration base
  std::vector<int64_t> argmax(4);
  for (int64_t t = 0; t < 4; ++t) {
    int64_t best = 0;
    for (int64_t v = 1; v < 4; ++v)
      if (lp.at({0, t, v}) > lp.at({0, t, best})) best = v;
    argmax[t] = best;
  }
  double best_total = -HUGE_VAL;
  std::vector<int64_t> best_seq(4);
  for (int64_t a = 0; a < 4; ++a)
    for (int64_t b = 0; b < 4; ++b)
      for (int64_t cc = 0; cc < 4; ++cc)
        for (int64_t d = 0; d < 4; ++d) {
          const double total = lp.at({0, 0, a}) + lp.at({0, 1, b}) +
                               lp.at({0, 2, cc}) + lp.at({0, 3, d});
          if (total > best_total) {
            best_total = total;
            best_seq = {a, b, cc, d};
          }
        }
  CHECK(argmax == best_seq);
  double argmax_total = 0;
  for (int64_t t = 0; t < 4; ++t) argmax_total += lp.at({0, t, argmax[t]});
  CHECK(close(argmax_total, best_total, 1e-12));
}

TEST_CASE("sample_candidates: determinism and AR distinctness") {
  ModelConfig c = tiny_config();
  c.max_len = 8;
  LvmModel lvm(c, PriorKind::gaussian, 41);
  std::vector<int64_t> src = {3, 4, 5, 6};
  auto a = sample_candidates(lvm, src, 5, 99, 1);
  auto b = sample_candidates(lvm, src, 5, 99, 1);
  CHECK(a == b);
  CHECK(a.size() == 5);
  auto other = sample_candidates(lvm, src, 5, 100, 1);
  CHECK(other.size() == 5);

  ArModel ar(c, 43);
  auto cands = sample_candidates(ar, src, 4, 7, 0);
  CHECK(cands.size() >= 1);
  CHECK(cands.size() <= 4);
  for (size_t i = 0; i < cands.size(); ++i)
    for (size_t j = i + 1; j < cands.size(); ++j) CHECK(cands[i] != cands[j]);

  CHECK_THROWS_AS(sample_candidates(ar, src, 1, 7, 0), Error);
}

TEST_CASE("iterative inference validates the latent length") {
  ModelConfig c = tiny_config();
  LvmModel m(c, PriorKind::gaussian, 47);
  CHECK_THROWS_AS(iterative_inference(m, {3, 4, 5}, 1, 6), LengthError);
}
