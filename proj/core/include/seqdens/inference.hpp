#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "seqdens/estimators.hpp"

namespace seqdens {

struct BeamHypothesis {
  std::vector<int64_t> tokens;  // emitted tokens, EOS included when finished
  double log_prob = 0.0;
  bool finished = false;
};

// Next-token scorer abstraction; lets enumerable hand-built table models
// drive the same search code as the transformer.
class ArStepScorer {
 public:
  virtual ~ArStepScorer() = default;
  virtual int64_t vocab() const = 0;
  // log p(next token | prefix) for each prefix row: (n_prefixes, V).
  virtual std::vector<std::vector<double>> step_log_probs(
      const TokenRows& prefixes) const = 0;
};

// Wraps an AR model and a single encoded source (batch of prefixes runs as
// one decoder pass per step).
class ModelStepScorer : public ArStepScorer {
 public:
  ModelStepScorer(const ArModel& model, const EncodedSource& src);
  int64_t vocab() const override;
  std::vector<std::vector<double>> step_log_probs(
      const TokenRows& prefixes) const override;

 private:
  const ArModel& model_;
  const EncodedSource& src_;
};

struct BeamResult {
  BeamHypothesis best;
  std::vector<BeamHypothesis> finished;  // every finished hypothesis seen
  bool found_finished = false;
};

// Pure sum of log-probs, no length normalization. Ties break toward the
// lower token id, then the earlier hypothesis. When nothing finishes within
// max_len the best unfinished hypothesis is returned, flagged.
BeamResult beam_search(const ArStepScorer& scorer, int width, int64_t max_len);

struct RefinementStep {
  Tensor mu;                    // (1, T, d_latent)
  std::vector<int64_t> tokens;  // per-position argmax decode at mu
  double proxy = 0.0;           // log p(y|mu,x) + log p(mu|x)
  double elbo = 0.0;            // deterministic per-token point estimate
};

struct RefinementTrace {
  std::vector<RefinementStep> steps;  // index 0 = initialization
  int fixed_point_step = -1;          // first step with no change, or -1
};

// mu = prior mean (Gaussian: mu_theta; flow: f^{-1}(0; x)).
Tensor init_delta_posterior(const LvmModel& model, const EncodedSource& src,
                            int64_t T);

// One EM alternation: mu' = posterior mean at y; y' = per-position argmax
// of the decoder logits at mu'.
std::pair<Tensor, std::vector<int64_t>> refine_step(
    const LvmModel& model, const EncodedSource& src, const Tensor& mu,
    const std::vector<int64_t>& y);

struct IterativeResult {
  std::vector<int64_t> tokens;  // final padded-length decode
  RefinementTrace trace;
};

// k refinement steps from the prior-mean initialization. forced_length < 0
// means the length predictor chooses T. Deterministic given params and src.
IterativeResult iterative_inference(const LvmModel& model,
                                    const std::vector<int64_t>& src, int k,
                                    int64_t forced_length = -1);

// n candidate outputs: AR = width-n beam candidates; LVM = n prior samples,
// each refined k steps. Order is deterministic given the seed.
std::vector<std::vector<int64_t>> sample_candidates(DensityEstimator& model,
                                                    const std::vector<int64_t>& src,
                                                    int n, uint64_t seed, int k);

struct GenSettings {
  int beam_width = 4;
  int refine_steps = 1;
  int64_t forced_length = -1;
  uint64_t seed = 0;
};

struct DecodeOutput {
  std::vector<int64_t> tokens;  // content tokens, EOS and padding stripped
  double score = 0.0;
  bool finished = true;
  long decoder_passes = 0;
  double seconds = 0.0;
  int fixed_point_step = -1;
};

DecodeOutput generate(DensityEstimator& model, const std::vector<int64_t>& src,
                      const GenSettings& settings);

// Tokens up to (excluding) the first EOS.
std::vector<int64_t> strip_content(const std::vector<int64_t>& tokens);

}  // namespace seqdens
