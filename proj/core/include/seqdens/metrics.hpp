#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "seqdens/data.hpp"
#include "seqdens/estimators.hpp"
#include "seqdens/inference.hpp"

namespace seqdens {

struct LLEstimate {
  std::vector<double> per_sentence;   // log-marginal estimate per sentence
  std::vector<int64_t> token_counts;  // counted tokens per sentence
  int64_t samples = 1;
  bool per_token = true;
  double mean_per_token = 0.0;  // sum(estimates) / sum(tokens)
  double std_error = 0.0;       // SE of the per-sentence per-token values
  bool degenerate_q_warning = false;
};

// Exact held-out log-likelihood for the autoregressive family.
LLEstimate ar_test_ll(const ArModel& model,
                      const std::vector<SequencePair>& pairs);

// Importance-sampled marginal log-likelihood, S posterior samples per
// sentence, ground-truth (padded) target length, all in log space.
LLEstimate lvm_test_ll(const LvmModel& model,
                       const std::vector<SequencePair>& pairs, int64_t S,
                       uint64_t seed);

// log(1/S * sum_s exp(log_joint_s - log_q_s)) via log-sum-exp. The generic
// core shared by lvm_test_ll and the analytic-oracle tests.
double importance_sample_ll(std::span<const double> log_joint,
                            std::span<const double> log_q);

// Corpus BLEU in [0, 100], up to 4-grams, multi-reference clipping, brevity
// penalty against the closest reference length. Smoothing: add-one on the
// n > 1 precisions; the unigram precision is unsmoothed, so disjoint
// vocabularies score exactly 0.
double bleu(const std::vector<std::vector<int64_t>>& hypotheses,
            const std::vector<std::vector<std::vector<int64_t>>>& references);

// Mean over ordered candidate pairs (i != j) of bleu(c_i vs c_j), computed
// per source and averaged. Lower means more diverse.
double pairwise_bleu(
    const std::vector<std::vector<std::vector<int64_t>>>& candidate_sets);

double pearson(std::span<const double> xs, std::span<const double> ys);
double spearman(std::span<const double> xs, std::span<const double> ys);

struct CorrelationRow {
  std::string group;
  int n = 0;
  double r = 0.0;
  double rho = 0.0;
  bool skipped = false;
  std::string note;
};

struct CorrelationSeries {
  std::string group;                  // e.g. "ar/raw" or a model id
  std::vector<double> log_likelihood;
  std::vector<double> bleu_score;
};

// r and rho per series; series with < 3 points or zero variance are
// reported as skipped. Sign disagreements between the LL ranking and the
// BLEU ranking are flagged in the notes of an extra summary row when the
// grouping spans families.
std::vector<CorrelationRow> correlation_report(
    const std::vector<CorrelationSeries>& series, bool across_families);

struct SpeedReport {
  double sentences_per_second = 0.0;
  long decoder_passes = 0;
  int64_t sentences = 0;
  int repetitions = 0;
  std::string environment;
};

// Batch-1 generation speed: median over >= 5 repetitions, warmup excluded,
// timed section single-threaded.
SpeedReport speed_benchmark(DensityEstimator& model, const TokenRows& inputs,
                            const GenSettings& settings, int repetitions = 5);

// Latent sample export for external projection: n prior samples, n
// posterior samples, and the single delta-posterior mean row (2n+1 rows).
void export_latents(const LvmModel& model, const SequencePair& pair, int n,
                    uint64_t seed, const std::string& path, int refine_k = 8);

}  // namespace seqdens
