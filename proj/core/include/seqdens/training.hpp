#pragma once

#include <functional>
#include <string>
#include <vector>

#include "seqdens/data.hpp"
#include "seqdens/estimators.hpp"
#include "seqdens/inference.hpp"

namespace seqdens {

// One evaluated ELBO with its term breakdown. Reconstruction, kl and
// alpha_reg are per-token means over the batch; length_loss is a per-
// sequence mean. total = -(reconstruction - beta*kl) + alpha*alpha_reg +
// length_loss, and total_tensor is the differentiable version of it.
struct ELBOBreakdown {
  double reconstruction = 0.0;
  double kl = 0.0;
  double alpha_reg = 0.0;
  double length_loss = 0.0;
  double kl_weight = 0.0;
  double total = 0.0;
  Tensor total_tensor;
};

// 0 before warm, linear to 1 over the next ramp steps, 1 afterwards.
double kl_weight(int64_t step, int64_t warm_steps, int64_t ramp_steps);

// d_model^-0.5 * min(step^-0.5, step * warmup^-1.5); step 0 counts as 1.
double lr_schedule(int64_t step, int64_t d_model, int64_t warmup);

// Scales gradients so the global norm is at most max_norm; returns the
// pre-clip norm.
double clip_gradients(ParamRegistry& reg, double max_norm);

// Adam with bias correction. step() clips the global gradient norm to 1.0
// first; non-finite gradients skip the update and return false.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(ParamRegistry& reg, double beta1 = 0.9,
                         double beta2 = 0.98, double eps = 1e-9);
  bool step(double lr, double* pre_clip_norm = nullptr);
  int64_t step_count() const { return t_; }

  // checkpoint access
  std::vector<double>& first_moment() { return m_; }
  std::vector<double>& second_moment() { return v_; }
  void set_step_count(int64_t t) { t_ = t; }

 private:
  ParamRegistry& reg_;
  double beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<double> m_, v_;
};

// Mean per-token negative log-likelihood of the teacher-forced batch.
Tensor ar_loss(const ArModel& model, const TokenRows& src, const TokenRows& tgt,
               const EvalContext& ctx);

// Negative ELBO with KL annealing weight beta, the alpha-regularizer toward
// N(0, I), and the joint length loss. One reparameterized posterior sample,
// drawn from sample_rng.
ELBOBreakdown elbo_loss(const LvmModel& model, const TokenRows& src,
                        const TokenRows& tgt,
                        const std::vector<int64_t>& src_lens,
                        const std::vector<int64_t>& padded_lens, double beta,
                        double alpha, Rng& sample_rng, const EvalContext& ctx);

struct TrainSchedule {
  int64_t steps = 2000;
  int64_t batch_size = 64;
  int64_t kl_warm_steps = 500;
  int64_t kl_ramp_steps = 2000;
  int64_t warmup = 1000;
  double alpha = 1e-4;
  double dropout = 0.1;
  int64_t eval_every = 200;
  int patience = 10;             // early-stopping patience, in evaluations
  int64_t dev_is_samples = 32;   // IS samples for dev LL during training
  int64_t max_eval_sentences = 200;
  int divergence_limit = 5;      // consecutive non-finite losses before abort
};

struct EvalRecord {
  int64_t step = 0;
  double train_loss = 0.0;
  double reconstruction = 0.0;
  double kl = 0.0;
  double alpha_reg = 0.0;
  double length_loss = 0.0;
  double dev_ll = 0.0;
  double dev_bleu = 0.0;
  double beta = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<EvalRecord> records;
  int64_t best_step = 0;
  double best_dev_bleu = -1.0;
  bool aborted = false;
  std::string abort_reason;
  int64_t skipped_updates = 0;
};

// Full training loop: bucketed batches, Adam with the transformer schedule,
// KL annealing for latent models, actnorm initialization at the annealing
// start for the flow prior, periodic dev evaluation and early stopping on
// dev BLEU. on_eval fires after each evaluation (checkpointing hook).
TrainResult train(DensityEstimator& model, const Dataset& data,
                  const TrainSchedule& sched, uint64_t seed,
                  const std::function<void(const EvalRecord&)>& on_eval = {});

struct DistillStats {
  int64_t total = 0;
  int64_t replaced = 0;
  int64_t kept_original = 0;  // decode failures
};

// Replaces the training targets by the teacher's beam decodes, re-padded
// per the data rules. Failures (no finished hypothesis or empty output)
// keep the original pair and are counted.
DistillStats distill_dataset(DensityEstimator& teacher, Dataset* data,
                             int beam_width = 4);

}  // namespace seqdens
