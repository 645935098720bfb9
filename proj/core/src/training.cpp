#include "seqdens/training.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "seqdens/error.hpp"
#include "seqdens/autodiff.hpp"
#include "seqdens/metrics.hpp"

namespace seqdens {

double kl_weight(int64_t step, int64_t warm_steps, int64_t ramp_steps) {
  if (step < 0) throw Error("kl_weight: negative step");
  if (step <= warm_steps) return 0.0;
  if (ramp_steps <= 0) return 1.0;
  const double t = static_cast<double>(step - warm_steps) /
                   static_cast<double>(ramp_steps);
  return std::min(1.0, t);
}

double lr_schedule(int64_t step, int64_t d_model, int64_t warmup) {
  if (warmup < 1) throw Error("lr_schedule: warmup must be >= 1");
  const double s = static_cast<double>(std::max<int64_t>(step, 1));
  const double w = static_cast<double>(warmup);
  return std::pow(static_cast<double>(d_model), -0.5) *
         std::min(1.0 / std::sqrt(s), s * std::pow(w, -1.5));
}

double clip_gradients(ParamRegistry& reg, double max_norm) {
  double sq = 0;
  for (const auto& [name, t] : reg.items())
    for (double g : t.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) return norm;
  if (norm > max_norm && norm > 0) {
    const double scale = max_norm / norm;
    for (auto& [name, t] : reg.items()) {
      Tensor p = t;
      auto node = p.node();
      for (auto& g : node->grad) g *= scale;
    }
  }
  return norm;
}

AdamOptimizer::AdamOptimizer(ParamRegistry& reg, double beta1, double beta2,
                             double eps)
    : reg_(reg), beta1_(beta1), beta2_(beta2), eps_(eps) {
  const size_t n = static_cast<size_t>(reg.total_size());
  m_.assign(n, 0.0);
  v_.assign(n, 0.0);
}

bool AdamOptimizer::step(double lr, double* pre_clip_norm) {
  const double norm = clip_gradients(reg_, 1.0);
  if (pre_clip_norm) *pre_clip_norm = norm;
  if (!std::isfinite(norm)) return false;  // skip-and-report policy
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  size_t off = 0;
  for (auto& [name, t] : reg_.items()) {
    Tensor p = t;
    auto node = p.node();
    node->ensure_grad();
    const size_t n = node->value.size();
    for (size_t i = 0; i < n; ++i) {
      const double g = node->grad[i];
      m_[off + i] = beta1_ * m_[off + i] + (1 - beta1_) * g;
      v_[off + i] = beta2_ * v_[off + i] + (1 - beta2_) * g * g;
      const double mhat = m_[off + i] / bc1;
      const double vhat = v_[off + i] / bc2;
      node->value[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
    off += n;
  }
  return true;
}

Tensor ar_loss(const ArModel& model, const TokenRows& src, const TokenRows& tgt,
               const EvalContext& ctx) {
  EncodedSource enc = model.encode(src, ctx);
  return neg(mean_all(model.per_token_log_probs(enc, tgt, ctx)));
}

ELBOBreakdown elbo_loss(const LvmModel& model, const TokenRows& src,
                        const TokenRows& tgt,
                        const std::vector<int64_t>& src_lens,
                        const std::vector<int64_t>& padded_lens, double beta,
                        double alpha, Rng& sample_rng, const EvalContext& ctx) {
  if (beta < 0.0 || beta > 1.0) throw Error("elbo_loss: beta must be in [0,1]");
  const int64_t B = static_cast<int64_t>(tgt.size());
  const int64_t T = static_cast<int64_t>(tgt[0].size());
  const double token_count = static_cast<double>(B * T);

  EncodedSource enc = model.encode(src, ctx);
  GaussianSequence q = model.posterior_params(enc, tgt, ctx);
  Tensor eps = Tensor::randn({B, T, model.config().d_latent}, sample_rng);
  Tensor z = gaussian_sample(q, eps);

  // reconstruction: one-sample estimate of E_q[log p(y|z,x)]
  Tensor logits = model.decode_logits(enc, z, ctx);
  std::vector<int64_t> flat;
  flat.reserve(static_cast<size_t>(B * T));
  for (const auto& row : tgt) flat.insert(flat.end(), row.begin(), row.end());
  Tensor recon = mul_scalar(sum_all(gather_last(log_softmax(logits, -1), flat)),
                            1.0 / token_count);

  // KL[q || p]: analytic for the Gaussian prior, single-sample estimator
  // log q(z) - log p(z) for the flow prior.
  Tensor kl;
  if (model.prior_kind() == PriorKind::gaussian) {
    GaussianSequence p = model.prior().gaussian_params(enc, T, ctx);
    kl = mul_scalar(sum_all(gaussian_kl(q, p)), 1.0 / token_count);
  } else {
    Tensor qz = gaussian_log_density(q, z);
    Tensor pz = model.prior().log_density(enc, z, ctx);
    kl = mul_scalar(sum_all(sub(qz, pz)), 1.0 / token_count);
  }

  Tensor alpha_reg =
      mul_scalar(sum_all(gaussian_kl_to_standard(q)), 1.0 / token_count);

  // joint length loss: cross-entropy of the true padded-length offset
  LengthDistribution dist = model.length_dist(enc, ctx);
  std::vector<int64_t> classes(static_cast<size_t>(B));
  for (int64_t b = 0; b < B; ++b) {
    int64_t offset = padded_lens[b] - src_lens[b];
    offset = std::clamp<int64_t>(offset, -kLengthOffsetRange, kLengthOffsetRange);
    classes[b] = offset + kLengthOffsetRange;
  }
  Tensor length_ce = cross_entropy(dist.logits, classes);

  ELBOBreakdown out;
  out.kl_weight = beta;
  out.reconstruction = recon.item();
  out.kl = kl.item();
  out.alpha_reg = alpha_reg.item();
  out.length_loss = length_ce.item();
  out.total_tensor = add(add(neg(sub(recon, mul_scalar(kl, beta))),
                             mul_scalar(alpha_reg, alpha)),
                         length_ce);
  out.total = out.total_tensor.item();
  if (!std::isfinite(out.total)) {
    std::ostringstream os;
    os << "non-finite ELBO loss: reconstruction=" << out.reconstruction
       << " kl=" << out.kl << " alpha_reg=" << out.alpha_reg
       << " length_loss=" << out.length_loss;
    throw NumericalError(os.str());
  }
  return out;
}

namespace {

// Greedy AR decode / one-step refined LVM decode of a dev subset, scored by
// corpus BLEU against the dev targets.
double dev_bleu(DensityEstimator& model, const std::vector<SequencePair>& dev,
                int64_t max_sentences) {
  NoGradGuard ng;
  std::vector<std::vector<int64_t>> hyps;
  std::vector<std::vector<std::vector<int64_t>>> refs;
  const int64_t n =
      std::min<int64_t>(max_sentences, static_cast<int64_t>(dev.size()));
  GenSettings settings;
  settings.beam_width = 1;
  settings.refine_steps = 1;
  for (int64_t i = 0; i < n; ++i) {
    DecodeOutput out = generate(model, dev[i].source, settings);
    hyps.push_back(out.tokens);
    std::vector<int64_t> ref_content(
        dev[i].target.begin(), dev[i].target.begin() + dev[i].raw_target_len);
    refs.push_back({ref_content});
  }
  try {
    return bleu(hyps, refs);
  } catch (const NumericalError&) {
    return 0.0;  // e.g. all-empty hypotheses early in training
  }
}

double dev_ll(DensityEstimator& model, const std::vector<SequencePair>& dev,
              int64_t max_sentences, int64_t is_samples, uint64_t seed) {
  std::vector<SequencePair> subset(
      dev.begin(),
      dev.begin() + std::min<size_t>(dev.size(),
                                     static_cast<size_t>(max_sentences)));
  if (auto* ar = dynamic_cast<ArModel*>(&model))
    return ar_test_ll(*ar, subset).mean_per_token;
  auto* lvm = dynamic_cast<LvmModel*>(&model);
  return lvm_test_ll(*lvm, subset, is_samples, seed).mean_per_token;
}

}  // namespace

TrainResult train(DensityEstimator& model, const Dataset& data,
                  const TrainSchedule& sched, uint64_t seed,
                  const std::function<void(const EvalRecord&)>& on_eval) {
  TrainResult result;
  AdamOptimizer opt(model.params());
  Rng rng(seed);
  Rng dropout_rng = rng.split();
  Rng sample_rng = rng.split();
  auto* lvm = dynamic_cast<LvmModel*>(&model);
  auto* ar = dynamic_cast<ArModel*>(&model);

  int64_t step = 0;
  int64_t epoch = 0;
  int consecutive_bad = 0;
  int evals_since_best = 0;
  double last_loss = 0;
  ELBOBreakdown last_breakdown;

  while (step < sched.steps) {
    auto batches = epoch_batches(data.train, sched.batch_size, seed, epoch++);
    for (const auto& idx : batches) {
      if (step >= sched.steps) break;
      ++step;
      TokenRows src = batch_sources(data.train, idx);
      TokenRows tgt = batch_targets(data.train, idx);
      const double beta = kl_weight(step, sched.kl_warm_steps, sched.kl_ramp_steps);

      // Data-dependent actnorm initialization at the start of KL annealing.
      if (lvm && lvm->prior_kind() == PriorKind::flow &&
          !lvm->prior().flow.actnorm_initialized() &&
          step >= sched.kl_warm_steps && src.size() >= 2) {
        NoGradGuard ng;
        EncodedSource enc = lvm->encode(src, EvalContext::eval());
        GaussianSequence q = lvm->posterior_params(enc, tgt, EvalContext::eval());
        Tensor eps = Tensor::randn(q.mu.shape(), sample_rng);
        lvm->prior().flow.actnorm_init(enc, gaussian_sample(q, eps),
                                       EvalContext::eval());
      }

      EvalContext ctx = sched.dropout > 0
                            ? EvalContext::train(sched.dropout, dropout_rng)
                            : EvalContext{true, 0.0, nullptr};
      model.params().zero_grads();
      Tensor loss;
      try {
        if (ar) {
          std::vector<int64_t> dummy;
          loss = ar_loss(*ar, src, tgt, ctx);
          last_breakdown = ELBOBreakdown{};
        } else {
          std::vector<int64_t> src_lens, padded_lens;
          for (size_t k = 0; k < idx.size(); ++k) {
            src_lens.push_back(
                static_cast<int64_t>(data.train[idx[k]].source.size()));
            padded_lens.push_back(data.train[idx[k]].padded_target_len());
          }
          last_breakdown = elbo_loss(*lvm, src, tgt, src_lens, padded_lens, beta,
                                     sched.alpha, sample_rng, ctx);
          loss = last_breakdown.total_tensor;
        }
      } catch (const NumericalError& e) {
        if (++consecutive_bad >= sched.divergence_limit) {
          result.aborted = true;
          result.abort_reason = std::string("diverged: ") + e.what();
          return result;
        }
        continue;
      }
      last_loss = loss.item();
      if (!std::isfinite(last_loss)) {
        if (++consecutive_bad >= sched.divergence_limit) {
          result.aborted = true;
          result.abort_reason = "diverged: non-finite loss";
          return result;
        }
        continue;
      }
      consecutive_bad = 0;
      backward(loss);
      const double lr = lr_schedule(step, model.config().d_model, sched.warmup);
      if (!opt.step(lr)) ++result.skipped_updates;

      if (step % sched.eval_every == 0 || step == sched.steps) {
        EvalRecord rec;
        rec.step = step;
        rec.train_loss = last_loss;
        rec.reconstruction = last_breakdown.reconstruction;
        rec.kl = last_breakdown.kl;
        rec.alpha_reg = last_breakdown.alpha_reg;
        rec.length_loss = last_breakdown.length_loss;
        rec.beta = beta;
        rec.lr = lr;
        rec.dev_ll = dev_ll(model, data.dev, sched.max_eval_sentences,
                            sched.dev_is_samples, seed ^ 0xD5F0E11ull);
        rec.dev_bleu = dev_bleu(model, data.dev, sched.max_eval_sentences);
        result.records.push_back(rec);
        if (on_eval) on_eval(rec);
        if (rec.dev_bleu > result.best_dev_bleu) {
          result.best_dev_bleu = rec.dev_bleu;
          result.best_step = step;
          evals_since_best = 0;
        } else if (++evals_since_best >= sched.patience) {
          return result;  // early stopping on dev BLEU
        }
      }
    }
  }
  return result;
}

DistillStats distill_dataset(DensityEstimator& teacher, Dataset* data,
                             int beam_width) {
  DistillStats stats;
  stats.total = static_cast<int64_t>(data->train.size());
  GenSettings settings;
  settings.beam_width = beam_width;
  for (auto& pair : data->train) {
    DecodeOutput out = generate(teacher, pair.source, settings);
    if (!out.finished || out.tokens.empty()) {
      ++stats.kept_original;
      continue;
    }
    pair.target = out.tokens;
    pair.raw_target_len = static_cast<int64_t>(out.tokens.size());
    const int64_t padded = pad_to_multiple_of_4(pair.raw_target_len);
    while (static_cast<int64_t>(pair.target.size()) < padded)
      pair.target.push_back(kEosId);
    ++stats.replaced;
  }
  return stats;
}

}  // namespace seqdens
