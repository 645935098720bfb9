#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <string>

#include "seqdens/models.hpp"
#include "seqdens/priors.hpp"

namespace seqdens {

// Trained-model handle: one of the three families. Exposes the pieces the
// training, inference and evaluation layers need, plus a sequential
// decoder-pass counter for the hardware-independent speed contract.
class DensityEstimator {
 public:
  virtual ~DensityEstimator() = default;
  virtual std::string family() const = 0;  // "ar" | "gauss" | "flow"
  virtual const ModelConfig& config() const = 0;
  virtual ParamRegistry& params() = 0;
  virtual const ParamRegistry& params() const = 0;

  int64_t count_params() const { return params().total_size(); }

  void reset_pass_count() const { decoder_passes_.store(0); }
  long pass_count() const { return decoder_passes_.load(); }

 protected:
  mutable std::atomic<long> decoder_passes_{0};
};

class ArModel : public DensityEstimator {
 public:
  ArModel(ModelConfig cfg, uint64_t seed);

  std::string family() const override { return "ar"; }
  const ModelConfig& config() const override { return cfg_; }
  ParamRegistry& params() override { return reg_; }
  const ParamRegistry& params() const override { return reg_; }

  EncodedSource encode(const TokenRows& src, const EvalContext& ctx) const;
  // Decoder logits over BOS-shifted inputs; one sequential pass per call.
  Tensor forward_logits(const EncodedSource& src, const TokenRows& inputs,
                        const EvalContext& ctx) const;
  // log p(y_t | y_<t, x) for every position: (B, T).
  Tensor per_token_log_probs(const EncodedSource& src, const TokenRows& targets,
                             const EvalContext& ctx) const;

  static TokenRows shift_with_bos(const TokenRows& targets);

  SourceEncoder encoder;
  ArDecoder decoder;

 private:
  ModelConfig cfg_;
  ParamRegistry reg_;
};

class LvmModel : public DensityEstimator {
 public:
  LvmModel(ModelConfig cfg, PriorKind kind, uint64_t seed);

  std::string family() const override {
    return kind_ == PriorKind::gaussian ? "gauss" : "flow";
  }
  const ModelConfig& config() const override { return cfg_; }
  ParamRegistry& params() override { return reg_; }
  const ParamRegistry& params() const override { return reg_; }
  PriorKind prior_kind() const { return kind_; }

  EncodedSource encode(const TokenRows& src, const EvalContext& ctx) const;
  // All positions in one parallel pass; one sequential pass per call.
  Tensor decode_logits(const EncodedSource& src, const Tensor& z,
                       const EvalContext& ctx) const;
  GaussianSequence posterior_params(const EncodedSource& src, const TokenRows& tgt,
                                    const EvalContext& ctx) const;
  LengthDistribution length_dist(const EncodedSource& src,
                                 const EvalContext& ctx) const;

  Prior& prior() { return prior_; }
  const Prior& prior() const { return prior_; }

  SourceEncoder encoder;
  NarDecoder decoder;
  PosteriorNet posterior;
  LengthPredictor length_pred;

 private:
  ModelConfig cfg_;
  PriorKind kind_;
  ParamRegistry reg_;
  Prior prior_;
};

}  // namespace seqdens
