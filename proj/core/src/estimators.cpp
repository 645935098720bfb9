#include "seqdens/estimators.hpp"

#include "seqdens/error.hpp"

namespace seqdens {

ArModel::ArModel(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  encoder = SourceEncoder(reg_, "enc", cfg_, rng);
  decoder = ArDecoder(reg_, "dec", cfg_, rng);
}

EncodedSource ArModel::encode(const TokenRows& src, const EvalContext& ctx) const {
  return encoder.encode(src, ctx);
}

Tensor ArModel::forward_logits(const EncodedSource& src, const TokenRows& inputs,
                               const EvalContext& ctx) const {
  decoder_passes_.fetch_add(1, std::memory_order_relaxed);
  return decoder.forward(src, inputs, ctx);
}

TokenRows ArModel::shift_with_bos(const TokenRows& targets) {
  TokenRows shifted;
  shifted.reserve(targets.size());
  for (const auto& row : targets) {
    std::vector<int64_t> in;
    in.reserve(row.size());
    in.push_back(kBosId);
    in.insert(in.end(), row.begin(), row.end() - (row.empty() ? 0 : 1));
    shifted.push_back(std::move(in));
  }
  return shifted;
}

Tensor ArModel::per_token_log_probs(const EncodedSource& src,
                                    const TokenRows& targets,
                                    const EvalContext& ctx) const {
  Tensor logits = forward_logits(src, shift_with_bos(targets), ctx);
  std::vector<int64_t> flat;
  for (const auto& row : targets) flat.insert(flat.end(), row.begin(), row.end());
  return gather_last(log_softmax(logits, -1), flat);
}

LvmModel::LvmModel(ModelConfig cfg, PriorKind kind, uint64_t seed)
    : cfg_(std::move(cfg)), kind_(kind) {
  cfg_.validate();
  Rng rng(seed);
  encoder = SourceEncoder(reg_, "enc", cfg_, rng);
  decoder = NarDecoder(reg_, "dec", cfg_, rng);
  posterior = PosteriorNet(reg_, "post", cfg_, rng);
  length_pred = LengthPredictor(reg_, "len", cfg_, rng);
  prior_.kind = kind;
  if (kind == PriorKind::gaussian)
    prior_.gauss = GaussianPriorNet(reg_, "prior", cfg_, rng);
  else
    prior_.flow = FlowStack(reg_, "prior", cfg_, rng);
}

EncodedSource LvmModel::encode(const TokenRows& src, const EvalContext& ctx) const {
  return encoder.encode(src, ctx);
}

Tensor LvmModel::decode_logits(const EncodedSource& src, const Tensor& z,
                               const EvalContext& ctx) const {
  decoder_passes_.fetch_add(1, std::memory_order_relaxed);
  return decoder.forward(src, z, ctx);
}

GaussianSequence LvmModel::posterior_params(const EncodedSource& src,
                                            const TokenRows& tgt,
                                            const EvalContext& ctx) const {
  return posterior.forward(src, tgt, ctx);
}

LengthDistribution LvmModel::length_dist(const EncodedSource& src,
                                         const EvalContext& ctx) const {
  return length_pred.forward(src, ctx);
}

}  // namespace seqdens
