#pragma once

#include <atomic>
#include <cstdint>
#include <string>
#include <vector>

#include "seqdens/nn.hpp"
#include "seqdens/tensor.hpp"

namespace seqdens {

// Reserved token ids shared by the data pipeline and the models.
inline constexpr int64_t kPadId = 0;
inline constexpr int64_t kBosId = 1;
inline constexpr int64_t kEosId = 2;
inline constexpr int64_t kReservedTokens = 3;

// Architecture hyperparameters for one model. Structural fields come from
// the size registry; vocab_size, max_len and dropout_rate are set per task.
struct ModelConfig {
  std::string size_tag = "gauss-base-toy";
  int64_t d_model = 64;
  int64_t d_latent = 32;
  int64_t d_filter = 256;
  int heads = 4;
  int encoder_layers = 2;
  int decoder_layers = 2;
  int posterior_layers = 2;
  int64_t vocab_size = 64;
  int64_t max_len = 64;
  double dropout_rate = 0.1;

  // Flow prior topology (ignored by other families).
  std::vector<int> flow_depths = {4, 8, 6};
  int flow_heads = 4;

  void validate() const;
};

// Named desk-scale configurations mirroring the family/size axes.
ModelConfig config_registry(const std::string& size_tag);

// Length-offset head: categorical over offsets in [-30, 30].
inline constexpr int kLengthOffsetRange = 30;
inline constexpr int kLengthClasses = 2 * kLengthOffsetRange + 1;  // 61

struct EncodedSource {
  Tensor hidden;  // (B, T', d_model)
  int64_t batch = 0;
  int64_t len = 0;
};

struct GaussianSequence {
  Tensor mu;     // (B, T, d_latent)
  Tensor sigma;  // (B, T, d_latent), strictly positive
};

// Per-sequence diagonal-Gaussian log density of z under q: (B).
Tensor gaussian_log_density(const GaussianSequence& q, const Tensor& z);
// Reparameterized sample mu + sigma * eps.
Tensor gaussian_sample(const GaussianSequence& q, const Tensor& eps);
// Analytic KL[q || p] per sequence: (B).
Tensor gaussian_kl(const GaussianSequence& q, const GaussianSequence& p);
// Analytic KL[q || N(0, I)] per sequence: (B).
Tensor gaussian_kl_to_standard(const GaussianSequence& q);

struct LengthDistribution {
  Tensor logits;  // (B, 61)
};

// argmax offset + src_len, clipped to [1, max_len], rounded up to a
// multiple of 4.
std::vector<int64_t> predict_length(const LengthDistribution& dist,
                                    int64_t src_len, int64_t max_len);
int64_t pad_to_multiple_of_4(int64_t len);

using TokenRows = std::vector<std::vector<int64_t>>;

struct SourceEncoder {
  Embedding emb;
  std::vector<TransformerBlock> blocks;
  LayerNorm final_ln;
  int64_t max_len = 0;

  SourceEncoder() = default;
  SourceEncoder(ParamRegistry& reg, const std::string& prefix,
                const ModelConfig& cfg, Rng& rng);
  EncodedSource encode(const TokenRows& src, const EvalContext& ctx) const;
};

struct ArDecoder {
  Embedding emb;
  std::vector<TransformerBlock> blocks;
  LayerNorm final_ln;
  Linear out;

  ArDecoder() = default;
  ArDecoder(ParamRegistry& reg, const std::string& prefix,
            const ModelConfig& cfg, Rng& rng);
  // input_rows are the shifted decoder inputs (BOS-prefixed). (B,T,V).
  Tensor forward(const EncodedSource& src, const TokenRows& input_rows,
                 const EvalContext& ctx) const;
};

struct NarDecoder {
  Linear z_proj;
  std::vector<TransformerBlock> blocks;
  LayerNorm final_ln;
  Linear out;

  NarDecoder() = default;
  NarDecoder(ParamRegistry& reg, const std::string& prefix,
             const ModelConfig& cfg, Rng& rng);
  // z: (B, T, d_latent) -> logits (B, T, V); one parallel pass.
  Tensor forward(const EncodedSource& src, const Tensor& z,
                 const EvalContext& ctx) const;
};

struct PosteriorNet {
  Embedding emb;
  std::vector<TransformerBlock> blocks;
  LayerNorm final_ln;
  WeightNormLinear out;
  int64_t d_latent = 0;

  PosteriorNet() = default;
  PosteriorNet(ParamRegistry& reg, const std::string& prefix,
               const ModelConfig& cfg, Rng& rng);
  GaussianSequence forward(const EncodedSource& src, const TokenRows& tgt,
                           const EvalContext& ctx) const;
};

struct LengthPredictor {
  Linear lin1, lin2;

  LengthPredictor() = default;
  LengthPredictor(ParamRegistry& reg, const std::string& prefix,
                  const ModelConfig& cfg, Rng& rng);
  // 2-layer MLP over mean-pooled encoder states.
  LengthDistribution forward(const EncodedSource& src,
                             const EvalContext& ctx) const;
};

// sigma link used by posterior and priors: softplus(raw) + 1e-3.
Tensor sigma_link(const Tensor& raw);

}  // namespace seqdens
