#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "seqdens/models.hpp"
#include "seqdens/nn.hpp"
#include "seqdens/tensor.hpp"

namespace seqdens {

enum class PriorKind { gaussian, flow };

// A length-T block of d-dimensional latents plus the accumulated
// change-of-variables term, one scalar per sequence.
struct LatentBlock {
  Tensor values;   // (B, T, d_latent)
  Tensor log_det;  // (B)
};

enum class FlowLayerKind { actnorm, mix1x1, coupling };
enum class SplitPattern { feature_halves, alternating_time, alternating_features };

// One coupling parameter network: a single transformer block attending to
// the source, with a weight-normalized output head producing (s, b).
struct CouplingNet {
  Linear in_proj;
  TransformerBlock block;
  WeightNormLinear out;

  CouplingNet() = default;
  CouplingNet(ParamRegistry& reg, const std::string& prefix, int64_t in_dim,
              int64_t out_dim, const ModelConfig& cfg, Rng& rng);
};

struct FlowLayer {
  FlowLayerKind kind = FlowLayerKind::actnorm;
  int level = 0;
  int index = 0;  // position in the stack, for error messages

  // actnorm: per-channel affine y = s*x + b
  Tensor an_scale, an_bias;  // (d)

  // mix1x1: block-diagonal mixing over feature groups
  std::vector<Tensor> mix_w;  // flow_heads matrices (d/h, d/h)

  // coupling
  SplitPattern pattern = SplitPattern::feature_halves;
  bool swapped = false;
  CouplingNet net;

  // state: (B, T, d) -> (state', log_det increment (B))
  std::pair<Tensor, Tensor> forward(const Tensor& state, const EncodedSource& src,
                                    const EvalContext& ctx) const;
  Tensor inverse(const Tensor& state, const EncodedSource& src,
                 const EvalContext& ctx) const;
};

// The invertible core of a coupling layer: z' = s * z + b with
// log-determinant increment sum(log s) per sequence.
std::pair<Tensor, Tensor> affine_couple(const Tensor& ztr, const Tensor& s,
                                        const Tensor& b);
// (z' - b) / s; scales below 1e-12 raise a singular-scale error.
Tensor affine_uncouple(const Tensor& ztr2, const Tensor& s, const Tensor& b);

// Index split for a coupling pattern at runtime extent. axis is 1 (time) or
// 2 (features). Either side may be empty for degenerate extents.
struct SplitIndices {
  int axis = 2;
  std::vector<int64_t> identity;
  std::vector<int64_t> transformed;
};
SplitIndices split_indices(SplitPattern pattern, bool swapped, int64_t T,
                           int64_t d);

// Multi-scale coupling flow. Each counted depth step is a glow-style
// triplet [actnorm, mix1x1, coupling]; coupling layers cycle through the
// three split patterns in both polarities. At the end of each non-final
// level the earlier half of the time positions is factored out to the
// standard-normal base distribution.
class FlowStack {
 public:
  FlowStack() = default;
  FlowStack(ParamRegistry& reg, const std::string& prefix, const ModelConfig& cfg,
            Rng& rng);

  // z -> base-space tensor (factor-out order) plus total log-determinant.
  LatentBlock forward_to_base(const EncodedSource& src, const Tensor& z,
                              const EvalContext& ctx) const;
  // log p_b(f(z; x)) + sum of log-determinant increments: (B).
  Tensor log_density(const EncodedSource& src, const Tensor& z,
                     const EvalContext& ctx) const;
  // Inverse pass from base-space; exact sampling runs this on N(0, I) draws.
  Tensor inverse_from_base(const EncodedSource& src, const Tensor& eps,
                           const EvalContext& ctx) const;
  Tensor sample(const EncodedSource& src, int64_t T, Rng& rng,
                const EvalContext& ctx) const;
  // f^{-1}(0; x), the deterministic block used to seed the delta posterior.
  Tensor mean(const EncodedSource& src, int64_t T, const EvalContext& ctx) const;

  // Data-dependent actnorm initialization on a batch of posterior samples.
  // Callable exactly once; needs at least 2 sequences.
  void actnorm_init(const EncodedSource& src, const Tensor& z_batch,
                    const EvalContext& ctx);
  bool actnorm_initialized() const { return actnorm_initialized_; }
  void set_actnorm_initialized(bool v) { actnorm_initialized_ = v; }

  int levels() const { return static_cast<int>(depths_.size()); }
  const std::vector<int>& depths() const { return depths_; }
  const std::vector<FlowLayer>& layers() const { return layers_; }
  int64_t required_length_multiple() const { return int64_t{1} << (levels() - 1); }

 private:
  void check_length(int64_t T) const;

  std::vector<FlowLayer> layers_;
  std::vector<int> depths_;
  int64_t d_latent_ = 0;
  bool actnorm_initialized_ = false;
};

// Conditional prior over latent blocks: a transformer decoder over T
// positional encodings attending to the source states.
struct GaussianPriorNet {
  std::vector<TransformerBlock> blocks;
  LayerNorm final_ln;
  Linear out;
  int64_t d_model = 0, d_latent = 0;

  GaussianPriorNet() = default;
  GaussianPriorNet(ParamRegistry& reg, const std::string& prefix,
                   const ModelConfig& cfg, Rng& rng);
  GaussianSequence forward(const EncodedSource& src, int64_t T,
                           const EvalContext& ctx) const;
};

struct Prior {
  PriorKind kind = PriorKind::gaussian;
  GaussianPriorNet gauss;
  FlowStack flow;

  Tensor log_density(const EncodedSource& src, const Tensor& z,
                     const EvalContext& ctx) const;
  Tensor sample(const EncodedSource& src, int64_t T, Rng& rng,
                const EvalContext& ctx) const;
  Tensor mean(const EncodedSource& src, int64_t T, const EvalContext& ctx) const;
  GaussianSequence gaussian_params(const EncodedSource& src, int64_t T,
                                   const EvalContext& ctx) const;
};

// Standard-normal log density summed per sequence: (B).
Tensor std_normal_log_density(const Tensor& x);

}  // namespace seqdens
