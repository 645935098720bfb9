#pragma once

#include <string>
#include <utility>
#include <vector>

#include "seqdens/rng.hpp"
#include "seqdens/tensor.hpp"

namespace seqdens {

// Ordered name -> parameter map. Construction order is deterministic, which
// fixes the checkpoint and optimizer-state layout.
class ParamRegistry {
 public:
  Tensor add(const std::string& name, Tensor t);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  int64_t total_size() const;
  void zero_grads();

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

// Per-forward-pass evaluation context. Dropout draws from *rng only when
// training is set; evaluation passes are deterministic.
struct EvalContext {
  bool training = false;
  double dropout = 0.0;
  Rng* rng = nullptr;

  static EvalContext eval() { return {}; }
  static EvalContext train(double dropout_rate, Rng& rng) {
    return {true, dropout_rate, &rng};
  }
};

struct Linear {
  Tensor w;  // (in, out)
  Tensor b;  // (out)

  Linear() = default;
  Linear(ParamRegistry& reg, const std::string& prefix, int64_t in, int64_t out,
         Rng& rng);
  Tensor forward(const Tensor& x) const;
};

// Linear layer with row-wise weight normalization on the output units:
// W = g * v / ||v||, scale initialized small so initial outputs are near 0.
struct WeightNormLinear {
  Tensor v;  // (out, in) direction
  Tensor g;  // (out) scale
  Tensor b;  // (out)

  WeightNormLinear() = default;
  WeightNormLinear(ParamRegistry& reg, const std::string& prefix, int64_t in,
                   int64_t out, Rng& rng, double scale_init = 0.1);
  Tensor forward(const Tensor& x) const;
};

struct LayerNorm {
  Tensor gain, bias;

  LayerNorm() = default;
  LayerNorm(ParamRegistry& reg, const std::string& prefix, int64_t dim);
  Tensor forward(const Tensor& x) const;
};

struct MultiHeadAttention {
  Linear wq, wk, wv, wo;
  int heads = 1;
  int64_t d_model = 0;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamRegistry& reg, const std::string& prefix,
                     int64_t d_model, int heads, Rng& rng);
  // q_in: (B, Tq, D), kv_in: (B, Tk, D), mask: additive (Tq, Tk) or undefined.
  Tensor forward(const Tensor& q_in, const Tensor& kv_in, const Tensor& mask,
                 const EvalContext& ctx) const;
};

struct FeedForward {
  Linear lin1, lin2;

  FeedForward() = default;
  FeedForward(ParamRegistry& reg, const std::string& prefix, int64_t d_model,
              int64_t d_filter, Rng& rng);
  Tensor forward(const Tensor& x, const EvalContext& ctx) const;
};

// Pre-norm transformer block; cross-attention is optional.
struct TransformerBlock {
  LayerNorm ln1, ln2, ln3;
  MultiHeadAttention self_attn, cross_attn;
  FeedForward ffn;
  bool has_cross = false;

  TransformerBlock() = default;
  TransformerBlock(ParamRegistry& reg, const std::string& prefix,
                   int64_t d_model, int64_t d_filter, int heads, bool cross,
                   Rng& rng);
  Tensor forward(const Tensor& x, const Tensor* enc, const Tensor& self_mask,
                 const EvalContext& ctx) const;
};

struct Embedding {
  Tensor table;  // (V, D)
  int64_t d_model = 0;

  Embedding() = default;
  Embedding(ParamRegistry& reg, const std::string& prefix, int64_t vocab,
            int64_t d_model, Rng& rng);
  // Lookup scaled by sqrt(D).
  Tensor forward(const std::vector<int64_t>& ids, const Shape& ids_shape) const;
};

// Sinusoidal positional encodings, (T, D) constant.
Tensor sinusoidal_positions(int64_t T, int64_t D);
// Additive causal mask, (T, T): 0 where key <= query, -1e30 above.
Tensor causal_mask(int64_t T);

}  // namespace seqdens
