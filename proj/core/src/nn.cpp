#include "seqdens/nn.hpp"

#include <cmath>

#include "seqdens/error.hpp"

namespace seqdens {

Tensor ParamRegistry::add(const std::string& name, Tensor t) {
  if (has(name)) throw Error("duplicate parameter name: " + name);
  if (!t.requires_grad()) throw Error("parameter must require grad: " + name);
  items_.emplace_back(name, t);
  return t;
}

const Tensor& ParamRegistry::get(const std::string& name) const {
  for (const auto& [n, t] : items_)
    if (n == name) return t;
  throw Error("unknown parameter: " + name);
}

bool ParamRegistry::has(const std::string& name) const {
  for (const auto& [n, t] : items_)
    if (n == name) return true;
  return false;
}

int64_t ParamRegistry::total_size() const {
  int64_t n = 0;
  for (const auto& [name, t] : items_) n += t.size();
  return n;
}

void ParamRegistry::zero_grads() {
  for (auto& [name, t] : items_) t.zero_grad();
}

namespace {

// Glorot-normal initialization for a (fan_in, fan_out) matrix.
Tensor glorot(Shape shape, int64_t fan_in, int64_t fan_out, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  return Tensor::randn(std::move(shape), rng, stddev, /*requires_grad=*/true);
}

}  // namespace

Linear::Linear(ParamRegistry& reg, const std::string& prefix, int64_t in,
               int64_t out, Rng& rng) {
  w = reg.add(prefix + ".w", glorot({in, out}, in, out, rng));
  b = reg.add(prefix + ".b", Tensor::zeros({out}, true));
}

Tensor Linear::forward(const Tensor& x) const { return add(matmul(x, w), b); }

WeightNormLinear::WeightNormLinear(ParamRegistry& reg, const std::string& prefix,
                                   int64_t in, int64_t out, Rng& rng,
                                   double scale_init) {
  v = reg.add(prefix + ".v", glorot({out, in}, in, out, rng));
  g = reg.add(prefix + ".g", Tensor::full({out}, scale_init, true));
  b = reg.add(prefix + ".b", Tensor::zeros({out}, true));
}

Tensor WeightNormLinear::forward(const Tensor& x) const {
  return add(matmul(x, transpose_last2(weight_norm(v, g))), b);
}

LayerNorm::LayerNorm(ParamRegistry& reg, const std::string& prefix, int64_t dim) {
  gain = reg.add(prefix + ".gain", Tensor::full({dim}, 1.0, true));
  bias = reg.add(prefix + ".bias", Tensor::zeros({dim}, true));
}

Tensor LayerNorm::forward(const Tensor& x) const {
  return layer_norm(x, gain, bias);
}

MultiHeadAttention::MultiHeadAttention(ParamRegistry& reg,
                                       const std::string& prefix,
                                       int64_t d_model_, int heads_, Rng& rng)
    : heads(heads_), d_model(d_model_) {
  if (d_model % heads != 0) throw ShapeError("d_model must be divisible by heads");
  wq = Linear(reg, prefix + ".wq", d_model, d_model, rng);
  wk = Linear(reg, prefix + ".wk", d_model, d_model, rng);
  wv = Linear(reg, prefix + ".wv", d_model, d_model, rng);
  wo = Linear(reg, prefix + ".wo", d_model, d_model, rng);
}

Tensor MultiHeadAttention::forward(const Tensor& q_in, const Tensor& kv_in,
                                   const Tensor& mask,
                                   const EvalContext& ctx) const {
  const int64_t B = q_in.dim(0), Tq = q_in.dim(1);
  const int64_t Tk = kv_in.dim(1);
  const int64_t dh = d_model / heads;
  auto split_heads = [&](const Tensor& x, int64_t T) {
    return permute(reshape(x, {B, T, heads, dh}), {0, 2, 1, 3});
  };
  Tensor q = split_heads(wq.forward(q_in), Tq);
  Tensor k = split_heads(wk.forward(kv_in), Tk);
  Tensor v = split_heads(wv.forward(kv_in), Tk);
  Tensor scores = mul_scalar(matmul(q, transpose_last2(k)),
                             1.0 / std::sqrt(static_cast<double>(dh)));
  if (mask.defined()) scores = add(scores, mask);
  Tensor attn = softmax(scores, -1);
  if (ctx.training && ctx.dropout > 0)
    attn = dropout(attn, ctx.dropout, *ctx.rng, true);
  Tensor out = matmul(attn, v);  // (B, H, Tq, dh)
  out = reshape(permute(out, {0, 2, 1, 3}), {B, Tq, d_model});
  return wo.forward(out);
}

FeedForward::FeedForward(ParamRegistry& reg, const std::string& prefix,
                         int64_t d_model, int64_t d_filter, Rng& rng) {
  lin1 = Linear(reg, prefix + ".lin1", d_model, d_filter, rng);
  lin2 = Linear(reg, prefix + ".lin2", d_filter, d_model, rng);
}

Tensor FeedForward::forward(const Tensor& x, const EvalContext& ctx) const {
  Tensor h = relu(lin1.forward(x));
  if (ctx.training && ctx.dropout > 0) h = dropout(h, ctx.dropout, *ctx.rng, true);
  return lin2.forward(h);
}

TransformerBlock::TransformerBlock(ParamRegistry& reg, const std::string& prefix,
                                   int64_t d_model, int64_t d_filter, int heads,
                                   bool cross, Rng& rng)
    : has_cross(cross) {
  ln1 = LayerNorm(reg, prefix + ".ln1", d_model);
  self_attn = MultiHeadAttention(reg, prefix + ".self", d_model, heads, rng);
  if (cross) {
    ln2 = LayerNorm(reg, prefix + ".ln2", d_model);
    cross_attn = MultiHeadAttention(reg, prefix + ".cross", d_model, heads, rng);
  }
  ln3 = LayerNorm(reg, prefix + ".ln3", d_model);
  ffn = FeedForward(reg, prefix + ".ffn", d_model, d_filter, rng);
}

Tensor TransformerBlock::forward(const Tensor& x, const Tensor* enc,
                                 const Tensor& self_mask,
                                 const EvalContext& ctx) const {
  auto maybe_drop = [&](Tensor t) {
    if (ctx.training && ctx.dropout > 0) return dropout(t, ctx.dropout, *ctx.rng, true);
    return t;
  };
  Tensor h = ln1.forward(x);
  Tensor y = add(x, maybe_drop(self_attn.forward(h, h, self_mask, ctx)));
  if (has_cross) {
    if (!enc) throw Error("transformer block expects encoder states");
    Tensor c = ln2.forward(y);
    y = add(y, maybe_drop(cross_attn.forward(c, *enc, Tensor(), ctx)));
  }
  Tensor f = ln3.forward(y);
  return add(y, maybe_drop(ffn.forward(f, ctx)));
}

Embedding::Embedding(ParamRegistry& reg, const std::string& prefix, int64_t vocab,
                     int64_t d_model_, Rng& rng)
    : d_model(d_model_) {
  table = reg.add(prefix + ".table",
                  Tensor::randn({vocab, d_model}, rng,
                                1.0 / std::sqrt(static_cast<double>(d_model)),
                                /*requires_grad=*/true));
}

Tensor Embedding::forward(const std::vector<int64_t>& ids,
                          const Shape& ids_shape) const {
  return mul_scalar(embed(table, ids, ids_shape),
                    std::sqrt(static_cast<double>(d_model)));
}

Tensor sinusoidal_positions(int64_t T, int64_t D) {
  std::vector<double> pe(static_cast<size_t>(T * D));
  for (int64_t t = 0; t < T; ++t)
    for (int64_t i = 0; i < D; ++i) {
      const double rate =
          std::pow(10000.0, -2.0 * static_cast<double>(i / 2) / static_cast<double>(D));
      pe[t * D + i] = (i % 2 == 0) ? std::sin(t * rate) : std::cos(t * rate);
    }
  return Tensor::from_data({T, D}, std::move(pe));
}

Tensor causal_mask(int64_t T) {
  std::vector<double> m(static_cast<size_t>(T * T), 0.0);
  for (int64_t i = 0; i < T; ++i)
    for (int64_t j = i + 1; j < T; ++j) m[i * T + j] = -1e30;
  return Tensor::from_data({T, T}, std::move(m));
}

}  // namespace seqdens
