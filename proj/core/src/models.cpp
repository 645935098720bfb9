#include "seqdens/models.hpp"

#include <algorithm>
#include <cmath>

#include "seqdens/error.hpp"

namespace seqdens {

void ModelConfig::validate() const {
  if (d_model % heads != 0) throw ConfigError("d_model must be divisible by heads");
  if (max_len < 8 || max_len % 4 != 0)
    throw ConfigError("max_len must be >= 8 and a multiple of 4");
  if (d_latent % 2 != 0 || d_latent < 2)
    throw ConfigError("d_latent must be even and >= 2");
  if (vocab_size < 4) throw ConfigError("vocab_size must cover reserved tokens");
  if (dropout_rate < 0 || dropout_rate >= 1) throw ConfigError("dropout_rate in [0,1)");
}

ModelConfig config_registry(const std::string& size_tag) {
  ModelConfig c;
  c.size_tag = size_tag;
  if (size_tag == "ar-small") {
    c.heads = 2;
    c.encoder_layers = 2;
    c.decoder_layers = 2;
    c.d_model = 64;
    c.d_filter = 256;
    c.d_latent = 32;
  } else if (size_tag == "gauss-base-toy") {
    c.heads = 4;
    c.encoder_layers = 2;
    c.decoder_layers = 2;
    c.posterior_layers = 2;
    c.d_model = 64;
    c.d_latent = 32;
    c.d_filter = 256;
  } else if (size_tag == "flow-base-toy") {
    c.heads = 4;
    c.encoder_layers = 2;
    c.decoder_layers = 2;
    c.posterior_layers = 2;
    c.d_model = 64;
    c.d_latent = 32;
    c.d_filter = 256;
    c.flow_depths = {4, 8, 6};
    c.flow_heads = 4;
  } else if (size_tag == "flow-small-toy") {
    c.heads = 4;
    c.encoder_layers = 2;
    c.decoder_layers = 2;
    c.posterior_layers = 2;
    c.d_model = 64;
    c.d_latent = 32;
    c.d_filter = 256;
    c.flow_depths = {4, 4, 2};
    c.flow_heads = 4;
  } else if (size_tag == "ar-accept") {
    c.heads = 2;
    c.encoder_layers = 2;
    c.decoder_layers = 2;
    c.d_model = 32;
    c.d_filter = 128;
    c.d_latent = 16;
  } else if (size_tag == "gauss-accept") {
    c.heads = 2;
    c.encoder_layers = 2;
    c.decoder_layers = 2;
    c.posterior_layers = 2;
    c.d_model = 32;
    c.d_latent = 16;
    c.d_filter = 128;
  } else if (size_tag == "flow-accept") {
    c.heads = 2;
    c.encoder_layers = 2;
    c.decoder_layers = 2;
    c.posterior_layers = 2;
    c.d_model = 32;
    c.d_latent = 16;
    c.d_filter = 128;
    c.flow_depths = {2, 2, 2};
    c.flow_heads = 2;
  } else {
    throw ConfigError("unknown model size tag: " + size_tag);
  }
  return c;
}

Tensor sigma_link(const Tensor& raw) { return add_scalar(softplus(raw), 1e-3); }

Tensor gaussian_log_density(const GaussianSequence& q, const Tensor& z) {
  constexpr double kLog2Pi = 1.8378770664093454836;
  Tensor u = div(sub(z, q.mu), q.sigma);
  Tensor per_elem = add_scalar(add(mul_scalar(square(u), 0.5), log(q.sigma)),
                               0.5 * kLog2Pi);
  return neg(sum_axis(sum_axis(per_elem, 2), 1));
}

Tensor gaussian_sample(const GaussianSequence& q, const Tensor& eps) {
  return add(q.mu, mul(q.sigma, eps));
}

Tensor gaussian_kl(const GaussianSequence& q, const GaussianSequence& p) {
  // 0.5 * [ (sq^2 + (mq - mp)^2) / sp^2 - 1 ] + log(sp / sq), per element.
  Tensor var_ratio = div(square(q.sigma), square(p.sigma));
  Tensor mean_term = div(square(sub(q.mu, p.mu)), square(p.sigma));
  Tensor per_elem =
      add(mul_scalar(add_scalar(add(var_ratio, mean_term), -1.0), 0.5),
          sub(log(p.sigma), log(q.sigma)));
  return sum_axis(sum_axis(per_elem, 2), 1);
}

Tensor gaussian_kl_to_standard(const GaussianSequence& q) {
  Tensor per_elem =
      sub(mul_scalar(add_scalar(add(square(q.sigma), square(q.mu)), -1.0), 0.5),
          log(q.sigma));
  return sum_axis(sum_axis(per_elem, 2), 1);
}

int64_t pad_to_multiple_of_4(int64_t len) { return ((len + 3) / 4) * 4; }

std::vector<int64_t> predict_length(const LengthDistribution& dist,
                                    int64_t src_len, int64_t max_len) {
  const int64_t B = dist.logits.dim(0);
  std::vector<int64_t> out(static_cast<size_t>(B));
  for (int64_t b = 0; b < B; ++b) {
    int best = 0;
    double best_v = dist.logits.at({b, 0});
    for (int k = 1; k < kLengthClasses; ++k) {
      const double v = dist.logits.at({b, k});
      if (v > best_v) {
        best_v = v;
        best = k;
      }
    }
    int64_t len = src_len + (best - kLengthOffsetRange);
    len = std::clamp<int64_t>(len, 1, max_len);
    len = pad_to_multiple_of_4(len);
    out[static_cast<size_t>(b)] = std::min(len, max_len);
  }
  return out;
}

namespace {

// Flattens equal-length rows; validates rectangularity.
std::vector<int64_t> flatten_rows(const TokenRows& rows, int64_t* T) {
  if (rows.empty()) throw DataError("empty batch");
  *T = static_cast<int64_t>(rows[0].size());
  std::vector<int64_t> flat;
  flat.reserve(rows.size() * rows[0].size());
  for (const auto& r : rows) {
    if (static_cast<int64_t>(r.size()) != *T)
      throw LengthError("batch rows must share one length");
    flat.insert(flat.end(), r.begin(), r.end());
  }
  return flat;
}

// (T, D) positional table broadcast to a (B, T, D) input.
Tensor tiled_positions(int64_t B, int64_t T, int64_t D) {
  Tensor pe = sinusoidal_positions(T, D);
  std::vector<double> data;
  data.reserve(static_cast<size_t>(B * T * D));
  for (int64_t b = 0; b < B; ++b)
    data.insert(data.end(), pe.data().begin(), pe.data().end());
  return Tensor::from_data({B, T, D}, std::move(data));
}

}  // namespace

SourceEncoder::SourceEncoder(ParamRegistry& reg, const std::string& prefix,
                             const ModelConfig& cfg, Rng& rng)
    : max_len(cfg.max_len) {
  emb = Embedding(reg, prefix + ".emb", cfg.vocab_size, cfg.d_model, rng);
  for (int i = 0; i < cfg.encoder_layers; ++i)
    blocks.emplace_back(reg, prefix + ".l" + std::to_string(i), cfg.d_model,
                        cfg.d_filter, cfg.heads, /*cross=*/false, rng);
  if (cfg.encoder_layers > 0)
    final_ln = LayerNorm(reg, prefix + ".final_ln", cfg.d_model);
}

EncodedSource SourceEncoder::encode(const TokenRows& src,
                                    const EvalContext& ctx) const {
  int64_t T = 0;
  auto flat = flatten_rows(src, &T);
  if (T > max_len)
    throw LengthError("source length " + std::to_string(T) + " exceeds max_len " +
                      std::to_string(max_len));
  const int64_t B = static_cast<int64_t>(src.size());
  Tensor x = emb.forward(flat, {B, T});
  x = add(x, reshape(tiled_positions(1, T, x.dim(2)), {T, x.dim(2)}));
  if (ctx.training && ctx.dropout > 0) x = dropout(x, ctx.dropout, *ctx.rng, true);
  for (const auto& blk : blocks) x = blk.forward(x, nullptr, Tensor(), ctx);
  if (!blocks.empty()) x = final_ln.forward(x);
  return {x, B, T};
}

ArDecoder::ArDecoder(ParamRegistry& reg, const std::string& prefix,
                     const ModelConfig& cfg, Rng& rng) {
  emb = Embedding(reg, prefix + ".emb", cfg.vocab_size, cfg.d_model, rng);
  for (int i = 0; i < cfg.decoder_layers; ++i)
    blocks.emplace_back(reg, prefix + ".l" + std::to_string(i), cfg.d_model,
                        cfg.d_filter, cfg.heads, /*cross=*/true, rng);
  final_ln = LayerNorm(reg, prefix + ".final_ln", cfg.d_model);
  out = Linear(reg, prefix + ".out", cfg.d_model, cfg.vocab_size, rng);
}

Tensor ArDecoder::forward(const EncodedSource& src, const TokenRows& input_rows,
                          const EvalContext& ctx) const {
  int64_t T = 0;
  auto flat = flatten_rows(input_rows, &T);
  const int64_t B = static_cast<int64_t>(input_rows.size());
  if (B != src.batch) throw ShapeError("decoder/source batch mismatch");
  Tensor x = emb.forward(flat, {B, T});
  x = add(x, reshape(tiled_positions(1, T, x.dim(2)), {T, x.dim(2)}));
  if (ctx.training && ctx.dropout > 0) x = dropout(x, ctx.dropout, *ctx.rng, true);
  Tensor mask = causal_mask(T);
  for (const auto& blk : blocks) x = blk.forward(x, &src.hidden, mask, ctx);
  x = final_ln.forward(x);
  return out.forward(x);
}

NarDecoder::NarDecoder(ParamRegistry& reg, const std::string& prefix,
                       const ModelConfig& cfg, Rng& rng) {
  z_proj = Linear(reg, prefix + ".z_proj", cfg.d_latent, cfg.d_model, rng);
  for (int i = 0; i < cfg.decoder_layers; ++i)
    blocks.emplace_back(reg, prefix + ".l" + std::to_string(i), cfg.d_model,
                        cfg.d_filter, cfg.heads, /*cross=*/true, rng);
  final_ln = LayerNorm(reg, prefix + ".final_ln", cfg.d_model);
  out = Linear(reg, prefix + ".out", cfg.d_model, cfg.vocab_size, rng);
}

Tensor NarDecoder::forward(const EncodedSource& src, const Tensor& z,
                           const EvalContext& ctx) const {
  if (z.rank() != 3) throw ShapeError("latent block must be (B, T, d_latent)");
  if (z.dim(0) != src.batch) throw ShapeError("latent/source batch mismatch");
  const int64_t T = z.dim(1);
  Tensor x = z_proj.forward(z);
  x = add(x, reshape(tiled_positions(1, T, x.dim(2)), {T, x.dim(2)}));
  if (ctx.training && ctx.dropout > 0) x = dropout(x, ctx.dropout, *ctx.rng, true);
  for (const auto& blk : blocks) x = blk.forward(x, &src.hidden, Tensor(), ctx);
  x = final_ln.forward(x);
  return out.forward(x);
}

PosteriorNet::PosteriorNet(ParamRegistry& reg, const std::string& prefix,
                           const ModelConfig& cfg, Rng& rng)
    : d_latent(cfg.d_latent) {
  emb = Embedding(reg, prefix + ".emb", cfg.vocab_size, cfg.d_model, rng);
  for (int i = 0; i < cfg.posterior_layers; ++i)
    blocks.emplace_back(reg, prefix + ".l" + std::to_string(i), cfg.d_model,
                        cfg.d_filter, cfg.heads, /*cross=*/true, rng);
  final_ln = LayerNorm(reg, prefix + ".final_ln", cfg.d_model);
  out = WeightNormLinear(reg, prefix + ".out", cfg.d_model, 2 * cfg.d_latent, rng,
                         /*scale_init=*/0.1);
}

GaussianSequence PosteriorNet::forward(const EncodedSource& src,
                                       const TokenRows& tgt,
                                       const EvalContext& ctx) const {
  int64_t T = 0;
  auto flat = flatten_rows(tgt, &T);
  const int64_t B = static_cast<int64_t>(tgt.size());
  if (B != src.batch) throw ShapeError("posterior/source batch mismatch");
  Tensor x = emb.forward(flat, {B, T});
  x = add(x, reshape(tiled_positions(1, T, x.dim(2)), {T, x.dim(2)}));
  if (ctx.training && ctx.dropout > 0) x = dropout(x, ctx.dropout, *ctx.rng, true);
  for (const auto& blk : blocks) x = blk.forward(x, &src.hidden, Tensor(), ctx);
  x = final_ln.forward(x);
  Tensor stats = out.forward(x);  // (B, T, 2*d_latent)
  Tensor mu = slice(stats, 2, 0, d_latent);
  Tensor sigma = sigma_link(slice(stats, 2, d_latent, d_latent));
  return {mu, sigma};
}

LengthPredictor::LengthPredictor(ParamRegistry& reg, const std::string& prefix,
                                 const ModelConfig& cfg, Rng& rng) {
  lin1 = Linear(reg, prefix + ".lin1", cfg.d_model, cfg.d_model, rng);
  lin2 = Linear(reg, prefix + ".lin2", cfg.d_model, kLengthClasses, rng);
}

LengthDistribution LengthPredictor::forward(const EncodedSource& src,
                                            const EvalContext& ctx) const {
  Tensor pooled = mean_axis(src.hidden, 1);  // (B, D)
  Tensor h = relu(lin1.forward(pooled));
  if (ctx.training && ctx.dropout > 0) h = dropout(h, ctx.dropout, *ctx.rng, true);
  return {lin2.forward(h)};
}

}  // namespace seqdens
