#include "seqdens/priors.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <numeric>

#include "seqdens/error.hpp"

namespace seqdens {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

Tensor tiled_positions_b(int64_t B, int64_t T, int64_t D) {
  Tensor pe = sinusoidal_positions(T, D);
  std::vector<double> data;
  data.reserve(static_cast<size_t>(B * T * D));
  for (int64_t b = 0; b < B; ++b)
    data.insert(data.end(), pe.data().begin(), pe.data().end());
  return Tensor::from_data({B, T, D}, std::move(data));
}

// Random rotation (orthogonal, det +1) via QR of a Gaussian matrix.
std::vector<double> random_rotation(int64_t n, Rng& rng) {
  Eigen::MatrixXd a(n, n);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) a(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ();
  Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int64_t i = 0; i < n; ++i)
    if (r(i, i) < 0) q.col(i) = -q.col(i);
  if (q.determinant() < 0) q.col(0) = -q.col(0);
  std::vector<double> out(static_cast<size_t>(n * n));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) out[i * n + j] = q(i, j);
  return out;
}

std::vector<double> invert_matrix(const Tensor& w) {
  const int64_t n = w.shape()[0];
  Eigen::MatrixXd m(n, n);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) m(i, j) = w.at({i, j});
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(m);
  const Eigen::MatrixXd inv = lu.inverse();
  std::vector<double> out(static_cast<size_t>(n * n));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) {
      if (!std::isfinite(inv(i, j)))
        throw NumericalError("mix1x1 matrix is singular");
      out[i * n + j] = inv(i, j);
    }
  return out;
}

// Positions of the original indices inside concat(identity, transformed).
std::vector<int64_t> restore_order(const std::vector<int64_t>& id_idx,
                                   const std::vector<int64_t>& tr_idx) {
  std::vector<int64_t> pos(id_idx.size() + tr_idx.size());
  for (size_t k = 0; k < id_idx.size(); ++k) pos[id_idx[k]] = static_cast<int64_t>(k);
  for (size_t k = 0; k < tr_idx.size(); ++k)
    pos[tr_idx[k]] = static_cast<int64_t>(id_idx.size() + k);
  return pos;
}

}  // namespace

Tensor std_normal_log_density(const Tensor& x) {
  Tensor per_elem = add_scalar(mul_scalar(square(x), 0.5), 0.5 * kLog2Pi);
  return neg(sum_axis(sum_axis(per_elem, 2), 1));
}

SplitIndices split_indices(SplitPattern pattern, bool swapped, int64_t T,
                           int64_t d) {
  SplitIndices s;
  auto evens_odds = [](int64_t n) {
    std::pair<std::vector<int64_t>, std::vector<int64_t>> eo;
    for (int64_t i = 0; i < n; ++i)
      (i % 2 == 0 ? eo.first : eo.second).push_back(i);
    return eo;
  };
  switch (pattern) {
    case SplitPattern::feature_halves: {
      s.axis = 2;
      for (int64_t i = 0; i < d / 2; ++i) s.identity.push_back(i);
      for (int64_t i = d / 2; i < d; ++i) s.transformed.push_back(i);
      break;
    }
    case SplitPattern::alternating_time: {
      s.axis = 1;
      auto [e, o] = evens_odds(T);
      s.identity = std::move(e);
      s.transformed = std::move(o);
      break;
    }
    case SplitPattern::alternating_features: {
      s.axis = 2;
      auto [e, o] = evens_odds(d);
      s.identity = std::move(e);
      s.transformed = std::move(o);
      break;
    }
  }
  if (swapped) std::swap(s.identity, s.transformed);
  return s;
}

CouplingNet::CouplingNet(ParamRegistry& reg, const std::string& prefix,
                         int64_t in_dim, int64_t out_dim, const ModelConfig& cfg,
                         Rng& rng) {
  in_proj = Linear(reg, prefix + ".in", in_dim, cfg.d_model, rng);
  block = TransformerBlock(reg, prefix + ".block", cfg.d_model, cfg.d_filter,
                           cfg.heads, /*cross=*/true, rng);
  out = WeightNormLinear(reg, prefix + ".out", cfg.d_model, out_dim, rng, 0.1);
}

namespace {

// Shared by forward and inverse: computes (s, b) from the identity part.
// Output positions beyond the net's input length reuse its last position.
std::pair<Tensor, Tensor> coupling_params(const CouplingNet& net,
                                          const Tensor& zid, int64_t t_out,
                                          int64_t c_out,
                                          const EncodedSource& src,
                                          const EvalContext& ctx) {
  const int64_t t_net = zid.dim(1);
  Tensor h = net.in_proj.forward(zid);
  h = add(h, reshape(tiled_positions_b(1, t_net, h.dim(2)), {t_net, h.dim(2)}));
  h = net.block.forward(h, &src.hidden, Tensor(), ctx);
  Tensor sb = net.out.forward(h);  // (B, t_net, 2*c_out)
  if (t_net != t_out) {
    std::vector<int64_t> rows(static_cast<size_t>(t_out));
    for (int64_t k = 0; k < t_out; ++k) rows[k] = std::min(k, t_net - 1);
    sb = take(sb, 1, rows);
  }
  Tensor s_raw = slice(sb, 2, 0, c_out);
  Tensor b = slice(sb, 2, c_out, c_out);
  // Scale link keeps s in (1e-3, 1 + 1e-3): always invertible.
  Tensor s = add_scalar(sigmoid(add_scalar(s_raw, 2.0)), 1e-3);
  return {s, b};
}

}  // namespace

std::pair<Tensor, Tensor> affine_couple(const Tensor& ztr, const Tensor& s,
                                        const Tensor& b) {
  Tensor out = add(mul(s, ztr), b);
  Tensor inc = sum_axis(sum_axis(log(s), 2), 1);
  return {out, inc};
}

Tensor affine_uncouple(const Tensor& ztr2, const Tensor& s, const Tensor& b) {
  for (double sv : s.data())
    if (sv < 1e-12) throw NumericalError("coupling inversion: singular scale");
  return div(sub(ztr2, b), s);
}

std::pair<Tensor, Tensor> FlowLayer::forward(const Tensor& state,
                                             const EncodedSource& src,
                                             const EvalContext& ctx) const {
  const int64_t B = state.dim(0), T = state.dim(1), d = state.dim(2);
  switch (kind) {
    case FlowLayerKind::actnorm: {
      Tensor y = add(mul(state, an_scale), an_bias);
      Tensor inc = mul_scalar(sum_all(log_abs(an_scale)), static_cast<double>(T));
      return {y, expand_scalar(inc, B)};
    }
    case FlowLayerKind::mix1x1: {
      const int64_t h = static_cast<int64_t>(mix_w.size());
      const int64_t dh = d / h;
      std::vector<Tensor> groups;
      Tensor det_sum = Tensor::zeros({});
      for (int64_t g = 0; g < h; ++g) {
        groups.push_back(matmul(slice(state, 2, g * dh, dh), mix_w[g]));
        det_sum = add(det_sum, logdet(mix_w[g]));
      }
      Tensor inc = mul_scalar(det_sum, static_cast<double>(T));
      return {concat(groups, 2), expand_scalar(inc, B)};
    }
    case FlowLayerKind::coupling: {
      SplitIndices si = split_indices(pattern, swapped, T, d);
      if (si.transformed.empty() || si.identity.empty())
        return {state, Tensor::zeros({B})};
      Tensor zid = take(state, si.axis, si.identity);
      Tensor ztr = take(state, si.axis, si.transformed);
      const int64_t t_out = ztr.dim(1), c_out = ztr.dim(2);
      auto [s, b] = coupling_params(net, zid, t_out, c_out, src, ctx);
      if (!all_finite(s))
        throw NumericalError("coupling layer " + std::to_string(index) +
                             ": non-finite scale");
      auto [ztr2, inc] = affine_couple(ztr, s, b);
      Tensor joined = concat({zid, ztr2}, si.axis);
      Tensor out = take(joined, si.axis, restore_order(si.identity, si.transformed));
      return {out, inc};
    }
  }
  throw Error("unreachable flow layer kind");
}

Tensor FlowLayer::inverse(const Tensor& state, const EncodedSource& src,
                          const EvalContext& ctx) const {
  const int64_t T = state.dim(1), d = state.dim(2);
  switch (kind) {
    case FlowLayerKind::actnorm: {
      for (double sv : an_scale.data())
        if (std::fabs(sv) < 1e-12)
          throw NumericalError("actnorm scale below 1e-12");
      return div(sub(state, an_bias), an_scale);
    }
    case FlowLayerKind::mix1x1: {
      const int64_t h = static_cast<int64_t>(mix_w.size());
      const int64_t dh = d / h;
      std::vector<Tensor> groups;
      for (int64_t g = 0; g < h; ++g) {
        Tensor inv = Tensor::from_data({dh, dh}, invert_matrix(mix_w[g]));
        groups.push_back(matmul(slice(state, 2, g * dh, dh), inv));
      }
      return concat(groups, 2);
    }
    case FlowLayerKind::coupling: {
      SplitIndices si = split_indices(pattern, swapped, T, d);
      if (si.transformed.empty() || si.identity.empty()) return state;
      Tensor zid = take(state, si.axis, si.identity);
      Tensor ztr2 = take(state, si.axis, si.transformed);
      const int64_t t_out = ztr2.dim(1), c_out = ztr2.dim(2);
      auto [s, b] = coupling_params(net, zid, t_out, c_out, src, ctx);
      Tensor ztr = affine_uncouple(ztr2, s, b);
      Tensor joined = concat({zid, ztr}, si.axis);
      return take(joined, si.axis, restore_order(si.identity, si.transformed));
    }
  }
  throw Error("unreachable flow layer kind");
}

FlowStack::FlowStack(ParamRegistry& reg, const std::string& prefix,
                     const ModelConfig& cfg, Rng& rng)
    : depths_(cfg.flow_depths), d_latent_(cfg.d_latent) {
  if (depths_.empty()) throw ConfigError("flow_depths must be non-empty");
  if (cfg.d_latent % cfg.flow_heads != 0)
    throw ConfigError("d_latent must be divisible by flow_heads");
  const int64_t dh = cfg.d_latent / cfg.flow_heads;
  int coupling_count = 0;
  int layer_index = 0;
  for (int level = 0; level < static_cast<int>(depths_.size()); ++level) {
    for (int step = 0; step < depths_[level]; ++step) {
      const std::string base =
          prefix + ".lv" + std::to_string(level) + ".s" + std::to_string(step);
      FlowLayer an;
      an.kind = FlowLayerKind::actnorm;
      an.level = level;
      an.index = layer_index++;
      an.an_scale = reg.add(base + ".an.scale", Tensor::full({cfg.d_latent}, 1.0, true));
      an.an_bias = reg.add(base + ".an.bias", Tensor::zeros({cfg.d_latent}, true));
      layers_.push_back(std::move(an));

      FlowLayer mx;
      mx.kind = FlowLayerKind::mix1x1;
      mx.level = level;
      mx.index = layer_index++;
      for (int g = 0; g < cfg.flow_heads; ++g)
        mx.mix_w.push_back(reg.add(base + ".mix.w" + std::to_string(g),
                                   Tensor::from_data({dh, dh}, random_rotation(dh, rng),
                                                     /*requires_grad=*/true)));
      layers_.push_back(std::move(mx));

      FlowLayer cp;
      cp.kind = FlowLayerKind::coupling;
      cp.level = level;
      cp.index = layer_index++;
      const int combo = coupling_count % 6;
      cp.pattern = static_cast<SplitPattern>(combo % 3);
      cp.swapped = combo >= 3;
      ++coupling_count;
      const int64_t in_dim =
          (cp.pattern == SplitPattern::alternating_time) ? cfg.d_latent
                                                         : cfg.d_latent / 2;
      const int64_t out_dim =
          (cp.pattern == SplitPattern::alternating_time) ? 2 * cfg.d_latent
                                                         : cfg.d_latent;
      cp.net = CouplingNet(reg, base + ".cpl", in_dim, out_dim, cfg, rng);
      layers_.push_back(std::move(cp));
    }
  }
}

void FlowStack::check_length(int64_t T) const {
  const int64_t m = required_length_multiple();
  if (T < m || T % m != 0)
    throw LengthError("flow input length " + std::to_string(T) +
                      " must be a positive multiple of " + std::to_string(m));
}

LatentBlock FlowStack::forward_to_base(const EncodedSource& src, const Tensor& z,
                                       const EvalContext& ctx) const {
  check_length(z.dim(1));
  const int64_t B = z.dim(0);
  Tensor state = z;
  Tensor log_det = Tensor::zeros({B});
  std::vector<Tensor> outs;
  size_t li = 0;
  for (int level = 0; level < levels(); ++level) {
    for (int step = 0; step < depths_[level] * 3; ++step, ++li) {
      auto [next, inc] = layers_[li].forward(state, src, ctx);
      state = next;
      log_det = add(log_det, inc);
    }
    if (level + 1 < levels()) {
      const int64_t half = state.dim(1) / 2;
      outs.push_back(slice(state, 1, 0, half));
      state = slice(state, 1, half, state.dim(1) - half);
    }
  }
  outs.push_back(state);
  return {concat(outs, 1), log_det};
}

Tensor FlowStack::log_density(const EncodedSource& src, const Tensor& z,
                              const EvalContext& ctx) const {
  LatentBlock base = forward_to_base(src, z, ctx);
  return add(std_normal_log_density(base.values), base.log_det);
}

Tensor FlowStack::inverse_from_base(const EncodedSource& src, const Tensor& eps,
                                    const EvalContext& ctx) const {
  check_length(eps.dim(1));
  const int64_t T = eps.dim(1);
  // Per-level factored-out extents, in emission order.
  std::vector<int64_t> sizes;
  int64_t cur = T;
  for (int level = 0; level + 1 < levels(); ++level) {
    sizes.push_back(cur / 2);
    cur -= cur / 2;
  }
  sizes.push_back(cur);
  std::vector<Tensor> parts;
  int64_t off = 0;
  for (int64_t s : sizes) {
    parts.push_back(slice(eps, 1, off, s));
    off += s;
  }
  // Invert the final level, then stitch factored parts back on.
  auto level_layer_range = [&](int level) {
    int64_t begin = 0;
    for (int l = 0; l < level; ++l) begin += depths_[l] * 3;
    return std::pair<int64_t, int64_t>{begin, begin + depths_[level] * 3};
  };
  Tensor state = parts.back();
  for (int level = levels() - 1; level >= 0; --level) {
    if (level + 1 < levels()) state = concat({parts[level], state}, 1);
    auto [begin, end] = level_layer_range(level);
    for (int64_t i = end - 1; i >= begin; --i)
      state = layers_[i].inverse(state, src, ctx);
  }
  return state;
}

Tensor FlowStack::sample(const EncodedSource& src, int64_t T, Rng& rng,
                         const EvalContext& ctx) const {
  check_length(T);
  Tensor eps = Tensor::randn({src.batch, T, d_latent_}, rng);
  return inverse_from_base(src, eps, ctx);
}

Tensor FlowStack::mean(const EncodedSource& src, int64_t T,
                       const EvalContext& ctx) const {
  check_length(T);
  return inverse_from_base(src, Tensor::zeros({src.batch, T, d_latent_}), ctx);
}

void FlowStack::actnorm_init(const EncodedSource& src, const Tensor& z_batch,
                             const EvalContext& ctx) {
  if (actnorm_initialized_)
    throw Error("actnorm parameters are already initialized");
  if (z_batch.dim(0) < 2)
    throw DataError("actnorm init needs at least 2 sequences");
  check_length(z_batch.dim(1));
  NoGradGuard ng;
  Tensor state = z_batch;
  size_t li = 0;
  for (int level = 0; level < levels(); ++level) {
    for (int step = 0; step < depths_[level] * 3; ++step, ++li) {
      FlowLayer& layer = layers_[li];
      if (layer.kind == FlowLayerKind::actnorm) {
        const int64_t rows = state.dim(0) * state.dim(1);
        const int64_t d = state.dim(2);
        Tensor scale = layer.an_scale;
        Tensor bias = layer.an_bias;
        for (int64_t c = 0; c < d; ++c) {
          double mean = 0;
          for (int64_t r = 0; r < rows; ++r) mean += state.data()[r * d + c];
          mean /= static_cast<double>(rows);
          double var = 0;
          for (int64_t r = 0; r < rows; ++r) {
            const double dv = state.data()[r * d + c] - mean;
            var += dv * dv;
          }
          var /= static_cast<double>(rows);
          const double stddev = std::sqrt(var);
          if (stddev < 1e-6)
            throw NumericalError("actnorm init: degenerate channel variance");
          scale.raw()[c] = 1.0 / stddev;
          bias.raw()[c] = -mean / stddev;
        }
      }
      auto [next, inc] = layer.forward(state, src, ctx);
      state = next;
    }
    if (level + 1 < levels()) {
      const int64_t half = state.dim(1) / 2;
      state = slice(state, 1, half, state.dim(1) - half);
    }
  }
  actnorm_initialized_ = true;
}

GaussianPriorNet::GaussianPriorNet(ParamRegistry& reg, const std::string& prefix,
                                   const ModelConfig& cfg, Rng& rng)
    : d_model(cfg.d_model), d_latent(cfg.d_latent) {
  for (int i = 0; i < cfg.posterior_layers; ++i)
    blocks.emplace_back(reg, prefix + ".l" + std::to_string(i), cfg.d_model,
                        cfg.d_filter, cfg.heads, /*cross=*/true, rng);
  final_ln = LayerNorm(reg, prefix + ".final_ln", cfg.d_model);
  out = Linear(reg, prefix + ".out", cfg.d_model, 2 * cfg.d_latent, rng);
}

GaussianSequence GaussianPriorNet::forward(const EncodedSource& src, int64_t T,
                                           const EvalContext& ctx) const {
  Tensor x = tiled_positions_b(src.batch, T, d_model);
  if (ctx.training && ctx.dropout > 0) x = dropout(x, ctx.dropout, *ctx.rng, true);
  for (const auto& blk : blocks) x = blk.forward(x, &src.hidden, Tensor(), ctx);
  x = final_ln.forward(x);
  Tensor stats = out.forward(x);
  Tensor mu = slice(stats, 2, 0, d_latent);
  Tensor sigma = sigma_link(slice(stats, 2, d_latent, d_latent));
  return {mu, sigma};
}

Tensor Prior::log_density(const EncodedSource& src, const Tensor& z,
                          const EvalContext& ctx) const {
  if (kind == PriorKind::gaussian)
    return gaussian_log_density(gauss.forward(src, z.dim(1), ctx), z);
  return flow.log_density(src, z, ctx);
}

Tensor Prior::sample(const EncodedSource& src, int64_t T, Rng& rng,
                     const EvalContext& ctx) const {
  if (kind == PriorKind::gaussian) {
    GaussianSequence p = gauss.forward(src, T, ctx);
    Tensor eps = Tensor::randn({src.batch, T, p.mu.dim(2)}, rng);
    return gaussian_sample(p, eps);
  }
  return flow.sample(src, T, rng, ctx);
}

Tensor Prior::mean(const EncodedSource& src, int64_t T,
                   const EvalContext& ctx) const {
  if (kind == PriorKind::gaussian) return gauss.forward(src, T, ctx).mu;
  return flow.mean(src, T, ctx);
}

GaussianSequence Prior::gaussian_params(const EncodedSource& src, int64_t T,
                                        const EvalContext& ctx) const {
  if (kind != PriorKind::gaussian)
    throw Error("gaussian_params on a non-gaussian prior");
  return gauss.forward(src, T, ctx);
}

}  // namespace seqdens
