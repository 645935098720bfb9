#include "seqdens/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "seqdens/error.hpp"
#include "seqdens/version.hpp"

namespace seqdens {

namespace {

// Per-sentence totals grouped by (src_len, padded_len) so teacher forcing
// runs batched.
std::map<std::pair<int64_t, int64_t>, std::vector<size_t>> length_buckets(
    const std::vector<SequencePair>& pairs) {
  std::map<std::pair<int64_t, int64_t>, std::vector<size_t>> buckets;
  for (size_t i = 0; i < pairs.size(); ++i)
    buckets[{static_cast<int64_t>(pairs[i].source.size()),
             pairs[i].padded_target_len()}]
        .push_back(i);
  return buckets;
}

void finalize_estimate(LLEstimate* est) {
  double ll_sum = 0;
  int64_t tok_sum = 0;
  std::vector<double> per_tok;
  per_tok.reserve(est->per_sentence.size());
  for (size_t i = 0; i < est->per_sentence.size(); ++i) {
    ll_sum += est->per_sentence[i];
    tok_sum += est->token_counts[i];
    per_tok.push_back(est->per_sentence[i] /
                      static_cast<double>(est->token_counts[i]));
  }
  est->mean_per_token = ll_sum / static_cast<double>(tok_sum);
  if (per_tok.size() > 1) {
    double m = 0;
    for (double v : per_tok) m += v;
    m /= static_cast<double>(per_tok.size());
    double var = 0;
    for (double v : per_tok) var += (v - m) * (v - m);
    var /= static_cast<double>(per_tok.size() - 1);
    est->std_error = std::sqrt(var / static_cast<double>(per_tok.size()));
  }
}

}  // namespace

LLEstimate ar_test_ll(const ArModel& model,
                      const std::vector<SequencePair>& pairs) {
  NoGradGuard ng;
  LLEstimate est;
  est.samples = 1;
  est.per_sentence.resize(pairs.size());
  est.token_counts.resize(pairs.size());
  for (const auto& [key, idx] : length_buckets(pairs)) {
    TokenRows src, tgt;
    for (size_t i : idx) {
      src.push_back(pairs[i].source);
      tgt.push_back(pairs[i].target);
    }
    EncodedSource enc = model.encode(src, EvalContext::eval());
    Tensor lp = model.per_token_log_probs(enc, tgt, EvalContext::eval());
    Tensor totals = sum_axis(lp, 1);
    for (size_t k = 0; k < idx.size(); ++k) {
      est.per_sentence[idx[k]] = totals.data()[k];
      est.token_counts[idx[k]] = pairs[idx[k]].counted_tokens();
    }
  }
  finalize_estimate(&est);
  est.std_error = 0.0;  // exact per sentence
  return est;
}

double importance_sample_ll(std::span<const double> log_joint,
                            std::span<const double> log_q) {
  if (log_joint.size() != log_q.size() || log_joint.empty())
    throw Error("importance_sample_ll: need equal, nonzero sample counts");
  const size_t S = log_joint.size();
  double mx = -HUGE_VAL;
  std::vector<double> lw(S);
  for (size_t s = 0; s < S; ++s) {
    lw[s] = log_joint[s] - log_q[s];
    mx = std::max(mx, lw[s]);
  }
  double acc = 0;
  for (size_t s = 0; s < S; ++s) acc += std::exp(lw[s] - mx);
  return mx + std::log(acc) - std::log(static_cast<double>(S));
}

LLEstimate lvm_test_ll(const LvmModel& model,
                       const std::vector<SequencePair>& pairs, int64_t S,
                       uint64_t seed) {
  if (S < 1) throw Error("lvm_test_ll: S must be >= 1");
  NoGradGuard ng;
  LLEstimate est;
  est.samples = S;
  est.per_sentence.resize(pairs.size());
  est.token_counts.resize(pairs.size());
  Rng master(seed);
  const int64_t dl = model.config().d_latent;
  for (size_t i = 0; i < pairs.size(); ++i) {
    const auto& pair = pairs[i];
    const int64_t T = pair.padded_target_len();
    EncodedSource enc = model.encode({pair.source}, EvalContext::eval());
    GaussianSequence q =
        model.posterior_params(enc, {pair.target}, EvalContext::eval());
    // degenerate posterior: sigma pinned at the link floor everywhere
    bool degenerate = true;
    for (double sv : q.sigma.data())
      if (sv > 1.1e-3) {
        degenerate = false;
        break;
      }
    if (degenerate) est.degenerate_q_warning = true;

    // S reparameterized samples, batched through decoder and prior.
    Rng rng = master.split();
    Tensor eps = Tensor::randn({S, T, dl}, rng);
    auto tile = [&](const Tensor& t) {
      std::vector<double> data;
      data.reserve(static_cast<size_t>(S) * t.size());
      for (int64_t s = 0; s < S; ++s)
        data.insert(data.end(), t.data().begin(), t.data().end());
      return Tensor::from_data({S, T, dl}, std::move(data));
    };
    GaussianSequence q_tiled{tile(q.mu), tile(q.sigma)};
    Tensor z = gaussian_sample(q_tiled, eps);
    std::vector<double> src_hidden;
    for (int64_t s = 0; s < S; ++s)
      src_hidden.insert(src_hidden.end(), enc.hidden.data().begin(),
                        enc.hidden.data().end());
    EncodedSource enc_tiled{
        Tensor::from_data({S, enc.len, enc.hidden.dim(2)}, std::move(src_hidden)),
        S, enc.len};
    Tensor logits = model.decode_logits(enc_tiled, z, EvalContext::eval());
    Tensor lp = log_softmax(logits, -1);
    std::vector<int64_t> flat;
    flat.reserve(static_cast<size_t>(S) * T);
    for (int64_t s = 0; s < S; ++s)
      flat.insert(flat.end(), pair.target.begin(), pair.target.end());
    Tensor recon = sum_axis(gather_last(lp, flat), 1);             // (S)
    Tensor prior_ld = model.prior().log_density(enc_tiled, z,
                                                EvalContext::eval());  // (S)
    Tensor q_ld = gaussian_log_density(q_tiled, z);                 // (S)
    std::vector<double> log_joint(static_cast<size_t>(S)), log_q(static_cast<size_t>(S));
    for (int64_t s = 0; s < S; ++s) {
      log_joint[s] = recon.data()[s] + prior_ld.data()[s];
      log_q[s] = q_ld.data()[s];
    }
    est.per_sentence[i] = importance_sample_ll(log_joint, log_q);
    est.token_counts[i] = pair.counted_tokens();
  }
  finalize_estimate(&est);
  return est;
}

// ---------------------------------------------------------------------------
// BLEU

namespace {

constexpr int kMaxNgram = 4;

std::map<std::vector<int64_t>, int64_t> ngram_counts(
    const std::vector<int64_t>& tokens, int n) {
  std::map<std::vector<int64_t>, int64_t> counts;
  if (static_cast<int>(tokens.size()) < n) return counts;
  for (size_t i = 0; i + n <= tokens.size(); ++i)
    counts[std::vector<int64_t>(tokens.begin() + i, tokens.begin() + i + n)] += 1;
  return counts;
}

}  // namespace

double bleu(const std::vector<std::vector<int64_t>>& hypotheses,
            const std::vector<std::vector<std::vector<int64_t>>>& references) {
  if (hypotheses.empty())
    throw NumericalError("bleu: empty hypothesis set has no defined score");
  if (hypotheses.size() != references.size())
    throw Error("bleu: hypothesis/reference count mismatch");
  int64_t correct[kMaxNgram] = {0, 0, 0, 0};
  int64_t total[kMaxNgram] = {0, 0, 0, 0};
  int64_t hyp_len = 0, ref_len = 0;
  for (size_t i = 0; i < hypotheses.size(); ++i) {
    const auto& hyp = hypotheses[i];
    const auto& refs = references[i];
    if (refs.empty()) throw Error("bleu: sentence without references");
    hyp_len += static_cast<int64_t>(hyp.size());
    // closest reference length; ties toward the shorter reference
    int64_t closest = static_cast<int64_t>(refs[0].size());
    for (const auto& r : refs) {
      const int64_t rl = static_cast<int64_t>(r.size());
      const int64_t d_new = std::llabs(rl - static_cast<int64_t>(hyp.size()));
      const int64_t d_old = std::llabs(closest - static_cast<int64_t>(hyp.size()));
      if (d_new < d_old || (d_new == d_old && rl < closest)) closest = rl;
    }
    ref_len += closest;
    for (int n = 1; n <= kMaxNgram; ++n) {
      auto hyp_counts = ngram_counts(hyp, n);
      std::map<std::vector<int64_t>, int64_t> max_ref;
      for (const auto& r : refs)
        for (const auto& [gram, c] : ngram_counts(r, n))
          max_ref[gram] = std::max(max_ref[gram], c);
      for (const auto& [gram, c] : hyp_counts) {
        total[n - 1] += c;
        auto it = max_ref.find(gram);
        if (it != max_ref.end()) correct[n - 1] += std::min(c, it->second);
      }
    }
  }
  if (total[0] == 0)
    throw NumericalError("bleu: hypotheses contain no tokens");
  if (correct[0] == 0) return 0.0;
  double log_prec = std::log(static_cast<double>(correct[0]) /
                             static_cast<double>(total[0]));
  for (int n = 2; n <= kMaxNgram; ++n)
    log_prec += std::log(static_cast<double>(correct[n - 1] + 1) /
                         static_cast<double>(total[n - 1] + 1));
  const double bp =
      hyp_len < ref_len
          ? std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len))
          : 1.0;
  return 100.0 * bp * std::exp(log_prec / kMaxNgram);
}

double pairwise_bleu(
    const std::vector<std::vector<std::vector<int64_t>>>& candidate_sets) {
  if (candidate_sets.empty()) throw Error("pairwise_bleu: no candidate sets");
  double acc = 0;
  for (const auto& cands : candidate_sets) {
    if (cands.size() < 2)
      throw Error("pairwise_bleu: needs at least 2 candidates per source");
    double source_acc = 0;
    int64_t pairs = 0;
    for (size_t i = 0; i < cands.size(); ++i)
      for (size_t j = 0; j < cands.size(); ++j) {
        if (i == j) continue;
        source_acc += bleu({cands[i]}, {{cands[j]}});
        ++pairs;
      }
    acc += source_acc / static_cast<double>(pairs);
  }
  return acc / static_cast<double>(candidate_sets.size());
}

// ---------------------------------------------------------------------------
// Correlations

double pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw Error("pearson: length mismatch");
  const size_t n = xs.size();
  if (n < 3) throw NumericalError("pearson: needs at least 3 points");
  double mx = 0, my = 0;
  for (size_t i = 0; i < n; ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < n; ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0)
    throw NumericalError("pearson: undefined for zero variance");
  return sxy / std::sqrt(sxx * syy);
}

namespace {

std::vector<double> average_ranks(std::span<const double> xs) {
  const size_t n = xs.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(std::span<const double> xs, std::span<const double> ys) {
  auto rx = average_ranks(xs);
  auto ry = average_ranks(ys);
  return pearson(rx, ry);
}

std::vector<CorrelationRow> correlation_report(
    const std::vector<CorrelationSeries>& series, bool across_families) {
  std::vector<CorrelationRow> rows;
  for (const auto& s : series) {
    CorrelationRow row;
    row.group = s.group;
    row.n = static_cast<int>(s.log_likelihood.size());
    try {
      row.r = pearson(s.log_likelihood, s.bleu_score);
      row.rho = spearman(s.log_likelihood, s.bleu_score);
    } catch (const NumericalError& e) {
      row.skipped = true;
      row.note = e.what();
    }
    rows.push_back(std::move(row));
  }
  if (across_families) {
    // Flag pairs of groups whose final-model LL ranking disagrees with the
    // BLEU ranking.
    CorrelationRow summary;
    summary.group = "across-family";
    std::ostringstream notes;
    std::vector<std::pair<double, double>> finals;
    for (const auto& s : series) {
      if (s.log_likelihood.empty()) continue;
      finals.emplace_back(s.log_likelihood.back(), s.bleu_score.back());
    }
    summary.n = static_cast<int>(finals.size());
    int disagreements = 0;
    for (size_t i = 0; i < finals.size(); ++i)
      for (size_t j = i + 1; j < finals.size(); ++j) {
        const double dll = finals[i].first - finals[j].first;
        const double dbleu = finals[i].second - finals[j].second;
        if (dll * dbleu < 0) {
          ++disagreements;
          notes << series[i].group << " vs " << series[j].group
                << ": LL and BLEU rankings disagree; ";
        }
      }
    if (finals.size() >= 3) {
      std::vector<double> lls, bleus;
      for (auto& [ll, bl] : finals) {
        lls.push_back(ll);
        bleus.push_back(bl);
      }
      try {
        summary.r = pearson(lls, bleus);
        summary.rho = spearman(lls, bleus);
      } catch (const NumericalError& e) {
        summary.skipped = true;
        summary.note = e.what();
      }
    } else {
      summary.skipped = true;
      summary.note = "fewer than 3 models";
    }
    if (disagreements > 0) summary.note += notes.str();
    rows.push_back(std::move(summary));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Speed

SpeedReport speed_benchmark(DensityEstimator& model, const TokenRows& inputs,
                            const GenSettings& settings, int repetitions) {
  if (repetitions < 5) repetitions = 5;
  SpeedReport rep;
  rep.sentences = static_cast<int64_t>(inputs.size());
  rep.repetitions = repetitions;
  // warmup run, excluded from timing
  for (const auto& src : inputs) generate(model, src, settings);
  model.reset_pass_count();
  for (const auto& src : inputs) generate(model, src, settings);
  rep.decoder_passes = model.pass_count();
  std::vector<double> times;
  for (int r = 0; r < repetitions; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    for (const auto& src : inputs) generate(model, src, settings);
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  std::sort(times.begin(), times.end());
  const double median = times[times.size() / 2];
  rep.sentences_per_second = static_cast<double>(inputs.size()) / median;
  std::ostringstream env;
  env << "cpu single-thread; compiler " <<
#if defined(__clang__)
      "clang " << __clang_major__
#elif defined(__GNUC__)
      "gcc " << __GNUC__
#else
      "unknown"
#endif
      << "; suite " << kSuiteVersion;
  rep.environment = env.str();
  return rep;
}

void export_latents(const LvmModel& model, const SequencePair& pair, int n,
                    uint64_t seed, const std::string& path, int refine_k) {
  NoGradGuard ng;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << "# latent samples; suite " << kSuiteVersion << "\n";
  out << "# tag\tvalues (T*d, row-major)\n";
  EncodedSource enc = model.encode({pair.source}, EvalContext::eval());
  const int64_t T = pair.padded_target_len();
  Rng rng(seed);
  auto write_row = [&](const char* tag, const Tensor& z) {
    out << tag;
    out.precision(17);
    for (double v : z.data()) out << "\t" << v;
    out << "\n";
  };
  for (int i = 0; i < n; ++i)
    write_row("prior", model.prior().sample(enc, T, rng, EvalContext::eval()));
  GaussianSequence q =
      model.posterior_params(enc, {pair.target}, EvalContext::eval());
  for (int i = 0; i < n; ++i) {
    Tensor eps = Tensor::randn({1, T, model.config().d_latent}, rng);
    write_row("posterior", gaussian_sample(q, eps));
  }
  IterativeResult res =
      iterative_inference(model, pair.source, refine_k, T);
  write_row("delta", res.trace.steps.back().mu);
}

}  // namespace seqdens
