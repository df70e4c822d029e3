#pragma once

// discrete autoregressive biasing: alternate between (a) biased greedy
// decoding of a response Y under a per-position penalty built from a bias
// token sequence B, and (b) a single gradient-guided categorical update of B.
// the constraint gradient is taken w.r.t. the one-hot relaxation of B, so a
// whole sweep costs n decoder forwards and one constraint backward — the
// decoder itself is never differentiated.

#include "dab/constraints.hpp"
#include "dab/lm.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

namespace dab {

// entry (i,j) = squared embedding distance between bias token b_i and vocab
// token j; row i has an exact zero at column b_i
using BiasMatrix = Matrix;

struct SamplerConfig {
  std::size_t steps = 20;
  std::size_t length = 12;
  double tau = 0.1;
  std::size_t topk = 250;  // clamped to |V| at the point of use
  double weight = 1.05;
  std::uint64_t seed = 0;
  bool timing = false;  // wall_clock_us stays 0 unless enabled (reproducible bytes)

  void validate() const {
    require(steps >= 1, "SamplerConfig: steps must be >= 1");
    require(length >= 1, "SamplerConfig: length must be >= 1");
    require(std::isfinite(tau) && tau > 0.0, "SamplerConfig: tau must be positive");
    require(topk >= 1, "SamplerConfig: topk must be >= 1");
    require(std::isfinite(weight) && weight >= 0.0, "SamplerConfig: weight must be >= 0");
  }
};

struct TraceStep {
  std::size_t step = 0;  // 1-based sweep index
  TokenSeq response;     // Y for this sweep
  TokenSeq bias_before;  // B = Y (scored state)
  TokenSeq bias_after;   // B' (post-proposal; feeds the next sweep's penalty)
  double f_value = 0.0;
  double best_f = 0.0;
  std::size_t hops = 0;  // positions changed vs the previous sweep's response
  double perplexity = 0.0;
  std::uint64_t lm_forwards = 0;  // per-sweep deltas, not cumulative
  std::uint64_t lm_backwards = 0;
  std::uint64_t constraint_backwards = 0;
  std::uint64_t wall_clock_us = 0;
};

struct SamplerTrace {
  std::vector<TraceStep> steps;
};

struct GibbsState {
  TokenSeq response;
  TokenSeq bias_tokens;
  BiasMatrix bias;
  TokenSeq best;
  double best_f = -std::numeric_limits<double>::infinity();
};

struct DabResult {
  TokenSeq best;
  double best_f = 0.0;
  SamplerTrace trace;
};

inline BiasMatrix bias_vectors(const TokenSeq& bias_tokens, const Matrix& embeddings) {
  const std::size_t vocab = embeddings.rows();
  const std::size_t dim = embeddings.cols();
  BiasMatrix out(bias_tokens.size(), vocab);
  for (std::size_t i = 0; i < bias_tokens.size(); ++i) {
    require(bias_tokens[i] >= 0 && static_cast<std::size_t>(bias_tokens[i]) < vocab,
            "bias_vectors: token out of range");
    auto bi = embeddings.row(static_cast<std::size_t>(bias_tokens[i]));
    for (std::size_t j = 0; j < vocab; ++j) {
      auto vj = embeddings.row(j);
      double sq = 0.0;
      for (std::size_t dd = 0; dd < dim; ++dd) {
        const double diff = bi[dd] - vj[dd];
        sq += diff * diff;
      }
      out(i, j) = sq;
    }
    out(i, static_cast<std::size_t>(bias_tokens[i])) = 0.0;  // exact, not just tiny
  }
  return out;
}

// penalty scale: ratio of logit norm to penalty-row norm; a zero penalty row
// would divide by zero and contributes nothing anyway, so it maps to 1
inline double normalizer(std::span<const double> y_logits, std::span<const double> bias_row) {
  const double bn = l2_norm(bias_row);
  if (bn == 0.0) return 1.0;
  return l2_norm(y_logits) / bn;
}

inline std::size_t biased_argmax(std::span<const double> y_logits,
                                 std::span<const double> bias_row, double w_i, double r_i) {
  require(y_logits.size() == bias_row.size() && !y_logits.empty(),
          "biased_argmax: length mismatch");
  std::size_t arg = 0;
  double best = y_logits[0] - w_i * r_i * bias_row[0];
  for (std::size_t j = 1; j < y_logits.size(); ++j) {
    const double s = y_logits[j] - w_i * r_i * bias_row[j];
    if (s > best) {  // strict: ties keep the lowest index
      best = s;
      arg = j;
    }
  }
  return arg;
}

inline double weight_schedule(double w, std::size_t t, std::size_t length) {
  require(length >= 1 && t < length, "weight_schedule: position out of range");
  return w * (1.0 - static_cast<double>(t) / static_cast<double>(length));
}

struct GenerateResult {
  TokenSeq tokens;
  std::vector<RealVec> logits;  // raw decoder logits per position, pre-penalty
};

// greedy decoding of n tokens under the additive penalty; returns the raw
// logits so the caller can reuse them (top-k sets, perplexity, normalizer
// audits) without further decoder calls
inline GenerateResult generate_biased(const LMBundle& bundle, const TokenSeq& prompt,
                                      const BiasMatrix& bias, const SamplerConfig& config,
                                      OpCounters* counters = nullptr) {
  config.validate();
  const std::size_t n = config.length;
  const std::size_t vocab = bundle.vocab.size();
  require(bias.rows() == n && bias.cols() == vocab,
          "generate_biased: bias shape must be length x vocab");
  require(!prompt.empty(), "generate_biased: prompt must be nonempty");
  require(prompt.size() + n <= bundle.config.context, "generate_biased: context overflow");

  GenerateResult out;
  out.tokens.reserve(n);
  out.logits.reserve(n);

  PrefixState state(bundle, counters);
  state.append(prompt);
  for (std::size_t i = 0; i < n; ++i) {
    // the working logit vector is the log-probability vector: the penalty is
    // norm-matched against it, and raw network outputs carry an arbitrary
    // softmax-invariant offset that would make the normalizer meaningless
    RealVec y = log_softmax(state.next_logits());
    auto brow = bias.row(i);
    const double r = normalizer(y, brow);
    const double w = weight_schedule(config.weight, i, n);
    const std::size_t pick = biased_argmax(y, brow, w, r);
    out.tokens.push_back(static_cast<std::int32_t>(pick));
    out.logits.push_back(std::move(y));
    if (i + 1 < n) state.append(out.tokens.back());
  }
  return out;
}

// per position: the k highest-logit tokens under the recorded decoder logits,
// plus that position's current token; sets come back sorted ascending
inline std::vector<std::vector<std::int32_t>> topk_mask(const std::vector<RealVec>& logits,
                                                        std::size_t k, const TokenSeq& current) {
  require(!logits.empty() && logits.size() == current.size(),
          "topk_mask: logits/current length mismatch");
  const std::size_t vocab = logits[0].size();
  require(k >= 1 && k <= vocab, "topk_mask: k out of range");

  std::vector<std::vector<std::int32_t>> sets(logits.size());
  std::vector<std::int32_t> order(vocab);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const RealVec& y = logits[i];
    require(y.size() == vocab, "topk_mask: ragged logits");
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::int32_t a, std::int32_t b) {
                        if (y[static_cast<std::size_t>(a)] != y[static_cast<std::size_t>(b)])
                          return y[static_cast<std::size_t>(a)] > y[static_cast<std::size_t>(b)];
                        return a < b;  // deterministic under ties
                      });
    auto& set = sets[i];
    set.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    require(current[i] >= 0 && static_cast<std::size_t>(current[i]) < vocab,
            "topk_mask: current token out of range");
    set.push_back(current[i]);
    std::sort(set.begin(), set.end());
    set.erase(std::unique(set.begin(), set.end()), set.end());
  }
  return sets;
}

// softmax exponents for one position's categorical update: (1/tau) * grad,
// with the current token's exponent pinned to exactly 0 — staying put must
// cost nothing regardless of the gradient's value there
inline RealVec proposal_exponents(std::span<const double> grad_row, std::int32_t current,
                                  double tau, const std::vector<std::int32_t>& allowed) {
  require(tau > 0.0, "proposal_exponents: tau must be positive");
  require(!allowed.empty(), "proposal_exponents: empty allowed set");
  RealVec e(allowed.size());
  for (std::size_t a = 0; a < allowed.size(); ++a) {
    const auto j = allowed[a];
    require(j >= 0 && static_cast<std::size_t>(j) < grad_row.size(),
            "proposal_exponents: allowed index out of range");
    e[a] = (j == current) ? 0.0 : grad_row[static_cast<std::size_t>(j)] / tau;
  }
  return e;
}

// full-vocabulary distribution for one position; entries off the allowed set
// are exactly zero
inline ProbVec dlp_distribution(std::span<const double> grad_row, std::int32_t current,
                                double tau, const std::vector<std::int32_t>& allowed) {
  RealVec e = proposal_exponents(grad_row, current, tau, allowed);
  ProbVec local = softmax(e, 1.0);
  RealVec full(grad_row.size(), 0.0);
  for (std::size_t a = 0; a < allowed.size(); ++a)
    full[static_cast<std::size_t>(allowed[a])] = local[a];
  return ProbVec(std::move(full));
}

// one categorical draw per position, positions in ascending order, one
// uniform each; positions are independent
inline TokenSeq dlp_propose(const OneHotSeq& current, const GradMatrix& grad, double tau,
                            const std::vector<std::vector<std::int32_t>>& allowed, Rng& rng) {
  const TokenSeq cur = current.to_tokens();
  require(grad.rows() == cur.size() && grad.cols() == current.m.cols(),
          "dlp_propose: gradient shape mismatch");
  require(allowed.size() == cur.size(), "dlp_propose: mask length mismatch");
  TokenSeq out(cur.size());
  for (std::size_t i = 0; i < cur.size(); ++i) {
    ProbVec dist = dlp_distribution(grad.row(i), cur[i], tau, allowed[i]);
    out[i] = static_cast<std::int32_t>(sample_categorical(dist, rng));
  }
  return out;
}

namespace detail {

// mean negative log-likelihood of the chosen tokens under the recorded raw
// logits; no extra decoder work
inline double perplexity_from_logits(const std::vector<RealVec>& logits, const TokenSeq& tokens) {
  require(!logits.empty() && logits.size() == tokens.size(),
          "perplexity_from_logits: length mismatch");
  double nll = 0.0;
  for (std::size_t i = 0; i < tokens.size(); ++i) nll -= log_softmax_at(logits[i], tokens[i]);
  return std::exp(nll / static_cast<double>(tokens.size()));
}

inline std::size_t hamming(const TokenSeq& a, const TokenSeq& b) {
  require(a.size() == b.size(), "hamming: length mismatch");
  std::size_t h = 0;
  for (std::size_t i = 0; i < a.size(); ++i) h += a[i] != b[i];
  return h;
}

}  // namespace detail

inline DabResult run_dab(const LMBundle& bundle, const ConstraintHandle& constraint,
                         const TokenSeq& prompt, const SamplerConfig& config,
                         OpCounters* counters = nullptr) {
  config.validate();
  const std::size_t vocab = bundle.vocab.size();
  const std::size_t k = std::min(config.topk, vocab);
  Rng rng(config.seed);

  OpCounters local;
  OpCounters* oc = counters ? counters : &local;

  GibbsState gs;
  gs.bias = BiasMatrix(config.length, vocab);  // all-zero penalty: first sweep is greedy

  DabResult out;
  out.best_f = -std::numeric_limits<double>::infinity();
  out.trace.steps.reserve(config.steps);

  TokenSeq prev_response;
  using clock = std::chrono::steady_clock;

  for (std::size_t t = 1; t <= config.steps; ++t) {
    const OpCounters before = *oc;
    const auto tick = config.timing ? clock::now() : clock::time_point{};

    GenerateResult gen = generate_biased(bundle, prompt, gs.bias, config, oc);
    gs.response = gen.tokens;
    gs.bias_tokens = gs.response;  // B <- Y
    const OneHotSeq bhat = OneHotSeq::from_tokens(gs.bias_tokens, vocab);

    const double f = constraint.value(bhat, prompt, oc);
    if (f > gs.best_f) {  // strict: the earliest of equal maxima wins
      gs.best_f = f;
      gs.best = gs.response;
    }

    const GradMatrix grad = constraint.gradient(bhat, prompt, oc);
    const auto mask = topk_mask(gen.logits, k, gs.bias_tokens);
    const TokenSeq proposed = dlp_propose(bhat, grad, config.tau, mask, rng);
    gs.bias = bias_vectors(proposed, bundle.embed);

    TraceStep ts;
    ts.step = t;
    ts.response = gs.response;
    ts.bias_before = gs.bias_tokens;
    ts.bias_after = proposed;
    ts.f_value = f;
    ts.best_f = gs.best_f;
    ts.hops = prev_response.empty() ? 0 : detail::hamming(gs.response, prev_response);
    ts.perplexity = detail::perplexity_from_logits(gen.logits, gs.response);
    ts.lm_forwards = oc->lm_forward - before.lm_forward;
    ts.lm_backwards = oc->lm_backward - before.lm_backward;
    ts.constraint_backwards = oc->constraint_backward - before.constraint_backward;
    if (config.timing)
      ts.wall_clock_us = static_cast<std::uint64_t>(
          std::chrono::duration_cast<std::chrono::microseconds>(clock::now() - tick).count());
    out.trace.steps.push_back(std::move(ts));

    prev_response = gs.response;
  }

  out.best = gs.best;
  out.best_f = gs.best_f;
  return out;
}

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string join_tokens(const TokenSeq& toks) {
  std::string s;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (i) s += ' ';
    s += std::to_string(toks[i]);
  }
  return s;
}

}  // namespace detail

// one row per sweep; token sequences are space-joined ids so the file is
// self-contained. bias_tokens is the post-proposal sequence B' (the
// pre-proposal B equals response_tokens and would be redundant).
inline void write_trace_csv(const std::string& path, const SamplerTrace& trace) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "step,f_value,best_f,hops,perplexity,lm_forward_count,"
         "constraint_backward_count,wall_clock_us,response_tokens,bias_tokens\n";
  for (const TraceStep& ts : trace.steps) {
    out << ts.step << ',' << detail::format_double(ts.f_value) << ','
        << detail::format_double(ts.best_f) << ',' << ts.hops << ','
        << detail::format_double(ts.perplexity) << ',' << ts.lm_forwards << ','
        << ts.constraint_backwards << ',' << ts.wall_clock_us << ','
        << detail::join_tokens(ts.response) << ',' << detail::join_tokens(ts.bias_after) << '\n';
  }
  if (!out) throw std::runtime_error("short write: " + path);
}

}  // namespace dab
