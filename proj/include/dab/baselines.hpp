#pragma once

// comparison arms and exact oracles: a continuous bias sampler that keeps its
// bias in embedding space and follows the constraint gradient through a
// straight-through relaxation of the decode, a plain greedy decoder, a scalar
// energy for scoring sequences, and a brute-force joint enumerator for tiny
// instances where everything can be checked by summation.

#include "dab/sampler.hpp"

#include <cmath>
#include <map>

namespace dab {

struct ContinuousBiasState {
  Matrix bias;      // n x d, starts at zero
  double gamma;     // step size
  double sigma;     // gaussian noise scale
  RealVec weights;  // per-position decayed weight, fixed over the run
};

struct ContinuousParams {
  double gamma = 0.1;
  double sigma = 0.01;
  bool use_normalizer = true;
};

inline ContinuousBiasState make_continuous_state(std::size_t length, std::size_t embed_dim,
                                                 double base_weight, double gamma, double sigma) {
  require(std::isfinite(gamma) && gamma >= 0.0, "continuous bias: gamma must be >= 0");
  require(std::isfinite(sigma) && sigma >= 0.0, "continuous bias: sigma must be >= 0");
  ContinuousBiasState st;
  st.bias = Matrix(length, embed_dim);
  st.gamma = gamma;
  st.sigma = sigma;
  st.weights.resize(length);
  for (std::size_t i = 0; i < length; ++i)
    st.weights[i] = weight_schedule(base_weight, i, length);
  return st;
}

// ascent step: bias += gamma * grad + sigma * noise. noise is drawn
// elementwise in row-major order; sigma == 0 draws nothing, so the update is
// exactly bias + gamma * grad
inline ContinuousBiasState continuous_bias_step(const ContinuousBiasState& state,
                                                const Matrix& grad, Rng& rng) {
  require(grad.rows() == state.bias.rows() && grad.cols() == state.bias.cols(),
          "continuous_bias_step: gradient shape mismatch");
  for (double g : grad.data()) require(std::isfinite(g), "continuous_bias_step: non-finite grad");
  ContinuousBiasState next = state;
  for (std::size_t i = 0; i < next.bias.rows(); ++i)
    for (std::size_t j = 0; j < next.bias.cols(); ++j) {
      double upd = state.gamma * grad(i, j);
      if (state.sigma != 0.0) upd += state.sigma * rng.next_gaussian();
      next.bias(i, j) += upd;
    }
  return next;
}

struct ContinuousGenerateResult {
  TokenSeq tokens;
  std::vector<RealVec> logits;  // raw decoder logits, pre-bias
  std::vector<RealVec> biased;  // logits + scale * (b_i M^T), what the argmax saw
  RealVec scale;                // per position: w_i, or w_i * r_i when normalized
};

// autoregressive argmax over logits plus an additive bias row projected from
// embedding space; the optional normalizer rescales the bias row to the logit
// norm (ratio 1 when the projected row has zero norm)
inline ContinuousGenerateResult continuous_bias_generate(const LMBundle& bundle,
                                                         const TokenSeq& prompt,
                                                         const ContinuousBiasState& state,
                                                         bool use_normalizer,
                                                         OpCounters* counters = nullptr) {
  const std::size_t n = state.bias.rows();
  const std::size_t vocab = bundle.vocab.size();
  require(state.bias.cols() == bundle.config.embed_dim,
          "continuous_bias_generate: bias width must equal the embedding dim");
  require(state.weights.size() == n, "continuous_bias_generate: weights length mismatch");
  require(!prompt.empty(), "continuous_bias_generate: prompt must be nonempty");
  require(prompt.size() + n <= bundle.config.context,
          "continuous_bias_generate: context overflow");

  ContinuousGenerateResult out;
  out.tokens.reserve(n);
  out.logits.reserve(n);
  out.biased.reserve(n);
  out.scale.resize(n);

  PrefixState st(bundle, counters);
  st.append(prompt);
  for (std::size_t i = 0; i < n; ++i) {
    // log-probability vector, matching the discrete sampler's working logits
    RealVec y = log_softmax(st.next_logits());

    RealVec brow(vocab);  // (b_i M^T)_j
    detail::vec_mat_bwd_input(state.bias.row(i), bundle.embed, brow);
    double scale = state.weights[i];
    if (use_normalizer) {
      const double bn = l2_norm(brow);
      scale *= bn == 0.0 ? 1.0 : l2_norm(y) / bn;
    }

    RealVec z(vocab);
    for (std::size_t j = 0; j < vocab; ++j) z[j] = y[j] + scale * brow[j];
    std::size_t arg = 0;
    for (std::size_t j = 1; j < vocab; ++j)
      if (z[j] > z[arg]) arg = j;

    out.tokens.push_back(static_cast<std::int32_t>(arg));
    out.logits.push_back(std::move(y));
    out.biased.push_back(std::move(z));
    out.scale[i] = scale;
    if (i + 1 < n) st.append(out.tokens.back());
  }
  return out;
}

namespace detail {

// pull a vocabulary-space direction back through the softmax at p:
// out = p .* (v - <v, p>)
inline RealVec softmax_pullback(const RealVec& p, const RealVec& v) {
  double inner = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) inner += v[j] * p[j];
  RealVec out(p.size());
  for (std::size_t j = 0; j < p.size(); ++j) out[j] = p[j] * (v[j] - inner);
  return out;
}

}  // namespace detail

// gradient of the constraint w.r.t. the continuous bias rows, using the soft
// relaxation of the decode: the constraint is differentiated at the softmax
// of the biased logits, pulled back through one teacher-forced decoder
// backward, and generated tokens feed back into later positions through
// their embedding rows (straight-through, single unroll)
inline Matrix continuous_bias_gradient(const LMBundle& bundle, const ConstraintHandle& constraint,
                                       const TokenSeq& prompt,
                                       const ContinuousGenerateResult& gen,
                                       OpCounters* counters = nullptr) {
  const std::size_t n = gen.tokens.size();
  const std::size_t vocab = bundle.vocab.size();
  const std::size_t P = prompt.size();

  std::vector<RealVec> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = softmax(gen.biased[i], 1.0).values();

  // constraint gradient at the soft prediction matrix
  OneHotSeq soft;
  soft.m = Matrix(n, vocab);
  for (std::size_t i = 0; i < n; ++i)
    std::copy(p[i].begin(), p[i].end(), soft.m.row(i).begin());
  GradMatrix g = constraint.gradient(soft, prompt, counters);

  std::vector<RealVec> dz(n);
  for (std::size_t i = 0; i < n; ++i) {
    RealVec gi(g.row(i).begin(), g.row(i).end());
    dz[i] = detail::softmax_pullback(p[i], gi);
  }

  // one teacher-forced backward: d(objective)/d(input embedding) per position
  TokenSeq full = prompt;
  full.insert(full.end(), gen.tokens.begin(), gen.tokens.end());
  Matrix d_logits(full.size(), vocab);
  for (std::size_t i = 0; i < n; ++i)
    std::copy(dz[i].begin(), dz[i].end(), d_logits.row(P - 1 + i).begin());
  Matrix d_inp = lm_backward_inputs(bundle, full, d_logits, counters);

  // token y_k entered the decoder as its embedding row at input position P+k;
  // treat that row as the soft mixture p_k M and push the input gradient back
  // onto the biased logits
  for (std::size_t k = 0; k < n; ++k) {
    RealVec v(vocab);
    detail::vec_mat_bwd_input(d_inp.row(P + k), bundle.embed, v);
    RealVec fb = detail::softmax_pullback(p[k], v);
    for (std::size_t j = 0; j < vocab; ++j) dz[k][j] += fb[j];
  }

  // chain through z_i = y_i + scale_i * (b_i M^T), scale held fixed
  Matrix grad_b(n, bundle.config.embed_dim);
  for (std::size_t i = 0; i < n; ++i) {
    RealVec gb(bundle.config.embed_dim);
    detail::vec_mat(dz[i], bundle.embed, gb);
    for (std::size_t d = 0; d < gb.size(); ++d) grad_b(i, d) = gen.scale[i] * gb[d];
  }
  return grad_b;
}

// mirror of run_dab for the continuous arm: same trace schema, same scoring
// (constraint value at the hard one-hot of the response), different mover.
// bias_before/bias_after both record the response tokens — the continuous
// state has no token-valued bias to log.
inline DabResult run_continuous(const LMBundle& bundle, const ConstraintHandle& constraint,
                                const TokenSeq& prompt, const SamplerConfig& config,
                                const ContinuousParams& params, OpCounters* counters = nullptr) {
  config.validate();
  const std::size_t vocab = bundle.vocab.size();
  Rng rng(config.seed);

  OpCounters local;
  OpCounters* oc = counters ? counters : &local;

  ContinuousBiasState state = make_continuous_state(config.length, bundle.config.embed_dim,
                                                    config.weight, params.gamma, params.sigma);

  DabResult out;
  out.best_f = -std::numeric_limits<double>::infinity();
  out.trace.steps.reserve(config.steps);

  TokenSeq prev_response;
  using clock = std::chrono::steady_clock;

  for (std::size_t t = 1; t <= config.steps; ++t) {
    const OpCounters before = *oc;
    const auto tick = config.timing ? clock::now() : clock::time_point{};

    ContinuousGenerateResult gen =
        continuous_bias_generate(bundle, prompt, state, params.use_normalizer, oc);

    const OneHotSeq hard = OneHotSeq::from_tokens(gen.tokens, vocab);
    const double f = constraint.value(hard, prompt, oc);
    if (f > out.best_f) {
      out.best_f = f;
      out.best = gen.tokens;
    }

    Matrix grad = continuous_bias_gradient(bundle, constraint, prompt, gen, oc);
    state = continuous_bias_step(state, grad, rng);

    TraceStep ts;
    ts.step = t;
    ts.response = gen.tokens;
    ts.bias_before = gen.tokens;
    ts.bias_after = gen.tokens;
    ts.f_value = f;
    ts.best_f = out.best_f;
    ts.hops = prev_response.empty() ? 0 : detail::hamming(gen.tokens, prev_response);
    ts.perplexity = detail::perplexity_from_logits(gen.logits, gen.tokens);
    ts.lm_forwards = oc->lm_forward - before.lm_forward;
    ts.lm_backwards = oc->lm_backward - before.lm_backward;
    ts.constraint_backwards = oc->constraint_backward - before.constraint_backward;
    if (config.timing)
      ts.wall_clock_us = static_cast<std::uint64_t>(
          std::chrono::duration_cast<std::chrono::microseconds>(clock::now() - tick).count());
    out.trace.steps.push_back(std::move(ts));

    prev_response = gen.tokens;
  }
  return out;
}

inline TokenSeq greedy_decode(const LMBundle& bundle, const TokenSeq& prompt, std::size_t n,
                              OpCounters* counters = nullptr) {
  require(n >= 1, "greedy_decode: n must be >= 1");
  require(!prompt.empty(), "greedy_decode: prompt must be nonempty");
  require(prompt.size() + n <= bundle.config.context, "greedy_decode: context overflow");
  PrefixState st(bundle, counters);
  st.append(prompt);
  TokenSeq out;
  for (std::size_t i = 0; i < n; ++i) {
    RealVec y = st.next_logits();
    std::size_t arg = 0;
    for (std::size_t j = 1; j < y.size(); ++j)
      if (y[j] > y[arg]) arg = j;  // ties keep the lowest index
    out.push_back(static_cast<std::int32_t>(arg));
    if (i + 1 < n) st.append(out.back());
  }
  return out;
}

// ---- scalar energy over complete sequences ----

struct EnergyParams {
  double lambda1 = 1.0;  // log-likelihood coefficient
  double lambda2 = 1.0;  // constraint coefficient
};

// zero-coefficient terms are skipped entirely, so e.g. lambda1 = 0 performs
// no decoder work at all
inline double energy(const EnergyParams& params, const LMBundle& bundle,
                     const ConstraintHandle& constraint, const TokenSeq& prompt,
                     const TokenSeq& y, OpCounters* counters = nullptr) {
  require(std::isfinite(params.lambda1) && std::isfinite(params.lambda2),
          "energy: coefficients must be finite");
  double e = 0.0;
  if (params.lambda1 != 0.0)
    e += params.lambda1 * sequence_log_likelihood(bundle, prompt, y, counters);
  if (params.lambda2 != 0.0)
    e += params.lambda2 *
         constraint.value(OneHotSeq::from_tokens(y, bundle.vocab.size()), prompt, counters);
  return e;
}

// ---- exact enumeration over a restricted vocabulary ----

struct JointEntry {
  TokenSeq y;
  TokenSeq b;
  double weight = 0.0;  // P(Y|B,X) * exp(f(B|X)), unnormalized
  double prob = 0.0;    // weight / Z
};

struct JointTable {
  std::vector<JointEntry> entries;  // lexicographic in (b, y)
  double z = 0.0;                   // sum of all weights
  double z_b = 0.0;                 // sum over B of exp(f(B))
  std::vector<TokenSeq> b_values;   // lexicographic
  RealVec b_exp_f;                  // exp(f(B)) per b_values entry
  RealVec b_marginal;               // sum over Y of prob, per b_values entry
};

namespace detail {

inline void enumerate_seqs(std::size_t m, std::size_t n, std::vector<TokenSeq>& out) {
  TokenSeq cur(n, 0);
  for (;;) {
    out.push_back(cur);
    std::size_t i = n;
    while (i > 0) {
      --i;
      if (static_cast<std::size_t>(++cur[i]) < m) break;
      cur[i] = 0;
      if (i == 0) return;
    }
  }
}

}  // namespace detail

// exact joint over (Y, B) pairs from the first m vocabulary ids. the
// conditional P(Y|B,X) is the softmax of the penalized logits restricted to
// those m ids (logits, penalty rows and norms all restricted), so it sums to
// one over the restricted space by construction and the B marginal of the
// normalized table is exp(f(B))/Z_B up to floating point.
inline JointTable enumerate_joint(const LMBundle& bundle, const ConstraintHandle& constraint,
                                  const TokenSeq& prompt, std::size_t n, std::size_t m,
                                  const SamplerConfig& config, OpCounters* counters = nullptr) {
  require(n >= 1, "enumerate_joint: n must be >= 1");
  require(m >= 2 && m <= bundle.vocab.size(), "enumerate_joint: bad restricted vocabulary size");
  require(!prompt.empty(), "enumerate_joint: prompt must be nonempty");
  require(prompt.size() + n <= bundle.config.context, "enumerate_joint: context overflow");
  double pairs = 1.0;
  for (std::size_t i = 0; i < 2 * n; ++i) {
    pairs *= static_cast<double>(m);
    require(pairs <= 1e7, "enumerate_joint: |V'|^2n exceeds the enumeration cap");
  }

  const std::size_t vocab = bundle.vocab.size();
  std::vector<TokenSeq> seqs;
  detail::enumerate_seqs(m, n, seqs);

  JointTable table;
  table.b_values = seqs;
  table.b_exp_f.reserve(seqs.size());
  table.entries.reserve(seqs.size() * seqs.size());

  for (const TokenSeq& b : seqs) {
    const OneHotSeq bhat = OneHotSeq::from_tokens(b, vocab);
    const double fb = constraint.value(bhat, prompt, counters);
    const double efb = std::exp(fb);
    table.b_exp_f.push_back(efb);
    table.z_b += efb;

    // restricted penalty rows for this bias sequence
    BiasMatrix full_bias = bias_vectors(b, bundle.embed);

    // log-prob of every restricted next token for every restricted prefix,
    // via depth-first recursion sharing the decoder cache
    std::map<TokenSeq, double> logp;  // complete sequences only
    struct Frame {
      TokenSeq y;
      double ll;
    };
    std::vector<Frame> stack = {{TokenSeq{}, 0.0}};
    while (!stack.empty()) {
      Frame fr = std::move(stack.back());
      stack.pop_back();
      if (fr.y.size() == n) {
        logp[fr.y] = fr.ll;
        continue;
      }
      const std::size_t i = fr.y.size();
      PrefixState st(bundle, counters);
      TokenSeq prefix = prompt;
      prefix.insert(prefix.end(), fr.y.begin(), fr.y.end());
      st.append(prefix);
      RealVec y = st.next_logits();
      RealVec yr(m), br(m);
      for (std::size_t j = 0; j < m; ++j) yr[j] = y[j];
      yr = log_softmax(yr);  // log-probs of the restricted world
      for (std::size_t j = 0; j < m; ++j) br[j] = full_bias(i, j);
      const double r = normalizer(yr, br);
      const double w = weight_schedule(config.weight, i, n);
      RealVec z(m);
      for (std::size_t j = 0; j < m; ++j) z[j] = yr[j] - w * r * br[j];
      // restricted log-softmax
      double mx = z[0];
      for (double v : z) mx = std::max(mx, v);
      double lse = 0.0;
      for (double v : z) lse += std::exp(v - mx);
      lse = mx + std::log(lse);
      for (std::size_t j = m; j-- > 0;) {
        Frame nx;
        nx.y = fr.y;
        nx.y.push_back(static_cast<std::int32_t>(j));
        nx.ll = fr.ll + (z[j] - lse);
        stack.push_back(std::move(nx));
      }
    }

    for (const TokenSeq& yv : seqs) {
      JointEntry e;
      e.y = yv;
      e.b = b;
      e.weight = std::exp(logp.at(yv)) * efb;
      table.z += e.weight;
      table.entries.push_back(std::move(e));
    }
  }

  require(table.z > 0.0 && std::isfinite(table.z), "enumerate_joint: degenerate partition sum");
  for (JointEntry& e : table.entries) e.prob = e.weight / table.z;

  table.b_marginal.assign(seqs.size(), 0.0);
  for (std::size_t bi = 0; bi < seqs.size(); ++bi)
    for (std::size_t yi = 0; yi < seqs.size(); ++yi)
      table.b_marginal[bi] += table.entries[bi * seqs.size() + yi].prob;
  return table;
}

inline void write_joint_csv(const std::string& path, const JointTable& table) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "y_tokens,b_tokens,weight,probability\n";
  for (const JointEntry& e : table.entries)
    out << detail::join_tokens(e.y) << ',' << detail::join_tokens(e.b) << ','
        << detail::format_double(e.weight) << ',' << detail::format_double(e.prob) << '\n';
  if (!out) throw std::runtime_error("short write: " + path);
}

}  // namespace dab
