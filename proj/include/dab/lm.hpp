#pragma once
// Tiny trainable autoregressive LM: 2-block causal self-attention, tied
// input/output embedding table, learned positions, hand-written forward and
// backward. Small enough that every gradient is auditable against finite
// differences, big enough to behave like a language model on the synthetic
// corpus. No external math libraries on purpose: byte determinism across
// machines matters more here than speed.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dab/numeric.hpp"

namespace dab {

class Vocabulary {
 public:
  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    require(tokens_.size() >= 2, "Vocabulary: need at least 2 tokens");
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      const std::string& t = tokens_[i];
      require(!t.empty(), "Vocabulary: empty token");
      for (char c : t)
        require(!std::isspace(static_cast<unsigned char>(c)),
                "Vocabulary: token contains whitespace: '" + t + "'");
      auto [it, fresh] = index_.emplace(t, static_cast<std::int32_t>(i));
      (void)it;
      require(fresh, "Vocabulary: duplicate token: '" + t + "'");
    }
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(std::int32_t id) const {
    require(id >= 0 && static_cast<std::size_t>(id) < tokens_.size(), "Vocabulary: id out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }
  std::optional<std::int32_t> find(std::string_view t) const {
    auto it = index_.find(std::string(t));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  std::int32_t id(std::string_view t) const {
    auto r = find(t);
    require(r.has_value(), "Vocabulary: unknown token: '" + std::string(t) + "'");
    return *r;
  }
  const std::vector<std::string>& tokens() const { return tokens_; }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

struct LMConfig {
  std::size_t embed_dim = 64;
  std::size_t heads = 4;
  std::size_t mlp_hidden = 256;
  std::size_t blocks = 2;
  std::size_t context = 64;

  friend bool operator==(const LMConfig&, const LMConfig&) = default;
};

struct Block {
  Matrix wq, wk, wv, wo;       // d x d, right-multiplying row vectors
  RealVec ln1_gain, ln1_bias;  // d
  Matrix w1;                   // d x m
  RealVec b1;                  // m
  Matrix w2;                   // m x d
  RealVec b2;                  // d
  RealVec ln2_gain, ln2_bias;  // d
};

// Parameter bundle. Fields are public: training, serialization and the test
// fixtures all poke at them directly. Immutable by convention once handed to
// samplers (shared across chains).
struct LMBundle {
  Vocabulary vocab;
  LMConfig config;
  Matrix embed;  // |V| x d; also the output head (tied) and the bias map table
  Matrix pos;    // context x d
  std::vector<Block> blocks;
  RealVec lnf_gain, lnf_bias;

  // all-zero weights: logits come out exactly zero -> uniform next-token law
  LMBundle(Vocabulary v, const LMConfig& cfg) : vocab(std::move(v)), config(cfg) {
    require(cfg.embed_dim > 0 && cfg.heads > 0 && cfg.blocks > 0 && cfg.context > 0 &&
                cfg.mlp_hidden > 0,
            "LMConfig: all dimensions must be positive");
    require(cfg.embed_dim % cfg.heads == 0, "LMConfig: heads must divide embed_dim");
    const std::size_t d = cfg.embed_dim, m = cfg.mlp_hidden;
    embed = Matrix(vocab.size(), d);
    pos = Matrix(cfg.context, d);
    blocks.resize(cfg.blocks);
    for (auto& b : blocks) {
      b.wq = b.wk = b.wv = b.wo = Matrix(d, d);
      b.ln1_gain.assign(d, 0.0);
      b.ln1_bias.assign(d, 0.0);
      b.w1 = Matrix(d, m);
      b.b1.assign(m, 0.0);
      b.w2 = Matrix(m, d);
      b.b2.assign(d, 0.0);
      b.ln2_gain.assign(d, 0.0);
      b.ln2_bias.assign(d, 0.0);
    }
    lnf_gain.assign(d, 0.0);
    lnf_bias.assign(d, 0.0);
  }

  static LMBundle initialized(Vocabulary v, const LMConfig& cfg, Rng& rng, double scale = 0.02) {
    LMBundle b(std::move(v), cfg);
    auto fill = [&](Matrix& m) {
      for (double& x : m.data()) x = rng.next_gaussian() * scale;
    };
    fill(b.embed);
    fill(b.pos);
    for (auto& blk : b.blocks) {
      fill(blk.wq);
      fill(blk.wk);
      fill(blk.wv);
      fill(blk.wo);
      fill(blk.w1);
      fill(blk.w2);
      blk.ln1_gain.assign(cfg.embed_dim, 1.0);
      blk.ln2_gain.assign(cfg.embed_dim, 1.0);
    }
    b.lnf_gain.assign(cfg.embed_dim, 1.0);
    return b;
  }
};

// Single walk over every trainable buffer, in a fixed order.  The optimizer,
// the gradient container and the weight file all derive their parameter
// lists from this one function so they cannot disagree about order.
// Matrices visit with their true shape; flat vectors visit as 1 x n.
template <class Fn>
inline void visit_params(LMBundle& b, Fn&& fn) {
  auto mat = [&](const std::string& name, Matrix& m) {
    fn(name, std::span<double>(m.data()), m.rows(), m.cols());
  };
  auto vec = [&](const std::string& name, RealVec& v) {
    fn(name, std::span<double>(v), std::size_t{1}, v.size());
  };
  mat("embed", b.embed);
  mat("pos", b.pos);
  for (std::size_t l = 0; l < b.blocks.size(); ++l) {
    auto& blk = b.blocks[l];
    std::string p = "blk" + std::to_string(l) + ".";
    mat(p + "wq", blk.wq);
    mat(p + "wk", blk.wk);
    mat(p + "wv", blk.wv);
    mat(p + "wo", blk.wo);
    vec(p + "ln1_gain", blk.ln1_gain);
    vec(p + "ln1_bias", blk.ln1_bias);
    mat(p + "w1", blk.w1);
    vec(p + "b1", blk.b1);
    mat(p + "w2", blk.w2);
    vec(p + "b2", blk.b2);
    vec(p + "ln2_gain", blk.ln2_gain);
    vec(p + "ln2_bias", blk.ln2_bias);
  }
  vec("lnf_gain", b.lnf_gain);
  vec("lnf_bias", b.lnf_bias);
}

inline std::vector<std::pair<std::string, std::span<double>>> param_views(LMBundle& b) {
  std::vector<std::pair<std::string, std::span<double>>> out;
  visit_params(b, [&](const std::string& name, std::span<double> s, std::size_t, std::size_t) {
    out.emplace_back(name, s);
  });
  return out;
}

namespace detail {

constexpr double kLnEps = 1e-5;

// out_j = sum_i v_i * W(i,j)
inline void vec_mat(std::span<const double> v, const Matrix& w, std::span<double> out) {
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double vi = v[i];
    if (vi == 0.0) continue;
    auto row = w.row(i);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += vi * row[j];
  }
}

// d_in_i = sum_j d_out_j * W(i,j)
inline void vec_mat_bwd_input(std::span<const double> d_out, const Matrix& w,
                              std::span<double> d_in_accum) {
  for (std::size_t i = 0; i < d_in_accum.size(); ++i) d_in_accum[i] += dot(w.row(i), d_out);
}

// dW(i,j) += in_i * d_out_j
inline void vec_mat_bwd_weight(std::span<const double> in, std::span<const double> d_out,
                               Matrix& dw) {
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double vi = in[i];
    if (vi == 0.0) continue;
    auto row = dw.row(i);
    for (std::size_t j = 0; j < d_out.size(); ++j) row[j] += vi * d_out[j];
  }
}

inline void layer_norm(std::span<const double> x, const RealVec& gain, const RealVec& bias,
                       std::span<double> out, double& mu, double& rstd) {
  const std::size_t d = x.size();
  mu = 0.0;
  for (double v : x) mu += v;
  mu /= static_cast<double>(d);
  double var = 0.0;
  for (double v : x) {
    const double c = v - mu;
    var += c * c;
  }
  var /= static_cast<double>(d);
  rstd = 1.0 / std::sqrt(var + kLnEps);
  for (std::size_t i = 0; i < d; ++i) out[i] = gain[i] * (x[i] - mu) * rstd + bias[i];
}

inline void layer_norm_bwd(std::span<const double> x, double mu, double rstd, const RealVec& gain,
                           std::span<const double> d_out, RealVec& d_gain, RealVec& d_bias,
                           std::span<double> d_x_accum) {
  const std::size_t d = x.size();
  double s1 = 0.0, s2 = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double xhat = (x[i] - mu) * rstd;
    const double g = d_out[i] * gain[i];
    s1 += g;
    s2 += g * xhat;
    d_gain[i] += d_out[i] * xhat;
    d_bias[i] += d_out[i];
  }
  const double inv_d = 1.0 / static_cast<double>(d);
  for (std::size_t i = 0; i < d; ++i) {
    const double xhat = (x[i] - mu) * rstd;
    d_x_accum[i] += rstd * (d_out[i] * gain[i] - s1 * inv_d - xhat * s2 * inv_d);
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline double gelu(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

// Teacher-forced activations for a whole sequence; kept around for backward.
struct Scratch {
  std::size_t T = 0;
  Matrix x0;  // T x d
  struct BlockScratch {
    Matrix ln1_out;  // T x d
    RealVec ln1_mu, ln1_rstd;
    Matrix q, k, v;           // T x d
    std::vector<Matrix> att;  // heads of T x T causal softmax rows
    Matrix att_mix;           // T x d (heads concatenated, pre-wo)
    Matrix x_mid;             // after attention residual
    Matrix ln2_out;
    RealVec ln2_mu, ln2_rstd;
    Matrix mlp_pre, mlp_act;  // T x m
    Matrix x_out;             // after mlp residual
  };
  std::vector<BlockScratch> blocks;
  Matrix lnf_out;  // T x d
  RealVec lnf_mu, lnf_rstd;
  Matrix logits;  // T x |V|
};

inline void forward_full(const LMBundle& b, const TokenSeq& tokens, Scratch& s) {
  const std::size_t T = tokens.size();
  const auto& cfg = b.config;
  const std::size_t d = cfg.embed_dim, H = cfg.heads, hd = d / H, m = cfg.mlp_hidden;
  require(T >= 1, "forward: empty sequence");
  require(T <= cfg.context, "forward: sequence exceeds context length");
  for (auto t : tokens)
    require(t >= 0 && static_cast<std::size_t>(t) < b.vocab.size(), "forward: token out of range");

  s.T = T;
  s.x0 = Matrix(T, d);
  for (std::size_t t = 0; t < T; ++t) {
    auto e = b.embed.row(static_cast<std::size_t>(tokens[t]));
    auto p = b.pos.row(t);
    auto x = s.x0.row(t);
    for (std::size_t i = 0; i < d; ++i) x[i] = e[i] + p[i];
  }

  s.blocks.assign(cfg.blocks, {});
  Matrix x = s.x0;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  for (std::size_t l = 0; l < cfg.blocks; ++l) {
    const Block& blk = b.blocks[l];
    auto& bs = s.blocks[l];
    bs.ln1_out = Matrix(T, d);
    bs.ln1_mu.assign(T, 0.0);
    bs.ln1_rstd.assign(T, 0.0);
    bs.q = bs.k = bs.v = Matrix(T, d);
    bs.att.assign(H, Matrix(T, T));
    bs.att_mix = Matrix(T, d);
    for (std::size_t t = 0; t < T; ++t) {
      layer_norm(x.row(t), blk.ln1_gain, blk.ln1_bias, bs.ln1_out.row(t), bs.ln1_mu[t],
                 bs.ln1_rstd[t]);
      vec_mat(bs.ln1_out.row(t), blk.wq, bs.q.row(t));
      vec_mat(bs.ln1_out.row(t), blk.wk, bs.k.row(t));
      vec_mat(bs.ln1_out.row(t), blk.wv, bs.v.row(t));
    }
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t off = h * hd;
        // causal scores over u <= t, stabilized softmax
        double mx = -std::numeric_limits<double>::infinity();
        RealVec sc(t + 1);
        for (std::size_t u = 0; u <= t; ++u) {
          double acc = 0.0;
          auto qr = bs.q.row(t), kr = bs.k.row(u);
          for (std::size_t i = 0; i < hd; ++i) acc += qr[off + i] * kr[off + i];
          sc[u] = acc * scale;
          mx = std::max(mx, sc[u]);
        }
        double z = 0.0;
        for (std::size_t u = 0; u <= t; ++u) {
          sc[u] = std::exp(sc[u] - mx);
          z += sc[u];
        }
        auto arow = bs.att[h].row(t);
        auto orow = bs.att_mix.row(t);
        for (std::size_t u = 0; u <= t; ++u) {
          const double p = sc[u] / z;
          arow[u] = p;
          auto vr = bs.v.row(u);
          for (std::size_t i = 0; i < hd; ++i) orow[off + i] += p * vr[off + i];
        }
      }
    }
    bs.x_mid = Matrix(T, d);
    RealVec tmp(d);
    for (std::size_t t = 0; t < T; ++t) {
      vec_mat(bs.att_mix.row(t), blk.wo, tmp);
      auto xm = bs.x_mid.row(t);
      auto xr = x.row(t);
      for (std::size_t i = 0; i < d; ++i) xm[i] = xr[i] + tmp[i];
    }
    bs.ln2_out = Matrix(T, d);
    bs.ln2_mu.assign(T, 0.0);
    bs.ln2_rstd.assign(T, 0.0);
    bs.mlp_pre = Matrix(T, m);
    bs.mlp_act = Matrix(T, m);
    bs.x_out = Matrix(T, d);
    RealVec back(d);
    for (std::size_t t = 0; t < T; ++t) {
      layer_norm(bs.x_mid.row(t), blk.ln2_gain, blk.ln2_bias, bs.ln2_out.row(t), bs.ln2_mu[t],
                 bs.ln2_rstd[t]);
      auto pre = bs.mlp_pre.row(t);
      vec_mat(bs.ln2_out.row(t), blk.w1, pre);
      for (std::size_t i = 0; i < m; ++i) pre[i] += blk.b1[i];
      auto act = bs.mlp_act.row(t);
      for (std::size_t i = 0; i < m; ++i) act[i] = gelu(pre[i]);
      vec_mat(act, blk.w2, back);
      auto xo = bs.x_out.row(t);
      auto xm = bs.x_mid.row(t);
      for (std::size_t i = 0; i < d; ++i) xo[i] = xm[i] + back[i] + blk.b2[i];
    }
    x = bs.x_out;
  }

  s.lnf_out = Matrix(T, d);
  s.lnf_mu.assign(T, 0.0);
  s.lnf_rstd.assign(T, 0.0);
  s.logits = Matrix(T, b.vocab.size());
  for (std::size_t t = 0; t < T; ++t) {
    layer_norm(x.row(t), b.lnf_gain, b.lnf_bias, s.lnf_out.row(t), s.lnf_mu[t], s.lnf_rstd[t]);
    auto lr = s.logits.row(t);
    for (std::size_t j = 0; j < b.vocab.size(); ++j) lr[j] = dot(s.lnf_out.row(t), b.embed.row(j));
  }
}

// Backward through the whole stack from per-position logit gradients.
// grads (same shape as the bundle) and d_inputs (T x d, gradient w.r.t. the
// position-summed input embeddings) are both optional.
inline void backward_full(const LMBundle& b, const TokenSeq& tokens, const Scratch& s,
                          const Matrix& d_logits, LMBundle* grads, Matrix* d_inputs) {
  const auto& cfg = b.config;
  const std::size_t T = s.T, d = cfg.embed_dim, H = cfg.heads, hd = d / H, m = cfg.mlp_hidden;
  require(d_logits.rows() == T && d_logits.cols() == b.vocab.size(),
          "backward: d_logits shape mismatch");

  // logits(t,j) = lnf_out(t) . embed(j)
  Matrix d_lnf_out(T, d);
  for (std::size_t t = 0; t < T; ++t) {
    auto dl = d_logits.row(t);
    auto dy = d_lnf_out.row(t);
    for (std::size_t j = 0; j < b.vocab.size(); ++j) {
      const double g = dl[j];
      if (g == 0.0) continue;
      auto e = b.embed.row(j);
      for (std::size_t i = 0; i < d; ++i) dy[i] += g * e[i];
      if (grads) {
        auto ge = grads->embed.row(j);
        auto y = s.lnf_out.row(t);
        for (std::size_t i = 0; i < d; ++i) ge[i] += g * y[i];
      }
    }
  }

  const Matrix& x_last = cfg.blocks ? s.blocks.back().x_out : s.x0;
  Matrix d_x(T, d);
  {
    RealVec dummy_gain(d), dummy_bias(d);
    RealVec& dg = grads ? grads->lnf_gain : dummy_gain;
    RealVec& db = grads ? grads->lnf_bias : dummy_bias;
    for (std::size_t t = 0; t < T; ++t)
      layer_norm_bwd(x_last.row(t), s.lnf_mu[t], s.lnf_rstd[t], b.lnf_gain, d_lnf_out.row(t), dg,
                     db, d_x.row(t));
  }

  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  for (std::size_t l = cfg.blocks; l-- > 0;) {
    const Block& blk = b.blocks[l];
    const auto& bs = s.blocks[l];
    Block* gb = grads ? &grads->blocks[l] : nullptr;

    // mlp residual: x_out = x_mid + act.w2 + b2
    Matrix d_x_mid = d_x;  // residual branch
    Matrix d_act(T, m);
    for (std::size_t t = 0; t < T; ++t) {
      auto dxo = d_x.row(t);
      if (gb) {
        for (std::size_t i = 0; i < d; ++i) gb->b2[i] += dxo[i];
        vec_mat_bwd_weight(bs.mlp_act.row(t), dxo, gb->w2);
      }
      vec_mat_bwd_input(dxo, blk.w2, d_act.row(t));
    }
    Matrix d_ln2(T, d);
    for (std::size_t t = 0; t < T; ++t) {
      auto da = d_act.row(t);
      auto pre = bs.mlp_pre.row(t);
      RealVec d_pre(m);
      for (std::size_t i = 0; i < m; ++i) d_pre[i] = da[i] * gelu_grad(pre[i]);
      if (gb) {
        for (std::size_t i = 0; i < m; ++i) gb->b1[i] += d_pre[i];
        vec_mat_bwd_weight(bs.ln2_out.row(t), d_pre, gb->w1);
      }
      vec_mat_bwd_input(d_pre, blk.w1, d_ln2.row(t));
    }
    {
      RealVec local_gain(d), local_bias(d);
      RealVec& dg = gb ? gb->ln2_gain : local_gain;
      RealVec& db = gb ? gb->ln2_bias : local_bias;
      for (std::size_t t = 0; t < T; ++t)
        layer_norm_bwd(bs.x_mid.row(t), bs.ln2_mu[t], bs.ln2_rstd[t], blk.ln2_gain, d_ln2.row(t),
                       dg, db, d_x_mid.row(t));
    }

    // attention residual: x_mid = x_in + att_mix.wo
    Matrix d_mix(T, d);
    for (std::size_t t = 0; t < T; ++t) {
      if (gb) vec_mat_bwd_weight(bs.att_mix.row(t), d_x_mid.row(t), gb->wo);
      vec_mat_bwd_input(d_x_mid.row(t), blk.wo, d_mix.row(t));
    }
    Matrix d_q(T, d), d_k(T, d), d_v(T, d);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t off = h * hd;
        auto arow = bs.att[h].row(t);
        auto dm = d_mix.row(t);
        // d_p_u = d_mix_h . v_u ; softmax backward ; fan out to q,k,v
        RealVec dp(t + 1);
        double inner = 0.0;
        for (std::size_t u = 0; u <= t; ++u) {
          double acc = 0.0;
          auto vr = bs.v.row(u);
          for (std::size_t i = 0; i < hd; ++i) acc += dm[off + i] * vr[off + i];
          dp[u] = acc;
          inner += arow[u] * acc;
          auto dvr = d_v.row(u);
          for (std::size_t i = 0; i < hd; ++i) dvr[off + i] += arow[u] * dm[off + i];
        }
        auto qrow = bs.q.row(t);
        auto dqr = d_q.row(t);
        for (std::size_t u = 0; u <= t; ++u) {
          const double ds = arow[u] * (dp[u] - inner) * scale;
          if (ds == 0.0) continue;
          auto kr = bs.k.row(u);
          auto dkr = d_k.row(u);
          for (std::size_t i = 0; i < hd; ++i) {
            dqr[off + i] += ds * kr[off + i];
            dkr[off + i] += ds * qrow[off + i];
          }
        }
      }
    }
    Matrix d_ln1(T, d);
    for (std::size_t t = 0; t < T; ++t) {
      if (gb) {
        vec_mat_bwd_weight(bs.ln1_out.row(t), d_q.row(t), gb->wq);
        vec_mat_bwd_weight(bs.ln1_out.row(t), d_k.row(t), gb->wk);
        vec_mat_bwd_weight(bs.ln1_out.row(t), d_v.row(t), gb->wv);
      }
      vec_mat_bwd_input(d_q.row(t), blk.wq, d_ln1.row(t));
      vec_mat_bwd_input(d_k.row(t), blk.wk, d_ln1.row(t));
      vec_mat_bwd_input(d_v.row(t), blk.wv, d_ln1.row(t));
    }
    const Matrix& x_in = (l == 0) ? s.x0 : s.blocks[l - 1].x_out;
    {
      RealVec local_gain(d), local_bias(d);
      RealVec& dg = gb ? gb->ln1_gain : local_gain;
      RealVec& db = gb ? gb->ln1_bias : local_bias;
      for (std::size_t t = 0; t < T; ++t)
        layer_norm_bwd(x_in.row(t), bs.ln1_mu[t], bs.ln1_rstd[t], blk.ln1_gain, d_ln1.row(t), dg,
                       db, d_x_mid.row(t));
    }
    d_x = std::move(d_x_mid);
  }

  if (d_inputs) *d_inputs = d_x;
  if (grads) {
    for (std::size_t t = 0; t < T; ++t) {
      auto dx = d_x.row(t);
      auto ge = grads->embed.row(static_cast<std::size_t>(tokens[t]));
      auto gp = grads->pos.row(t);
      for (std::size_t i = 0; i < d; ++i) {
        ge[i] += dx[i];
        gp[i] += dx[i];
      }
    }
  }
}

}  // namespace detail

// Incremental decode cache. Holds per-block K/V rows for every processed
// prefix position; appended tokens are only run through the network when
// logits are actually requested.
class PrefixState {
 public:
  explicit PrefixState(const LMBundle& bundle, OpCounters* counters = nullptr)
      : bundle_(&bundle), counters_(counters) {
    const auto& cfg = bundle.config;
    k_.assign(cfg.blocks, Matrix(cfg.context, cfg.embed_dim));
    v_.assign(cfg.blocks, Matrix(cfg.context, cfg.embed_dim));
  }

  void set_counters(OpCounters* c) { counters_ = c; }

  void append(std::int32_t token) {
    require(token >= 0 && static_cast<std::size_t>(token) < bundle_->vocab.size(),
            "PrefixState: token out of range");
    require(tokens_.size() < bundle_->config.context, "PrefixState: context overflow");
    tokens_.push_back(token);
  }
  void append(const TokenSeq& toks) {
    for (auto t : toks) append(t);
  }

  std::size_t length() const { return tokens_.size(); }
  const TokenSeq& tokens() const { return tokens_; }
  const LMBundle& bundle() const { return *bundle_; }

  // Logits over the next position, advancing the cache through any pending
  // tokens. One public call = one counted LM forward.
  RealVec next_logits() {
    require(!tokens_.empty(), "next_logits: empty prefix (prepend a start token)");
    require(tokens_.size() < bundle_->config.context,
            "next_logits: prefix already fills the context window");
    if (counters_) counters_->lm_forward += 1;
    while (processed_ < tokens_.size()) step_one(tokens_[processed_]);
    RealVec logits(bundle_->vocab.size());
    for (std::size_t j = 0; j < logits.size(); ++j)
      logits[j] = dot(std::span<const double>(last_top_), bundle_->embed.row(j));
    return logits;
  }

 private:
  void step_one(std::int32_t token) {
    const LMBundle& b = *bundle_;
    const auto& cfg = b.config;
    const std::size_t d = cfg.embed_dim, H = cfg.heads, hd = d / H, m = cfg.mlp_hidden;
    const std::size_t t = processed_;
    require(t < cfg.context, "PrefixState: context overflow");

    RealVec x(d);
    {
      auto e = b.embed.row(static_cast<std::size_t>(token));
      auto p = b.pos.row(t);
      for (std::size_t i = 0; i < d; ++i) x[i] = e[i] + p[i];
    }
    RealVec ln(d), q(d), tmp(d);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (std::size_t l = 0; l < cfg.blocks; ++l) {
      const Block& blk = b.blocks[l];
      double mu, rstd;
      detail::layer_norm(x, blk.ln1_gain, blk.ln1_bias, ln, mu, rstd);
      detail::vec_mat(ln, blk.wq, q);
      detail::vec_mat(ln, blk.wk, k_[l].row(t));
      detail::vec_mat(ln, blk.wv, v_[l].row(t));
      RealVec mix(d, 0.0);
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t off = h * hd;
        double mx = -std::numeric_limits<double>::infinity();
        RealVec sc(t + 1);
        for (std::size_t u = 0; u <= t; ++u) {
          double acc = 0.0;
          auto kr = k_[l].row(u);
          for (std::size_t i = 0; i < hd; ++i) acc += q[off + i] * kr[off + i];
          sc[u] = acc * scale;
          mx = std::max(mx, sc[u]);
        }
        double z = 0.0;
        for (std::size_t u = 0; u <= t; ++u) {
          sc[u] = std::exp(sc[u] - mx);
          z += sc[u];
        }
        for (std::size_t u = 0; u <= t; ++u) {
          const double p = sc[u] / z;
          auto vr = v_[l].row(u);
          for (std::size_t i = 0; i < hd; ++i) mix[off + i] += p * vr[off + i];
        }
      }
      detail::vec_mat(mix, blk.wo, tmp);
      for (std::size_t i = 0; i < d; ++i) x[i] += tmp[i];
      double mu2, rstd2;
      detail::layer_norm(x, blk.ln2_gain, blk.ln2_bias, ln, mu2, rstd2);
      RealVec pre(m);
      detail::vec_mat(ln, blk.w1, pre);
      for (std::size_t i = 0; i < m; ++i) pre[i] = detail::gelu(pre[i] + blk.b1[i]);
      detail::vec_mat(pre, blk.w2, tmp);
      for (std::size_t i = 0; i < d; ++i) x[i] += tmp[i] + blk.b2[i];
    }
    double mu, rstd;
    last_top_.assign(d, 0.0);
    detail::layer_norm(x, b.lnf_gain, b.lnf_bias, last_top_, mu, rstd);
    ++processed_;
  }

  const LMBundle* bundle_;
  OpCounters* counters_;
  TokenSeq tokens_;
  std::size_t processed_ = 0;
  std::vector<Matrix> k_, v_;
  RealVec last_top_;
};

inline RealVec next_logits(const LMBundle& bundle, PrefixState& state) {
  require(&bundle == &state.bundle(), "next_logits: state built for a different bundle");
  return state.next_logits();
}

inline double log_softmax_at(const RealVec& logits, std::int32_t idx) {
  require(idx >= 0 && static_cast<std::size_t>(idx) < logits.size(), "log_softmax_at: bad index");
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  return logits[static_cast<std::size_t>(idx)] - (mx + std::log(z));
}

// Sum over response positions of log P(y_i | prompt, y_<i). One teacher-forced
// forward pass.
inline double sequence_log_likelihood(const LMBundle& bundle, const TokenSeq& prompt,
                                      const TokenSeq& response, OpCounters* counters = nullptr) {
  require(!prompt.empty(), "sequence_log_likelihood: empty prompt (prepend a start token)");
  require(!response.empty(), "sequence_log_likelihood: empty response");
  require(prompt.size() + response.size() <= bundle.config.context,
          "sequence_log_likelihood: context overflow");
  TokenSeq all = prompt;
  all.insert(all.end(), response.begin(), response.end());
  detail::Scratch s;
  detail::forward_full(bundle, all, s);
  if (counters) counters->lm_forward += 1;
  double ll = 0.0;
  for (std::size_t i = 0; i < response.size(); ++i)
    ll += log_softmax_at(s.logits.row_vec(prompt.size() - 1 + i), response[i]);
  return ll;
}

inline double perplexity(const LMBundle& bundle, const TokenSeq& prompt, const TokenSeq& response,
                         OpCounters* counters = nullptr) {
  const double ll = sequence_log_likelihood(bundle, prompt, response, counters);
  return std::exp(-ll / static_cast<double>(response.size()));
}

// Counted wrapper used by the continuous baseline: one teacher-forced
// backward through the stack, returning d(loss)/d(input embedding sums).
inline Matrix lm_backward_inputs(const LMBundle& bundle, const TokenSeq& tokens,
                                 const Matrix& d_logits, OpCounters* counters = nullptr,
                                 detail::Scratch* precomputed = nullptr) {
  detail::Scratch local;
  detail::Scratch* s = precomputed ? precomputed : &local;
  if (!precomputed) {
    detail::forward_full(bundle, tokens, *s);
    if (counters) counters->lm_forward += 1;
  }
  Matrix d_inputs;
  detail::backward_full(bundle, tokens, *s, d_logits, nullptr, &d_inputs);
  if (counters) counters->lm_backward += 1;
  return d_inputs;
}

// --- training ----------------------------------------------------------------

struct TrainConfig {
  LMConfig model;
  std::size_t steps = 1500;
  std::size_t batch = 6;
  // full-width models (64 vocab, d=64) diverge above ~0.3; 0.06 gave the best
  // held-out perplexity on the stock synthetic corpus
  double lr = 0.06;
  double lr_final = 0.006;   // linear decay endpoint
  double grad_clip = 1.0;    // global-norm clip
  double init_scale = 0.02;
};

struct TrainStats {
  double final_loss = 0.0;
  double holdout_perplexity = 0.0;
  std::size_t holdout_sequences = 0;
};

namespace detail {

// mean cross-entropy of next-token prediction over one [start]+sequence pass;
// accumulates parameter gradients scaled by 1/total_targets.
inline double train_pass(const LMBundle& b, const TokenSeq& seq, double inv_targets,
                         LMBundle& grads) {
  Scratch s;
  forward_full(b, seq, s);
  const std::size_t T = seq.size();
  Matrix d_logits(T, b.vocab.size());
  double loss = 0.0;
  std::size_t targets = 0;
  for (std::size_t t = 0; t + 1 < T; ++t) {
    const std::int32_t y = seq[t + 1];
    RealVec lg = s.logits.row_vec(t);
    const double lsm = log_softmax_at(lg, y);
    loss += -lsm;
    ++targets;
    // d_logits = softmax - onehot, scaled
    double mx = lg[0];
    for (double v : lg) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : lg) z += std::exp(v - mx);
    auto dl = d_logits.row(t);
    for (std::size_t j = 0; j < lg.size(); ++j) dl[j] = std::exp(lg[j] - mx) / z * inv_targets;
    dl[static_cast<std::size_t>(y)] -= inv_targets;
  }
  backward_full(b, seq, s, d_logits, &grads, nullptr);
  return loss / static_cast<double>(targets ? targets : 1);
}

}  // namespace detail

// Held-out perplexity: exp of mean next-token cross-entropy over all held-out
// positions (sequence-length weighted).
inline double corpus_perplexity(const LMBundle& b, const std::vector<TokenSeq>& seqs,
                                std::int32_t start_token) {
  double ce = 0.0;
  std::size_t n = 0;
  for (const auto& seq : seqs) {
    if (seq.empty()) continue;
    const double ll = sequence_log_likelihood(b, {start_token}, seq);
    ce += -ll;
    n += seq.size();
  }
  require(n > 0, "corpus_perplexity: no scorable tokens");
  return std::exp(ce / static_cast<double>(n));
}

// Plain SGD with linear learning-rate decay and global-norm clipping. Start
// token is prepended to every sequence so position 0 always predicts the first
// content token. Throws on divergence; enforces the held-out-beats-uniform
// contract before returning.
inline LMBundle train_tiny_lm(const std::vector<TokenSeq>& corpus, const Vocabulary& vocab,
                              std::int32_t start_token, const TrainConfig& cfg, Rng& rng,
                              TrainStats* stats = nullptr) {
  require(!corpus.empty(), "train_tiny_lm: empty corpus");
  for (const auto& seq : corpus) {
    require(!seq.empty(), "train_tiny_lm: empty sequence in corpus");
    require(seq.size() + 1 <= cfg.model.context, "train_tiny_lm: sequence exceeds context");
    for (auto t : seq)
      require(t >= 0 && static_cast<std::size_t>(t) < vocab.size(),
              "train_tiny_lm: token outside vocabulary");
  }

  // every 10th sequence held out; tiny corpora reuse the whole corpus
  std::vector<TokenSeq> train_set, holdout;
  if (corpus.size() >= 10) {
    for (std::size_t i = 0; i < corpus.size(); ++i)
      (i % 10 == 9 ? holdout : train_set).push_back(corpus[i]);
  } else {
    train_set = corpus;
    holdout = corpus;
  }

  LMBundle b = LMBundle::initialized(vocab, cfg.model, rng, cfg.init_scale);
  LMBundle grads(vocab, cfg.model);

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    for (auto& [name, span] : param_views(grads)) {
      (void)name;
      std::fill(span.begin(), span.end(), 0.0);
    }
    // count targets across the batch first so the loss is a proper mean
    std::vector<const TokenSeq*> batch;
    std::size_t total_targets = 0;
    for (std::size_t k = 0; k < cfg.batch; ++k) {
      const auto& seq = train_set[rng.next_u64() % train_set.size()];
      batch.push_back(&seq);
      total_targets += seq.size();  // [start]+seq has seq.size() targets
    }
    double loss = 0.0;
    for (const TokenSeq* seq : batch) {
      TokenSeq full;
      full.reserve(seq->size() + 1);
      full.push_back(start_token);
      full.insert(full.end(), seq->begin(), seq->end());
      loss += detail::train_pass(b, full, 1.0 / static_cast<double>(total_targets), grads) *
              static_cast<double>(seq->size());
    }
    loss /= static_cast<double>(total_targets);
    if (!std::isfinite(loss))
      throw std::runtime_error("train_tiny_lm: loss diverged (non-finite) at step " +
                               std::to_string(step));

    double sq = 0.0;
    for (auto& [name, span] : param_views(grads)) {
      (void)name;
      for (double g : span) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    const double clip = (cfg.grad_clip > 0 && norm > cfg.grad_clip) ? cfg.grad_clip / norm : 1.0;
    const double frac = cfg.steps > 1 ? static_cast<double>(step) / static_cast<double>(cfg.steps - 1) : 0.0;
    const double lr = cfg.lr + (cfg.lr_final - cfg.lr) * frac;

    auto pv = param_views(b);
    auto gv = param_views(grads);
    for (std::size_t i = 0; i < pv.size(); ++i) {
      auto p = pv[i].second;
      auto g = gv[i].second;
      for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr * clip * g[j];
    }
    if (stats && step + 1 == cfg.steps) stats->final_loss = loss;
  }

  const double hppl = corpus_perplexity(b, holdout, start_token);
  if (!(hppl < static_cast<double>(vocab.size())))
    throw std::runtime_error("train_tiny_lm: held-out perplexity " + std::to_string(hppl) +
                             " did not beat uniform " + std::to_string(vocab.size()));
  if (stats) {
    stats->holdout_perplexity = hppl;
    stats->holdout_sequences = holdout.size();
  }
  return b;
}

}  // namespace dab
