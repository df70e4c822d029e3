#pragma once
// Differentiable constraint functions f over one-hot (or relaxed) token
// sequences, with hand-derived reverse-mode gradients. Two shipped kinds:
//   classifier — small trainable head over mean-pooled embedding rows,
//                scored as a class-logit difference (or log-softmax);
//   keyword    — smoothed unigram match: mean over keywords of a
//                log-sum-exp smoothmax across positions.
// Neither touches the language model: gradients here are cheap and exact,
// which is the whole point of sampling bias tokens in discrete space.

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "dab/numeric.hpp"

namespace dab {

// n x |V| matrix whose rows live on the probability simplex at rest. During
// finite-difference probing rows deliberately leave the simplex, so value()
// and gradient() accept any finite matrix; validate() checks the at-rest
// contract where a test wants it.
struct OneHotSeq {
  Matrix m;

  static OneHotSeq from_tokens(const TokenSeq& tokens, std::size_t vocab_size) {
    OneHotSeq o;
    o.m = Matrix(tokens.size(), vocab_size);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      require(tokens[i] >= 0 && static_cast<std::size_t>(tokens[i]) < vocab_size,
              "OneHotSeq: token out of range");
      o.m(i, static_cast<std::size_t>(tokens[i])) = 1.0;
    }
    return o;
  }

  TokenSeq to_tokens() const {
    TokenSeq out(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < m.cols(); ++j)
        if (m(i, j) > m(i, best)) best = j;
      out[i] = static_cast<std::int32_t>(best);
    }
    return out;
  }

  void validate() const {
    for (std::size_t i = 0; i < m.rows(); ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < m.cols(); ++j) {
        const double v = m(i, j);
        require(std::isfinite(v) && v >= 0.0, "OneHotSeq: entries must be finite and >= 0");
        sum += v;
      }
      require(std::abs(sum - 1.0) <= 1e-9, "OneHotSeq: rows must sum to 1 within 1e-9");
    }
  }
};

using GradMatrix = Matrix;

enum class ClassifierForm {
  logit_diff,   // f = z_pos - z_neg (unnormalized logit gap)
  log_softmax,  // f = log p(pos)
};

struct ClassifierHead {
  Matrix w1;   // d x hidden
  RealVec b1;  // hidden
  Matrix w2;   // hidden x 2, column 0 = negative class, column 1 = positive
  RealVec b2;  // 2
};

class ConstraintHandle {
 public:
  enum class Kind { classifier, keyword, custom };

  using ValueFn = std::function<double(const OneHotSeq&, const TokenSeq&)>;
  using GradFn = std::function<GradMatrix(const OneHotSeq&, const TokenSeq&)>;

  static ConstraintHandle classifier(Matrix embeddings, ClassifierHead head,
                                     ClassifierForm form = ClassifierForm::logit_diff,
                                     bool include_prompt = true) {
    require(embeddings.rows() >= 2 && embeddings.cols() >= 1, "classifier: bad embedding table");
    require(head.w1.rows() == embeddings.cols(), "classifier: w1 rows must equal embed dim");
    require(head.w1.cols() == head.b1.size(), "classifier: w1/b1 mismatch");
    require(head.w2.rows() == head.b1.size() && head.w2.cols() == 2, "classifier: bad w2 shape");
    require(head.b2.size() == 2, "classifier: b2 must have 2 entries");
    ConstraintHandle c;
    c.kind_ = Kind::classifier;
    c.embed_ = std::move(embeddings);
    c.head_ = std::move(head);
    c.form_ = form;
    c.include_prompt_ = include_prompt;
    return c;
  }

  static ConstraintHandle keyword(std::vector<std::int32_t> keywords, std::size_t vocab_size,
                                  double smoothing = 0.05) {
    require(!keywords.empty(), "keyword: empty keyword set");
    require(smoothing > 0.0, "keyword: smoothing temperature must be > 0");
    for (auto k : keywords)
      require(k >= 0 && static_cast<std::size_t>(k) < vocab_size, "keyword: token out of range");
    ConstraintHandle c;
    c.kind_ = Kind::keyword;
    c.keywords_ = std::move(keywords);
    c.vocab_size_ = vocab_size;
    c.smoothing_ = smoothing;
    return c;
  }

  static ConstraintHandle custom(ValueFn value, GradFn grad = nullptr) {
    require(static_cast<bool>(value), "custom: value function required");
    ConstraintHandle c;
    c.kind_ = Kind::custom;
    c.value_fn_ = std::move(value);
    c.grad_fn_ = std::move(grad);
    return c;
  }

  Kind kind() const { return kind_; }
  ClassifierForm form() const { return form_; }
  bool include_prompt() const { return include_prompt_; }
  double smoothing() const { return smoothing_; }
  const std::vector<std::int32_t>& keywords() const { return keywords_; }
  const ClassifierHead& head() const { return head_; }
  const Matrix& embeddings() const { return embed_; }

  double value(const OneHotSeq& b, const TokenSeq& prompt, OpCounters* counters = nullptr) const {
    if (counters) counters->constraint_forward += 1;
    switch (kind_) {
      case Kind::classifier: {
        RealVec z = class_logits(b, prompt);
        return form_ == ClassifierForm::logit_diff ? z[1] - z[0] : z[1] - lse2(z);
      }
      case Kind::keyword:
        return keyword_value_impl(b);
      case Kind::custom:
        return value_fn_(b, prompt);
    }
    throw std::logic_error("unreachable");
  }

  GradMatrix gradient(const OneHotSeq& b, const TokenSeq& prompt,
                      OpCounters* counters = nullptr) const {
    if (counters) counters->constraint_backward += 1;
    switch (kind_) {
      case Kind::classifier:
        return classifier_grad(b, prompt);
      case Kind::keyword:
        return keyword_grad(b);
      case Kind::custom:
        if (!grad_fn_)
          throw std::runtime_error(
              "gradient: this custom constraint does not supply a gradient (unsupported)");
        return grad_fn_(b, prompt);
    }
    throw std::logic_error("unreachable");
  }

 private:
  ConstraintHandle() = default;

  static double lse2(const RealVec& z) {
    const double m = std::max(z[0], z[1]);
    return m + std::log(std::exp(z[0] - m) + std::exp(z[1] - m));
  }

  // mean-pool prompt embedding rows (optional) and b.M response rows, then a
  // tanh hidden layer into two class logits
  RealVec class_logits(const OneHotSeq& b, const TokenSeq& prompt) const {
    const std::size_t d = embed_.cols();
    require(b.m.cols() == embed_.rows(), "classifier: vocab width mismatch");
    require(b.m.rows() >= 1, "classifier: empty sequence");
    RealVec pooled(d, 0.0);
    std::size_t rows = 0;
    if (include_prompt_) {
      for (auto t : prompt) {
        require(t >= 0 && static_cast<std::size_t>(t) < embed_.rows(),
                "classifier: prompt token out of range");
        auto e = embed_.row(static_cast<std::size_t>(t));
        for (std::size_t i = 0; i < d; ++i) pooled[i] += e[i];
        ++rows;
      }
    }
    for (std::size_t r = 0; r < b.m.rows(); ++r) {
      auto brow = b.m.row(r);
      for (std::size_t j = 0; j < b.m.cols(); ++j) {
        const double w = brow[j];
        if (w == 0.0) continue;
        auto e = embed_.row(j);
        for (std::size_t i = 0; i < d; ++i) pooled[i] += w * e[i];
      }
      ++rows;
    }
    for (double& x : pooled) x /= static_cast<double>(rows);

    const std::size_t hdim = head_.b1.size();
    RealVec h(hdim);
    for (std::size_t a = 0; a < hdim; ++a) {
      double acc = head_.b1[a];
      for (std::size_t i = 0; i < d; ++i) acc += pooled[i] * head_.w1(i, a);
      h[a] = std::tanh(acc);
    }
    RealVec z(2);
    for (std::size_t k = 0; k < 2; ++k) {
      double acc = head_.b2[k];
      for (std::size_t a = 0; a < hdim; ++a) acc += h[a] * head_.w2(a, k);
      z[k] = acc;
    }
    return z;
  }

  GradMatrix classifier_grad(const OneHotSeq& b, const TokenSeq& prompt) const {
    const std::size_t d = embed_.cols();
    const std::size_t hdim = head_.b1.size();
    require(b.m.cols() == embed_.rows(), "classifier: vocab width mismatch");

    // recompute forward pieces needed by the chain rule
    RealVec pooled(d, 0.0);
    std::size_t rows = b.m.rows();
    if (include_prompt_) rows += prompt.size();
    require(b.m.rows() >= 1, "classifier: empty sequence");
    if (include_prompt_) {
      for (auto t : prompt) {
        auto e = embed_.row(static_cast<std::size_t>(t));
        for (std::size_t i = 0; i < d; ++i) pooled[i] += e[i];
      }
    }
    for (std::size_t r = 0; r < b.m.rows(); ++r) {
      auto brow = b.m.row(r);
      for (std::size_t j = 0; j < b.m.cols(); ++j) {
        const double w = brow[j];
        if (w == 0.0) continue;
        auto e = embed_.row(j);
        for (std::size_t i = 0; i < d; ++i) pooled[i] += w * e[i];
      }
    }
    for (double& x : pooled) x /= static_cast<double>(rows);

    RealVec pre(hdim), h(hdim);
    for (std::size_t a = 0; a < hdim; ++a) {
      double acc = head_.b1[a];
      for (std::size_t i = 0; i < d; ++i) acc += pooled[i] * head_.w1(i, a);
      pre[a] = acc;
      h[a] = std::tanh(acc);
    }

    RealVec dz(2);
    if (form_ == ClassifierForm::logit_diff) {
      dz = {-1.0, 1.0};
    } else {
      RealVec z(2);
      for (std::size_t k = 0; k < 2; ++k) {
        double acc = head_.b2[k];
        for (std::size_t a = 0; a < hdim; ++a) acc += h[a] * head_.w2(a, k);
        z[k] = acc;
      }
      const double m = std::max(z[0], z[1]);
      const double e0 = std::exp(z[0] - m), e1 = std::exp(z[1] - m);
      const double p0 = e0 / (e0 + e1);
      dz = {-p0, p0};  // d/dz of (z1 - logsumexp(z))
    }

    RealVec dpooled(d, 0.0);
    for (std::size_t a = 0; a < hdim; ++a) {
      const double dh = (head_.w2(a, 0) * dz[0] + head_.w2(a, 1) * dz[1]) * (1.0 - h[a] * h[a]);
      for (std::size_t i = 0; i < d; ++i) dpooled[i] += head_.w1(i, a) * dh;
    }
    const double inv_rows = 1.0 / static_cast<double>(rows);

    // d f / d b_{r,j} = (dpooled . M_j) / rows — identical for every row, a
    // direct consequence of mean pooling.
    GradMatrix g(b.m.rows(), b.m.cols());
    RealVec per_token(b.m.cols());
    for (std::size_t j = 0; j < b.m.cols(); ++j)
      per_token[j] = dot(std::span<const double>(dpooled), embed_.row(j)) * inv_rows;
    for (std::size_t r = 0; r < b.m.rows(); ++r) {
      auto row = g.row(r);
      for (std::size_t j = 0; j < b.m.cols(); ++j) row[j] = per_token[j];
    }
    return g;
  }

  double keyword_value_impl(const OneHotSeq& b) const {
    require(b.m.cols() == vocab_size_, "keyword: vocab width mismatch");
    require(b.m.rows() >= 1, "keyword: empty sequence");
    const double T = smoothing_;
    double total = 0.0;
    for (auto k : keywords_) {
      // smoothmax_i b_{i,k} = T log sum_i exp(b_{i,k}/T), max-stabilized
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < b.m.rows(); ++i)
        mx = std::max(mx, b.m(i, static_cast<std::size_t>(k)));
      double z = 0.0;
      for (std::size_t i = 0; i < b.m.rows(); ++i)
        z += std::exp((b.m(i, static_cast<std::size_t>(k)) - mx) / T);
      total += mx + T * std::log(z);
    }
    return total / static_cast<double>(keywords_.size());
  }

  GradMatrix keyword_grad(const OneHotSeq& b) const {
    require(b.m.cols() == vocab_size_, "keyword: vocab width mismatch");
    GradMatrix g(b.m.rows(), b.m.cols());
    const double T = smoothing_;
    const double inv_k = 1.0 / static_cast<double>(keywords_.size());
    for (auto k : keywords_) {
      const auto col = static_cast<std::size_t>(k);
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < b.m.rows(); ++i) mx = std::max(mx, b.m(i, col));
      double z = 0.0;
      for (std::size_t i = 0; i < b.m.rows(); ++i) z += std::exp((b.m(i, col) - mx) / T);
      for (std::size_t i = 0; i < b.m.rows(); ++i)
        g(i, col) += inv_k * std::exp((b.m(i, col) - mx) / T) / z;
    }
    return g;
  }

  Kind kind_ = Kind::custom;
  // classifier state
  Matrix embed_;
  ClassifierHead head_;
  ClassifierForm form_ = ClassifierForm::logit_diff;
  bool include_prompt_ = true;
  // keyword state
  std::vector<std::int32_t> keywords_;
  std::size_t vocab_size_ = 0;
  double smoothing_ = 0.05;
  // custom state
  ValueFn value_fn_;
  GradFn grad_fn_;
};

inline double classifier_value(const ConstraintHandle& c, const OneHotSeq& b,
                               const TokenSeq& prompt, OpCounters* counters = nullptr) {
  require(c.kind() == ConstraintHandle::Kind::classifier, "classifier_value: wrong kind");
  return c.value(b, prompt, counters);
}

inline double keyword_value(const ConstraintHandle& c, const OneHotSeq& b, const TokenSeq& prompt,
                            OpCounters* counters = nullptr) {
  require(c.kind() == ConstraintHandle::Kind::keyword, "keyword_value: wrong kind");
  return c.value(b, prompt, counters);
}

inline GradMatrix gradient(const ConstraintHandle& c, const OneHotSeq& b, const TokenSeq& prompt,
                           OpCounters* counters = nullptr) {
  return c.gradient(b, prompt, counters);
}

// Embedding-lookup scoring path for exact one-hot inputs: pools M rows
// directly instead of multiplying b.M. Used as the oracle the matrix-product
// path is compared against.
inline double classifier_value_tokens(const ConstraintHandle& c, const TokenSeq& tokens,
                                      const TokenSeq& prompt) {
  require(c.kind() == ConstraintHandle::Kind::classifier, "classifier_value_tokens: wrong kind");
  const Matrix& M = c.embeddings();
  const std::size_t d = M.cols();
  RealVec pooled(d, 0.0);
  std::size_t rows = 0;
  auto add_row = [&](std::int32_t t) {
    require(t >= 0 && static_cast<std::size_t>(t) < M.rows(), "token out of range");
    auto e = M.row(static_cast<std::size_t>(t));
    for (std::size_t i = 0; i < d; ++i) pooled[i] += e[i];
    ++rows;
  };
  if (c.include_prompt())
    for (auto t : prompt) add_row(t);
  for (auto t : tokens) add_row(t);
  require(rows > 0, "classifier_value_tokens: nothing to pool");
  for (double& x : pooled) x /= static_cast<double>(rows);

  const ClassifierHead& head = c.head();
  const std::size_t hdim = head.b1.size();
  RealVec h(hdim);
  for (std::size_t a = 0; a < hdim; ++a) {
    double acc = head.b1[a];
    for (std::size_t i = 0; i < d; ++i) acc += pooled[i] * head.w1(i, a);
    h[a] = std::tanh(acc);
  }
  RealVec z(2);
  for (std::size_t k = 0; k < 2; ++k) {
    double acc = head.b2[k];
    for (std::size_t a = 0; a < hdim; ++a) acc += h[a] * head.w2(a, k);
    z[k] = acc;
  }
  if (c.form() == ClassifierForm::logit_diff) return z[1] - z[0];
  const double m = std::max(z[0], z[1]);
  return z[1] - (m + std::log(std::exp(z[0] - m) + std::exp(z[1] - m)));
}

// --- classifier head training -------------------------------------------------

struct ClassifierTrainConfig {
  std::size_t hidden = 32;
  std::size_t steps = 600;
  std::size_t batch = 16;
  double lr = 0.08;
  double init_scale = 0.5;
};

// Cross-entropy training of the head only; the embedding table stays fixed
// (it belongs to the LM). labels: 0 = negative, 1 = positive.
inline ClassifierHead train_classifier_head(const std::vector<TokenSeq>& seqs,
                                            const std::vector<int>& labels,
                                            const Matrix& embeddings,
                                            const ClassifierTrainConfig& cfg, Rng& rng,
                                            double* train_accuracy = nullptr) {
  require(!seqs.empty() && seqs.size() == labels.size(),
          "train_classifier_head: need matching nonempty sequences and labels");
  const std::size_t d = embeddings.cols();

  // precompute mean-pooled features once
  Matrix feats(seqs.size(), d);
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    require(!seqs[s].empty(), "train_classifier_head: empty sequence");
    auto f = feats.row(s);
    for (auto t : seqs[s]) {
      require(t >= 0 && static_cast<std::size_t>(t) < embeddings.rows(),
              "train_classifier_head: token out of range");
      auto e = embeddings.row(static_cast<std::size_t>(t));
      for (std::size_t i = 0; i < d; ++i) f[i] += e[i];
    }
    for (std::size_t i = 0; i < d; ++i) f[i] /= static_cast<double>(seqs[s].size());
    require(labels[s] == 0 || labels[s] == 1, "train_classifier_head: labels must be 0/1");
  }

  ClassifierHead head;
  head.w1 = Matrix(d, cfg.hidden);
  head.b1.assign(cfg.hidden, 0.0);
  head.w2 = Matrix(cfg.hidden, 2);
  head.b2.assign(2, 0.0);
  for (double& x : head.w1.data()) x = rng.next_gaussian() * cfg.init_scale;
  for (double& x : head.w2.data()) x = rng.next_gaussian() * cfg.init_scale;

  RealVec h(cfg.hidden), pre(cfg.hidden), z(2);
  auto forward = [&](std::span<const double> f) {
    for (std::size_t a = 0; a < cfg.hidden; ++a) {
      double acc = head.b1[a];
      for (std::size_t i = 0; i < d; ++i) acc += f[i] * head.w1(i, a);
      pre[a] = acc;
      h[a] = std::tanh(acc);
    }
    for (std::size_t k = 0; k < 2; ++k) {
      double acc = head.b2[k];
      for (std::size_t a = 0; a < cfg.hidden; ++a) acc += h[a] * head.w2(a, k);
      z[k] = acc;
    }
  };

  Matrix gw1(d, cfg.hidden), gw2(cfg.hidden, 2);
  RealVec gb1(cfg.hidden), gb2(2);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::fill(gw1.data().begin(), gw1.data().end(), 0.0);
    std::fill(gw2.data().begin(), gw2.data().end(), 0.0);
    std::fill(gb1.begin(), gb1.end(), 0.0);
    std::fill(gb2.begin(), gb2.end(), 0.0);
    for (std::size_t bi = 0; bi < cfg.batch; ++bi) {
      const std::size_t s = rng.next_u64() % seqs.size();
      forward(feats.row(s));
      const double m = std::max(z[0], z[1]);
      const double e0 = std::exp(z[0] - m), e1 = std::exp(z[1] - m);
      const double zsum = e0 + e1;
      RealVec dz = {e0 / zsum, e1 / zsum};
      dz[static_cast<std::size_t>(labels[s])] -= 1.0;
      for (std::size_t k = 0; k < 2; ++k) {
        gb2[k] += dz[k];
        for (std::size_t a = 0; a < cfg.hidden; ++a) gw2(a, k) += h[a] * dz[k];
      }
      auto f = feats.row(s);
      for (std::size_t a = 0; a < cfg.hidden; ++a) {
        const double dh = (head.w2(a, 0) * dz[0] + head.w2(a, 1) * dz[1]) * (1.0 - h[a] * h[a]);
        gb1[a] += dh;
        for (std::size_t i = 0; i < d; ++i) gw1(i, a) += f[i] * dh;
      }
    }
    const double lr = cfg.lr / static_cast<double>(cfg.batch);
    for (std::size_t i = 0; i < gw1.size(); ++i) head.w1.data()[i] -= lr * gw1.data()[i];
    for (std::size_t i = 0; i < gw2.size(); ++i) head.w2.data()[i] -= lr * gw2.data()[i];
    for (std::size_t a = 0; a < cfg.hidden; ++a) head.b1[a] -= lr * gb1[a];
    for (std::size_t k = 0; k < 2; ++k) head.b2[k] -= lr * gb2[k];
  }

  if (train_accuracy) {
    std::size_t hit = 0;
    for (std::size_t s = 0; s < seqs.size(); ++s) {
      forward(feats.row(s));
      hit += (z[1] > z[0]) == (labels[s] == 1) ? 1 : 0;
    }
    *train_accuracy = static_cast<double>(hit) / static_cast<double>(seqs.size());
  }
  return head;
}

}  // namespace dab
