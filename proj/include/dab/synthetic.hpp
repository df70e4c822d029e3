#pragma once
// Synthetic corpus: a 64-token vocabulary with designated positive/negative
// sentiment classes, keyword tokens, and clocked filler structure the tiny LM
// can actually learn. Replaces external datasets so sentiment-style and
// keyword-style control tasks are exercisable on a desk.

#include <string>
#include <vector>

#include "dab/lm.hpp"

namespace dab {

struct SyntheticSpec {
  std::size_t filler = 23;    // w0..w22, clock-driven
  std::size_t pos = 16;       // pos0..pos15
  std::size_t neg = 16;       // neg0..neg15
  std::size_t keywords = 8;   // kw0..kw7
  std::size_t min_len = 10;
  std::size_t max_len = 24;
  double p_class = 0.45;      // emit a sentiment-class token
  double p_keyword = 0.10;    // emit a keyword token
  double p_advance = 0.65;    // clock ticks forward vs. pauses for a step
  double zipf = 2.0;          // skew of the class-identity distribution
};

// token 0 is always the start marker "<s>"
inline Vocabulary synthetic_vocabulary(const SyntheticSpec& spec = {}) {
  std::vector<std::string> toks;
  toks.reserve(1 + spec.pos + spec.neg + spec.keywords + spec.filler);
  toks.push_back("<s>");
  for (std::size_t i = 0; i < spec.pos; ++i) toks.push_back("pos" + std::to_string(i));
  for (std::size_t i = 0; i < spec.neg; ++i) toks.push_back("neg" + std::to_string(i));
  for (std::size_t i = 0; i < spec.keywords; ++i) toks.push_back("kw" + std::to_string(i));
  for (std::size_t i = 0; i < spec.filler; ++i) toks.push_back("w" + std::to_string(i));
  return Vocabulary(std::move(toks));
}

// Sequences are sentiment-pure: a positive line only ever uses pos* class
// tokens, a negative line only neg*. Filler follows a per-line clock
// (state = start + ticks, mod filler count), so a decoder can recover the
// phase from any single filler token no matter how many class/keyword tokens
// interrupt the run — filler stays predictable deep into biased generations.
inline std::vector<TokenSeq> synthetic_corpus(const SyntheticSpec& spec, std::size_t count,
                                              Rng& rng, std::vector<int>* labels = nullptr) {
  const Vocabulary v = synthetic_vocabulary(spec);
  auto pos_id = [&](std::size_t i) { return v.id("pos" + std::to_string(i)); };
  auto neg_id = [&](std::size_t i) { return v.id("neg" + std::to_string(i)); };
  auto kw_id = [&](std::size_t i) { return v.id("kw" + std::to_string(i)); };
  auto w_id = [&](std::size_t i) { return v.id("w" + std::to_string(i)); };

  // class identity is drawn zipf-skewed (weight (k+1)^-zipf) and decoupled
  // from the filler state: skew gives the head identities enough corpus
  // frequency that a trained decoder prices them close to filler tokens,
  // while the tail keeps all identities alive for the pooled classifier
  // features
  auto class_identity = [&](Rng& r, std::size_t n) {
    double h = 0.0;
    for (std::size_t k = 0; k < n; ++k) h += std::pow(k + 1.0, -spec.zipf);
    double u = r.next_unit() * h;
    for (std::size_t k = 0; k + 1 < n; ++k) {
      u -= std::pow(k + 1.0, -spec.zipf);
      if (u < 0.0) return k;
    }
    return n - 1;
  };

  std::vector<TokenSeq> out;
  out.reserve(count);
  if (labels) labels->clear();
  for (std::size_t s = 0; s < count; ++s) {
    const bool positive = rng.next_unit() < 0.5;
    const std::size_t len =
        spec.min_len + rng.next_u64() % (spec.max_len - spec.min_len + 1);
    std::size_t state = rng.next_u64() % spec.filler;
    TokenSeq seq;
    seq.reserve(len);
    bool has_class = false;
    for (std::size_t t = 0; t < len; ++t) {
      const double u = rng.next_unit();
      if (u < spec.p_class) {
        const std::size_t c = class_identity(rng, positive ? spec.pos : spec.neg);
        seq.push_back(positive ? pos_id(c) : neg_id(c));
        has_class = true;
      } else if (u < spec.p_class + spec.p_keyword) {
        seq.push_back(kw_id(state % spec.keywords));
      } else {
        seq.push_back(w_id(state));
      }
      if (rng.next_unit() < spec.p_advance) state = (state + 1) % spec.filler;
    }
    if (!has_class) {
      // guarantee a class token so every line carries its label
      const std::size_t mid = len / 2;
      const std::size_t c = class_identity(rng, positive ? spec.pos : spec.neg);
      seq[mid] = positive ? pos_id(c) : neg_id(c);
    }
    out.push_back(std::move(seq));
    if (labels) labels->push_back(positive ? 1 : 0);
  }
  return out;
}

// +1 pure positive, -1 pure negative, 0 mixed or neutral
inline int sentiment_label(const TokenSeq& seq, const Vocabulary& v) {
  bool pos = false, neg = false;
  for (auto t : seq) {
    const std::string& name = v.token(t);
    if (name.rfind("pos", 0) == 0) pos = true;
    if (name.rfind("neg", 0) == 0) neg = true;
  }
  if (pos && !neg) return 1;
  if (neg && !pos) return -1;
  return 0;
}

inline std::vector<std::int32_t> keyword_ids(const Vocabulary& v,
                                             const std::vector<std::string>& names) {
  std::vector<std::int32_t> out;
  out.reserve(names.size());
  for (const auto& n : names) out.push_back(v.id(n));
  return out;
}

// 20 neutral (filler-only) prompts, each starting with the start marker.
inline std::vector<TokenSeq> default_prompts(const Vocabulary& v) {
  // two-token bodies are consecutive clock states, so every prompt reads like
  // the opening of a real corpus line
  static const std::vector<std::vector<std::string>> bodies = {
      {"w0", "w1"},   {"w3"},         {"w11", "w12"}, {"w19"},        {"w2", "w3"},
      {"w14"},        {"w5", "w6"},   {"w21"},        {"w8", "w9"},   {"w12"},
      {"w6", "w7"},   {"w10"},        {"w15", "w16"}, {"w22"},        {"w17", "w18"},
      {"w13"},        {"w20", "w21"}, {"w4", "w5"},   {"w1", "w2"},   {"w18", "w19"},
  };
  std::vector<TokenSeq> out;
  out.reserve(bodies.size());
  for (const auto& body : bodies) {
    TokenSeq p = {v.id("<s>")};
    for (const auto& t : body) p.push_back(v.id(t));
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace dab
