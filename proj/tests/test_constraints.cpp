#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dab/constraints.hpp"
#include "dab/synthetic.hpp"

using namespace dab;
using Catch::Approx;

namespace {

Matrix random_embeddings(std::size_t vocab, std::size_t d, Rng& rng, double scale = 0.4) {
  Matrix m(vocab, d);
  for (double& x : m.data()) x = rng.next_gaussian() * scale;
  return m;
}

ClassifierHead random_head(std::size_t d, std::size_t hidden, Rng& rng) {
  ClassifierHead h;
  h.w1 = Matrix(d, hidden);
  h.b1.assign(hidden, 0.0);
  h.w2 = Matrix(hidden, 2);
  h.b2.assign(2, 0.0);
  for (double& x : h.w1.data()) x = rng.next_gaussian() * 0.6;
  for (double& x : h.w2.data()) x = rng.next_gaussian() * 0.6;
  for (double& x : h.b1) x = rng.next_gaussian() * 0.2;
  for (double& x : h.b2) x = rng.next_gaussian() * 0.2;
  return h;
}

// random point on the simplex per row
OneHotSeq random_relaxed(std::size_t n, std::size_t vocab, Rng& rng) {
  OneHotSeq b;
  b.m = Matrix(n, vocab);
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0.0;
    auto row = b.m.row(i);
    for (std::size_t j = 0; j < vocab; ++j) {
      row[j] = -std::log(1.0 - rng.next_unit());  // Exp(1) draws
      sum += row[j];
    }
    for (std::size_t j = 0; j < vocab; ++j) row[j] /= sum;
  }
  return b;
}

}  // namespace

TEST_CASE("one-hot sequences validate and round-trip") {
  OneHotSeq o = OneHotSeq::from_tokens({2, 0, 1}, 4);
  o.validate();
  REQUIRE(o.to_tokens() == TokenSeq{2, 0, 1});
  REQUIRE(o.m(0, 2) == 1.0);
  REQUIRE(o.m(0, 0) == 0.0);

  OneHotSeq bad;
  bad.m = Matrix(1, 3);
  bad.m(0, 0) = 0.5;
  REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);  // row sums to 0.5
  bad.m(0, 1) = 0.7;
  bad.m(0, 2) = -0.2;
  REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);  // negative entry

  Rng rng(5);
  random_relaxed(3, 6, rng).validate();
}

TEST_CASE("classifier value") {
  Rng rng(21);
  const std::size_t d = 6, vocab = 8;
  Matrix M = random_embeddings(vocab, d, rng);

  SECTION("fixed head outputs (neg=0.5, pos=2.0) score 1.5") {
    ClassifierHead h;
    h.w1 = Matrix(d, 4);
    h.b1.assign(4, 0.0);
    h.w2 = Matrix(4, 2);
    h.b2 = {0.5, 2.0};  // logits independent of the input
    auto c = ConstraintHandle::classifier(M, h);
    auto b = OneHotSeq::from_tokens({1, 2, 3}, vocab);
    REQUIRE(classifier_value(c, b, {}) == Approx(1.5).margin(1e-15));
  }
  SECTION("symmetric head scores 0 on any input") {
    ClassifierHead h = random_head(d, 5, rng);
    for (std::size_t a = 0; a < 5; ++a) h.w2(a, 0) = h.w2(a, 1);
    h.b2[0] = h.b2[1];
    auto c = ConstraintHandle::classifier(M, h);
    for (int trial = 0; trial < 10; ++trial) {
      auto b = random_relaxed(4, vocab, rng);
      REQUIRE(std::abs(classifier_value(c, b, {0, 1})) <= 1e-12);
    }
  }
  SECTION("matrix-product path equals embedding-lookup path") {
    ClassifierHead h = random_head(d, 5, rng);
    auto c = ConstraintHandle::classifier(M, h);
    for (int trial = 0; trial < 25; ++trial) {
      TokenSeq toks(4), prompt = {0, static_cast<std::int32_t>(rng.next_u64() % vocab)};
      for (auto& t : toks) t = static_cast<std::int32_t>(rng.next_u64() % vocab);
      auto b = OneHotSeq::from_tokens(toks, vocab);
      double via_matrix = classifier_value(c, b, prompt);
      double via_lookup = classifier_value_tokens(c, toks, prompt);
      REQUIRE(std::abs(via_matrix - via_lookup) <= 1e-12);
    }
  }
  SECTION("scaling the head logits scales the value linearly") {
    ClassifierHead h = random_head(d, 5, rng);
    auto b = random_relaxed(3, vocab, rng);
    TokenSeq prompt = {2};
    auto base = ConstraintHandle::classifier(M, h);
    const double f1 = classifier_value(base, b, prompt);
    for (double alpha : {0.5, 2.0, 7.25}) {
      ClassifierHead hs = h;
      for (double& x : hs.w2.data()) x *= alpha;
      for (double& x : hs.b2) x *= alpha;
      auto scaled = ConstraintHandle::classifier(M, hs);
      REQUIRE(std::abs(classifier_value(scaled, b, prompt) - alpha * f1) <= 1e-12);
    }
  }
  SECTION("wrong kind is rejected") {
    auto kw = ConstraintHandle::keyword({1}, vocab);
    auto b = OneHotSeq::from_tokens({1}, vocab);
    REQUIRE_THROWS_AS(classifier_value(kw, b, {}), std::invalid_argument);
  }
}

TEST_CASE("keyword value") {
  const std::size_t vocab = 10, n = 12;
  const double T = 0.05;
  const double slack = T * std::log(double(n));

  SECTION("keyword present once, |K|=1") {
    auto c = ConstraintHandle::keyword({4}, vocab, T);
    TokenSeq toks(n, 1);
    toks[5] = 4;
    auto b = OneHotSeq::from_tokens(toks, vocab);
    double f = keyword_value(c, b, {});
    REQUIRE(f >= 0.9);
    REQUIRE(f <= 1.0 + slack);
  }
  SECTION("no keyword mass anywhere stays within the smoothing slack") {
    auto c = ConstraintHandle::keyword({4, 7}, vocab, T);
    TokenSeq toks(n, 1);
    auto b = OneHotSeq::from_tokens(toks, vocab);
    double f = keyword_value(c, b, {});
    REQUIRE(f >= 0.0);
    REQUIRE(f <= slack + 1e-12);
  }
  SECTION("all keywords present once lands within slack of 1") {
    std::vector<std::int32_t> K = {2, 4, 7};
    auto c = ConstraintHandle::keyword(K, vocab, T);
    TokenSeq toks(n, 1);
    toks[0] = 2;
    toks[4] = 4;
    toks[9] = 7;
    auto b = OneHotSeq::from_tokens(toks, vocab);
    REQUIRE(std::abs(keyword_value(c, b, {}) - 1.0) <= slack);
  }
  SECTION("wrong kind is rejected") {
    Rng rng(3);
    auto cls = ConstraintHandle::classifier(random_embeddings(vocab, 4, rng), random_head(4, 3, rng));
    auto b = OneHotSeq::from_tokens({1}, vocab);
    REQUIRE_THROWS_AS(keyword_value(cls, b, {}), std::invalid_argument);
  }
}

TEST_CASE("gradients match central finite differences") {
  Rng rng(99);
  const std::size_t d = 6, vocab = 8, n = 4;
  const double h = 1e-5;

  auto check = [&](const ConstraintHandle& c, const TokenSeq& prompt, int inputs) {
    double worst = 0.0;
    for (int trial = 0; trial < inputs; ++trial) {
      OneHotSeq b = random_relaxed(n, vocab, rng);
      GradMatrix g = gradient(c, b, prompt);
      Matrix fd = finite_difference_grad(
          [&](const Matrix& m) {
            OneHotSeq probe;
            probe.m = m;
            return c.value(probe, prompt);
          },
          b.m, h);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double a = g.data()[i], bb = fd.data()[i];
        const double rel = std::abs(a - bb) / std::max({1e-6, std::abs(a), std::abs(bb)});
        worst = std::max(worst, rel);
      }
    }
    return worst;
  };

  Matrix M = random_embeddings(vocab, d, rng);
  ClassifierHead head = random_head(d, 5, rng);
  TokenSeq prompt = {0, 3};

  SECTION("classifier, logit-difference form, 100 random relaxed inputs") {
    auto c = ConstraintHandle::classifier(M, head, ClassifierForm::logit_diff);
    REQUIRE(check(c, prompt, 100) < 1e-4);
  }
  SECTION("classifier, log-softmax form") {
    auto c = ConstraintHandle::classifier(M, head, ClassifierForm::log_softmax);
    REQUIRE(check(c, prompt, 40) < 1e-4);
  }
  SECTION("classifier without prompt conditioning") {
    auto c = ConstraintHandle::classifier(M, head, ClassifierForm::logit_diff, false);
    REQUIRE(check(c, prompt, 20) < 1e-4);
  }
  SECTION("keyword, 100 random relaxed inputs") {
    auto c = ConstraintHandle::keyword({2, 5, 7}, vocab, 0.05);
    REQUIRE(check(c, {}, 100) < 1e-4);
  }
}

TEST_CASE("gradient structure and instrumentation") {
  Rng rng(7);
  const std::size_t vocab = 9, n = 5;

  SECTION("keyword gradient mass sits only on keyword columns and sums to 1/|K| each") {
    std::vector<std::int32_t> K = {1, 6};
    auto c = ConstraintHandle::keyword(K, vocab, 0.05);
    auto b = random_relaxed(n, vocab, rng);
    GradMatrix g = gradient(c, b, {});
    for (std::size_t j = 0; j < vocab; ++j) {
      double col = 0.0;
      for (std::size_t i = 0; i < n; ++i) col += g(i, j);
      const bool is_kw = j == 1 || j == 6;
      if (is_kw)
        REQUIRE(col == Approx(0.5).margin(1e-12));
      else
        REQUIRE(col == 0.0);
    }
  }
  SECTION("constant custom constraint has a zero gradient") {
    auto c = ConstraintHandle::custom([](const OneHotSeq&, const TokenSeq&) { return 3.25; },
                                      [](const OneHotSeq& b, const TokenSeq&) {
                                        return GradMatrix(b.m.rows(), b.m.cols());
                                      });
    auto b = random_relaxed(n, vocab, rng);
    REQUIRE(c.value(b, {}) == 3.25);
    GradMatrix g = gradient(c, b, {});
    for (double v : g.data()) REQUIRE(v == 0.0);
  }
  SECTION("custom constraint without a gradient raises an unsupported error") {
    auto c = ConstraintHandle::custom([](const OneHotSeq&, const TokenSeq&) { return 0.0; });
    auto b = random_relaxed(n, vocab, rng);
    REQUIRE_THROWS_AS(gradient(c, b, {}), std::runtime_error);
  }
  SECTION("constraint calls never touch the language model counters") {
    Matrix M = random_embeddings(vocab, 4, rng);
    auto c = ConstraintHandle::classifier(M, random_head(4, 3, rng));
    auto b = random_relaxed(n, vocab, rng);
    OpCounters k;
    c.value(b, {0}, &k);
    gradient(c, b, {0}, &k);
    REQUIRE(k.lm_forward == 0);
    REQUIRE(k.lm_backward == 0);
    REQUIRE(k.constraint_forward == 1);
    REQUIRE(k.constraint_backward == 1);
  }
}

TEST_CASE("classifier head trains to high accuracy on the synthetic labels") {
  SyntheticSpec spec;
  Rng data_rng(1234);
  std::vector<int> labels;
  auto corpus = synthetic_corpus(spec, 400, data_rng, &labels);
  Vocabulary v = synthetic_vocabulary(spec);

  // labels agree with the token-name rule
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    int byname = sentiment_label(corpus[i], v);
    REQUIRE(byname == (labels[i] == 1 ? 1 : -1));
  }

  Rng rng(55);
  // width matches the decoder's embedding table; mean-pooled features get
  // too noisy below ~32 dims and the bar here would say nothing useful
  Matrix M = random_embeddings(v.size(), 64, rng, 0.35);
  ClassifierTrainConfig cfg;
  double acc = 0.0;
  ClassifierHead head = train_classifier_head(corpus, labels, M, cfg, rng, &acc);
  REQUIRE(acc >= 0.9);

  // the trained constraint separates pure-positive from pure-negative inputs
  auto c = ConstraintHandle::classifier(M, head);
  TokenSeq pos_seq, neg_seq;
  for (int i = 0; i < 6; ++i) {
    pos_seq.push_back(v.id("pos" + std::to_string(i)));
    neg_seq.push_back(v.id("neg" + std::to_string(i)));
  }
  double fp = classifier_value(c, OneHotSeq::from_tokens(pos_seq, v.size()), {});
  double fn = classifier_value(c, OneHotSeq::from_tokens(neg_seq, v.size()), {});
  REQUIRE(fp > fn);
  REQUIRE(fp > 0.0);
  REQUIRE(fn < 0.0);
}
