#include "dab/baselines.hpp"
#include "dab/metrics.hpp"
#include "dab/synthetic.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace dab;

namespace {

LMBundle small_lm(std::uint64_t seed, std::size_t vocab_n = 8, std::size_t context = 32) {
  LMConfig cfg;
  cfg.embed_dim = 8;
  cfg.heads = 2;
  cfg.mlp_hidden = 12;
  cfg.blocks = 2;
  cfg.context = context;
  std::vector<std::string> toks = {"<s>"};
  for (std::size_t i = 1; i < vocab_n; ++i) toks.push_back("t" + std::to_string(i));
  Rng rng(seed);
  return LMBundle::initialized(Vocabulary(toks), cfg, rng);
}

ConstraintHandle prefer_token_one() {
  return ConstraintHandle::custom(
      [](const OneHotSeq& b, const TokenSeq&) {
        double s = 0.0;
        for (std::size_t i = 0; i < b.m.rows(); ++i) s += b.m(i, 1);
        return s / static_cast<double>(b.m.rows());
      },
      [](const OneHotSeq& b, const TokenSeq&) {
        GradMatrix g(b.m.rows(), b.m.cols());
        for (std::size_t i = 0; i < b.m.rows(); ++i)
          g(i, 1) = 1.0 / static_cast<double>(b.m.rows());
        return g;
      });
}

}  // namespace

TEST_CASE("hops is the hamming distance with symmetric arguments") {
  REQUIRE(hops({1, 2, 3}, {1, 2, 3}) == 0);
  REQUIRE(hops({1, 2, 3, 4}, {1, 9, 3, 7}) == 2);
  REQUIRE_THROWS_AS(hops({1, 2}, {1, 2, 3}), std::invalid_argument);

  Rng rng(3);
  for (int rep = 0; rep < 50; ++rep) {
    TokenSeq a(6), b(6);
    for (auto& t : a) t = static_cast<std::int32_t>(rng.next_u64() % 4);
    for (auto& t : b) t = static_cast<std::int32_t>(rng.next_u64() % 4);
    REQUIRE(hops(a, b) == hops(b, a));
    REQUIRE(hops(a, b) <= 6);
  }
}

TEST_CASE("unique token counts track the set of tokens seen per position") {
  SamplerTrace trace;
  // constructed fixture: position 0 cycles 3 tokens, position 1 constant
  for (int t = 0; t < 10; ++t) {
    TraceStep ts;
    ts.step = static_cast<std::size_t>(t + 1);
    ts.response = {static_cast<std::int32_t>(t % 3), 7};
    trace.steps.push_back(ts);
  }
  UniqueTokenStats s = unique_tokens(trace);
  REQUIRE(s.per_position == std::vector<std::size_t>{3, 1});
  REQUIRE(s.mean == Catch::Approx(2.0));

  SECTION("single-step trace counts one token everywhere") {
    SamplerTrace one;
    TraceStep ts;
    ts.response = {4, 5, 6};
    one.steps.push_back(ts);
    UniqueTokenStats u = unique_tokens(one);
    REQUIRE(u.per_position == std::vector<std::size_t>{1, 1, 1});
    REQUIRE(u.mean == 1.0);
  }
  SECTION("constant trace over many steps still counts one") {
    SamplerTrace c;
    for (int t = 0; t < 10; ++t) {
      TraceStep ts;
      ts.response = {2, 2};
      c.steps.push_back(ts);
    }
    UniqueTokenStats u = unique_tokens(c);
    REQUIRE(u.per_position == std::vector<std::size_t>{1, 1});
  }
  SECTION("empty trace is rejected") {
    SamplerTrace empty;
    REQUIRE_THROWS_AS(unique_tokens(empty), std::invalid_argument);
  }
}

TEST_CASE("unique token means are bounded by steps and vocabulary") {
  LMBundle lm = small_lm(7);
  TokenSeq prompt = {0};
  SamplerConfig cfg;
  cfg.steps = 12;
  cfg.length = 5;
  cfg.tau = 0.3;
  cfg.seed = 5;
  DabResult res = run_dab(lm, prefer_token_one(), prompt, cfg);
  UniqueTokenStats u = unique_tokens(res.trace);
  REQUIRE(u.mean <= 12.0);
  REQUIRE(u.mean <= static_cast<double>(lm.vocab.size()));
  for (std::size_t c : u.per_position) {
    REQUIRE(c >= 1);
    REQUIRE(c <= 12);
  }
}

TEST_CASE("tokens per second is the literal formula") {
  REQUIRE(tokens_per_second(20, 50, 100.0) == 10.0);
  REQUIRE(tokens_per_second(20, 50, 200.0) == 5.0);  // doubling t halves it
  REQUIRE_THROWS_AS(tokens_per_second(20, 50, 0.0), std::invalid_argument);
  // reference points from paper-scale hardware, for orientation only:
  // a continuous mover reached ~9.5, the discrete one ~23.2
}

TEST_CASE("satisfaction rate counts threshold crossings") {
  const std::size_t vocab = 6;
  ConstraintHandle c = prefer_token_one();
  // f = fraction of token-1 positions; build 10 responses with 3 above 0.5
  std::vector<TokenSeq> rs;
  for (int i = 0; i < 3; ++i) rs.push_back({1, 1, 1, 2});   // f = 0.75
  for (int i = 0; i < 7; ++i) rs.push_back({1, 2, 3, 4});   // f = 0.25
  std::vector<TokenSeq> prompts = {{0}};
  REQUIRE(satisfaction_rate(rs, c, prompts, vocab, 0.5) == Catch::Approx(0.3));

  SECTION("all above threshold") {
    std::vector<TokenSeq> hi(4, TokenSeq{1, 1, 1, 1});
    REQUIRE(satisfaction_rate(hi, c, prompts, vocab, 0.99) == 1.0);
  }
  SECTION("threshold is inclusive") {
    std::vector<TokenSeq> edge = {{1, 1, 2, 2}};  // f = 0.5
    REQUIRE(satisfaction_rate(edge, c, prompts, vocab, 0.5) == 1.0);
  }
  SECTION("empty response set is rejected") {
    REQUIRE_THROWS_AS(satisfaction_rate({}, c, prompts, vocab, 0.5), std::invalid_argument);
  }
  SECTION("per-response prompts must match the count") {
    std::vector<TokenSeq> two_prompts = {{0}, {0}};
    REQUIRE_THROWS_AS(satisfaction_rate(rs, c, two_prompts, vocab, 0.5),
                      std::invalid_argument);
  }
}

TEST_CASE("repeated trigram rate counts duplicated trigrams over all trigrams") {
  // all distinct trigrams
  REQUIRE(repeated_trigram_rate({1, 2, 3, 4, 5, 6}) == 0.0);
  // too short for any trigram
  REQUIRE(repeated_trigram_rate({1, 2}) == 0.0);
  // (1,2,1) appears twice among 4 trigrams: 1 2 1 2 1 2 -> trigrams
  // (1,2,1),(2,1,2),(1,2,1),(2,1,2): all four are occurrences of duplicated
  // trigrams -> rate 1
  REQUIRE(repeated_trigram_rate({1, 2, 1, 2, 1, 2}) == 1.0);
  // constant sequence: every trigram identical
  REQUIRE(repeated_trigram_rate({3, 3, 3, 3, 3}) == 1.0);
  // exactly one duplicated trigram among five: (1,2,3) twice, others unique
  // seq 1 2 3 9 1 2 3: trigrams (1,2,3),(2,3,9),(3,9,1),(9,1,2),(1,2,3)
  REQUIRE(repeated_trigram_rate({1, 2, 3, 9, 1, 2, 3}) == Catch::Approx(0.4));

  Rng rng(8);
  for (int rep = 0; rep < 30; ++rep) {
    TokenSeq s(12);
    for (auto& t : s) t = static_cast<std::int32_t>(rng.next_u64() % 3);
    const double r = repeated_trigram_rate(s);
    REQUIRE(r >= 0.0);
    REQUIRE(r <= 1.0);
  }
}

TEST_CASE("trace hop column is self-consistent with pairwise hamming") {
  LMBundle lm = small_lm(19);
  TokenSeq prompt = {0};
  SamplerConfig cfg;
  cfg.steps = 10;
  cfg.length = 6;
  cfg.tau = 0.25;
  cfg.seed = 77;
  DabResult res = run_dab(lm, prefer_token_one(), prompt, cfg);

  REQUIRE(res.trace.steps[0].hops == 0);
  for (std::size_t t = 1; t < res.trace.steps.size(); ++t)
    REQUIRE(res.trace.steps[t].hops ==
            hops(res.trace.steps[t].response, res.trace.steps[t - 1].response));
}

TEST_CASE("aggregate reports mean and standard error") {
  Aggregate a = aggregate({2.0, 4.0, 6.0, 8.0});
  REQUIRE(a.mean == 5.0);
  // sample sd = sqrt(20/3), se = sd/2
  REQUIRE(a.stderr_ == Catch::Approx(std::sqrt(20.0 / 3.0) / 2.0).epsilon(1e-12));

  Aggregate one = aggregate({3.5});
  REQUIRE(one.mean == 3.5);
  REQUIRE(one.stderr_ == 0.0);

  Aggregate flat = aggregate({1.0, 1.0, 1.0});
  REQUIRE(flat.stderr_ == 0.0);
  REQUIRE_THROWS_AS(aggregate({}), std::invalid_argument);
}

TEST_CASE("trace summary extracts the reporting quantities") {
  SamplerTrace trace;
  for (int t = 1; t <= 4; ++t) {
    TraceStep ts;
    ts.step = static_cast<std::size_t>(t);
    ts.response = {static_cast<std::int32_t>(t), 1};
    ts.hops = t == 1 ? 0 : 1;
    ts.perplexity = 2.0 * t;
    ts.f_value = 0.1 * t;
    ts.best_f = 0.1 * t;
    trace.steps.push_back(ts);
  }
  TraceSummary s = summarize_trace(trace);
  REQUIRE(s.mean_hops == 1.0);  // steps 2..4 each hop 1
  REQUIRE(s.mean_unique == Catch::Approx((4.0 + 1.0) / 2.0));
  REQUIRE(s.final_perplexity == 8.0);
  REQUIRE(s.best_f == Catch::Approx(0.4));

  SECTION("single-step summary has zero mean hops") {
    SamplerTrace one;
    one.steps.push_back(trace.steps[0]);
    REQUIRE(summarize_trace(one).mean_hops == 0.0);
  }
}
