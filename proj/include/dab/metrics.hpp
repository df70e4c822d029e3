#pragma once

// exploration / fluency / throughput measurements over sampler traces, plus
// the aggregation helpers the CLI uses for reporting. everything here is pure
// arithmetic over already-recorded data.

#include "dab/constraints.hpp"
#include "dab/sampler.hpp"

#include <cmath>
#include <map>
#include <set>
#include <tuple>

namespace dab {

inline std::size_t hops(const TokenSeq& a, const TokenSeq& b) {
  require(a.size() == b.size(), "hops: length mismatch");
  std::size_t h = 0;
  for (std::size_t i = 0; i < a.size(); ++i) h += a[i] != b[i];
  return h;
}

struct UniqueTokenStats {
  std::vector<std::size_t> per_position;  // distinct tokens seen at each position
  double mean = 0.0;
};

// how many distinct tokens each position visited across the whole trace — the
// exploration footprint of the chain
inline UniqueTokenStats unique_tokens(const SamplerTrace& trace) {
  require(!trace.steps.empty(), "unique_tokens: empty trace");
  const std::size_t n = trace.steps.front().response.size();
  std::vector<std::set<std::int32_t>> seen(n);
  for (const TraceStep& ts : trace.steps) {
    require(ts.response.size() == n, "unique_tokens: ragged trace");
    for (std::size_t i = 0; i < n; ++i) seen[i].insert(ts.response[i]);
  }
  UniqueTokenStats out;
  out.per_position.reserve(n);
  double sum = 0.0;
  for (const auto& s : seen) {
    out.per_position.push_back(s.size());
    sum += static_cast<double>(s.size());
  }
  out.mean = sum / static_cast<double>(n);
  return out;
}

inline double tokens_per_second(std::size_t n, std::size_t s, double elapsed_seconds) {
  require(elapsed_seconds > 0.0, "tokens_per_second: elapsed time must be positive");
  return static_cast<double>(n) * static_cast<double>(s) / elapsed_seconds;
}

// fraction of responses whose constraint value clears the threshold; each
// response is scored at its hard one-hot. prompts: either one shared prompt
// or one per response.
inline double satisfaction_rate(const std::vector<TokenSeq>& responses,
                                const ConstraintHandle& constraint,
                                const std::vector<TokenSeq>& prompts, std::size_t vocab_size,
                                double threshold, OpCounters* counters = nullptr) {
  require(!responses.empty(), "satisfaction_rate: empty response set");
  require(prompts.size() == 1 || prompts.size() == responses.size(),
          "satisfaction_rate: prompts must be shared or one per response");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < responses.size(); ++i) {
    const TokenSeq& prompt = prompts.size() == 1 ? prompts[0] : prompts[i];
    const double f =
        constraint.value(OneHotSeq::from_tokens(responses[i], vocab_size), prompt, counters);
    hits += f >= threshold;
  }
  return static_cast<double>(hits) / static_cast<double>(responses.size());
}

// repeated trigrams / total trigrams; sequences shorter than 3 tokens have no
// trigrams and rate 0
inline double repeated_trigram_rate(const TokenSeq& seq) {
  if (seq.size() < 3) return 0.0;
  std::map<std::tuple<std::int32_t, std::int32_t, std::int32_t>, std::size_t> counts;
  const std::size_t total = seq.size() - 2;
  for (std::size_t i = 0; i + 2 < seq.size(); ++i)
    ++counts[{seq[i], seq[i + 1], seq[i + 2]}];
  std::size_t repeated = 0;
  for (const auto& [tri, c] : counts)
    if (c > 1) repeated += c;  // every occurrence of a duplicated trigram counts
  return static_cast<double>(repeated) / static_cast<double>(total);
}

struct Aggregate {
  double mean = 0.0;
  double stderr_ = 0.0;  // standard error of the mean; 0 for a single sample
};

inline Aggregate aggregate(const RealVec& xs) {
  require(!xs.empty(), "aggregate: empty sample");
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  if (xs.size() > 1) {
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= static_cast<double>(xs.size() - 1);
  }
  Aggregate a;
  a.mean = mean;
  a.stderr_ = xs.size() > 1 ? std::sqrt(var / static_cast<double>(xs.size())) : 0.0;
  return a;
}

// per-trace summaries used by the CLI report: mean hops per sweep (first
// sweep has no predecessor and is excluded from the mean), mean unique
// tokens, final-step perplexity, best constraint value
struct TraceSummary {
  double mean_hops = 0.0;
  double mean_unique = 0.0;
  double final_perplexity = 0.0;
  double best_f = 0.0;
};

inline TraceSummary summarize_trace(const SamplerTrace& trace) {
  require(!trace.steps.empty(), "summarize_trace: empty trace");
  TraceSummary s;
  if (trace.steps.size() > 1) {
    double h = 0.0;
    for (std::size_t t = 1; t < trace.steps.size(); ++t)
      h += static_cast<double>(trace.steps[t].hops);
    s.mean_hops = h / static_cast<double>(trace.steps.size() - 1);
  }
  s.mean_unique = unique_tokens(trace).mean;
  s.final_perplexity = trace.steps.back().perplexity;
  s.best_f = trace.steps.back().best_f;
  return s;
}

}  // namespace dab
