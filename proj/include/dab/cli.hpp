#pragma once

// configuration schema and subcommand bodies for the dabctl tool. everything
// lives here (not in the tool's main) so tests can drive the commands
// in-process and assert on their outputs.

#include "dab/baselines.hpp"
#include "dab/io.hpp"
#include "dab/metrics.hpp"
#include "dab/synthetic.hpp"

#include "json.hpp"

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

namespace dab {

using nlohmann::json;

struct PathsConfig {
  std::string corpus;
  std::string lm_weights;
  std::string classifier_weights;
  std::string out_dir = "out";
};

struct TrainSection {
  std::size_t lm_steps = 1500;
  std::size_t lm_batch = 6;
  double lm_lr = 0.06;
  double lm_lr_final = 0.006;
  double grad_clip = 1.0;
  double init_scale = 0.02;
  std::size_t classifier_steps = 600;
  std::size_t classifier_hidden = 32;
  std::size_t classifier_batch = 16;
  double classifier_lr = 0.08;
  std::size_t corpus_lines = 400;
  bool synthesize = true;
};

struct BaselineSection {
  double gamma = 0.1;
  double sigma = 0.01;
  bool use_normalizer = true;
};

struct SweepSection {
  std::string parameter;  // weight | tau | topk | steps
  RealVec values;
};

struct RunConfig {
  std::string task = "sentiment";  // sentiment | keyword
  PathsConfig paths;
  SamplerConfig sampler;
  std::size_t chains = 20;
  std::size_t threads = 1;
  std::vector<std::string> prompts;        // whitespace-joined token names
  std::vector<std::string> keywords;       // keyword task targets
  std::string classifier_form = "logit_diff";
  bool classifier_prompt = true;
  double satisfaction_threshold = std::numeric_limits<double>::quiet_NaN();  // task default
  TrainSection train;
  BaselineSection baseline;
  SweepSection sweep;

  // sentiment: the classifier margin at which the positive-class probability
  // is 0.9; keyword: most of the smoothed-match mass present
  double resolved_threshold() const {
    if (!std::isnan(satisfaction_threshold)) return satisfaction_threshold;
    return task == "keyword" ? 0.75 : std::log(0.9 / 0.1);
  }
  std::string corpus_path() const {
    return paths.corpus.empty() ? paths.out_dir + "/corpus.txt" : paths.corpus;
  }
  std::string lm_path() const {
    return paths.lm_weights.empty() ? paths.out_dir + "/lm.dabw" : paths.lm_weights;
  }
  std::string classifier_path() const {
    return paths.classifier_weights.empty() ? paths.out_dir + "/classifier.dabw"
                                            : paths.classifier_weights;
  }

  void validate() const {
    require(task == "sentiment" || task == "keyword", "config: task must be sentiment|keyword");
    require(chains >= 1, "config: chains must be >= 1");
    require(threads >= 1, "config: threads must be >= 1");
    require(classifier_form == "logit_diff" || classifier_form == "log_softmax",
            "config: classifier_form must be logit_diff|log_softmax");
    sampler.validate();
    if (!std::isnan(satisfaction_threshold))
      require(std::isfinite(satisfaction_threshold), "config: threshold must be finite");
  }
};

namespace detail {

template <class T>
inline void read_field(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> known,
                           const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw std::invalid_argument("config: unknown key '" + it.key() + "' in " + where);
  }
}

}  // namespace detail

inline RunConfig parse_config(const json& j) {
  detail::reject_unknown(j,
                         {"task", "paths", "sampler", "chains", "threads", "prompts", "keywords",
                          "classifier_form", "classifier_prompt", "satisfaction_threshold",
                          "train", "baseline", "sweep"},
                         "top level");
  RunConfig c;
  detail::read_field(j, "task", c.task);
  if (j.contains("paths")) {
    const json& p = j.at("paths");
    detail::reject_unknown(p, {"corpus", "lm_weights", "classifier_weights", "out_dir"}, "paths");
    detail::read_field(p, "corpus", c.paths.corpus);
    detail::read_field(p, "lm_weights", c.paths.lm_weights);
    detail::read_field(p, "classifier_weights", c.paths.classifier_weights);
    detail::read_field(p, "out_dir", c.paths.out_dir);
  }
  if (j.contains("sampler")) {
    const json& s = j.at("sampler");
    detail::reject_unknown(s, {"steps", "length", "tau", "topk", "weight", "seed", "timing"},
                           "sampler");
    detail::read_field(s, "steps", c.sampler.steps);
    detail::read_field(s, "length", c.sampler.length);
    detail::read_field(s, "tau", c.sampler.tau);
    detail::read_field(s, "topk", c.sampler.topk);
    detail::read_field(s, "weight", c.sampler.weight);
    detail::read_field(s, "seed", c.sampler.seed);
    detail::read_field(s, "timing", c.sampler.timing);
  }
  detail::read_field(j, "chains", c.chains);
  detail::read_field(j, "threads", c.threads);
  detail::read_field(j, "prompts", c.prompts);
  detail::read_field(j, "keywords", c.keywords);
  detail::read_field(j, "classifier_form", c.classifier_form);
  detail::read_field(j, "classifier_prompt", c.classifier_prompt);
  detail::read_field(j, "satisfaction_threshold", c.satisfaction_threshold);
  if (j.contains("train")) {
    const json& t = j.at("train");
    detail::reject_unknown(t,
                           {"lm_steps", "lm_batch", "lm_lr", "lm_lr_final", "grad_clip",
                            "init_scale", "classifier_steps", "classifier_hidden",
                            "classifier_batch", "classifier_lr", "corpus_lines", "synthesize"},
                           "train");
    detail::read_field(t, "lm_steps", c.train.lm_steps);
    detail::read_field(t, "lm_batch", c.train.lm_batch);
    detail::read_field(t, "lm_lr", c.train.lm_lr);
    detail::read_field(t, "lm_lr_final", c.train.lm_lr_final);
    detail::read_field(t, "grad_clip", c.train.grad_clip);
    detail::read_field(t, "init_scale", c.train.init_scale);
    detail::read_field(t, "classifier_steps", c.train.classifier_steps);
    detail::read_field(t, "classifier_hidden", c.train.classifier_hidden);
    detail::read_field(t, "classifier_batch", c.train.classifier_batch);
    detail::read_field(t, "classifier_lr", c.train.classifier_lr);
    detail::read_field(t, "corpus_lines", c.train.corpus_lines);
    detail::read_field(t, "synthesize", c.train.synthesize);
  }
  if (j.contains("baseline")) {
    const json& b = j.at("baseline");
    detail::reject_unknown(b, {"gamma", "sigma", "use_normalizer"}, "baseline");
    detail::read_field(b, "gamma", c.baseline.gamma);
    detail::read_field(b, "sigma", c.baseline.sigma);
    detail::read_field(b, "use_normalizer", c.baseline.use_normalizer);
  }
  if (j.contains("sweep")) {
    const json& s = j.at("sweep");
    detail::reject_unknown(s, {"parameter", "values"}, "sweep");
    detail::read_field(s, "parameter", c.sweep.parameter);
    detail::read_field(s, "values", c.sweep.values);
  }
  c.validate();
  return c;
}

inline json serialize_config(const RunConfig& c) {
  json j;
  j["task"] = c.task;
  j["paths"] = {{"corpus", c.paths.corpus},
                {"lm_weights", c.paths.lm_weights},
                {"classifier_weights", c.paths.classifier_weights},
                {"out_dir", c.paths.out_dir}};
  j["sampler"] = {{"steps", c.sampler.steps},   {"length", c.sampler.length},
                  {"tau", c.sampler.tau},       {"topk", c.sampler.topk},
                  {"weight", c.sampler.weight}, {"seed", c.sampler.seed},
                  {"timing", c.sampler.timing}};
  j["chains"] = c.chains;
  j["threads"] = c.threads;
  j["prompts"] = c.prompts;
  j["keywords"] = c.keywords;
  j["classifier_form"] = c.classifier_form;
  j["classifier_prompt"] = c.classifier_prompt;
  if (!std::isnan(c.satisfaction_threshold))
    j["satisfaction_threshold"] = c.satisfaction_threshold;
  j["train"] = {{"lm_steps", c.train.lm_steps},
                {"lm_batch", c.train.lm_batch},
                {"lm_lr", c.train.lm_lr},
                {"lm_lr_final", c.train.lm_lr_final},
                {"grad_clip", c.train.grad_clip},
                {"init_scale", c.train.init_scale},
                {"classifier_steps", c.train.classifier_steps},
                {"classifier_hidden", c.train.classifier_hidden},
                {"classifier_batch", c.train.classifier_batch},
                {"classifier_lr", c.train.classifier_lr},
                {"corpus_lines", c.train.corpus_lines},
                {"synthesize", c.train.synthesize}};
  j["baseline"] = {{"gamma", c.baseline.gamma},
                   {"sigma", c.baseline.sigma},
                   {"use_normalizer", c.baseline.use_normalizer}};
  if (!c.sweep.parameter.empty())
    j["sweep"] = {{"parameter", c.sweep.parameter}, {"values", c.sweep.values}};
  return j;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open " + path);
  json j;
  in >> j;
  return parse_config(j);
}

namespace detail {

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << text;
  if (!out) throw std::runtime_error("short write: " + path);
}

inline void snapshot_config(const RunConfig& c) {
  write_text(c.paths.out_dir + "/config.json", serialize_config(c).dump(2) + "\n");
}

inline TokenSeq parse_prompt(const std::string& text, const Vocabulary& vocab) {
  std::istringstream ls(text);
  TokenSeq p;
  std::string tok;
  while (ls >> tok) p.push_back(vocab.id(tok));
  require(!p.empty(), "config: empty prompt string");
  return p;
}

inline std::vector<TokenSeq> resolve_prompts(const RunConfig& c, const Vocabulary& vocab) {
  if (!c.prompts.empty()) {
    std::vector<TokenSeq> out;
    out.reserve(c.prompts.size());
    for (const auto& s : c.prompts) out.push_back(parse_prompt(s, vocab));
    return out;
  }
  // the stock prompt set only exists for the shipped synthetic vocabulary
  if (vocab.find("w0").has_value() && vocab.find("<s>").has_value())
    return default_prompts(vocab);
  throw std::invalid_argument("config: prompts required for a non-synthetic vocabulary");
}

inline ConstraintHandle build_constraint(const RunConfig& c, const LMBundle& lm) {
  if (c.task == "keyword") {
    std::vector<std::string> names = c.keywords;
    if (names.empty()) {
      // default: every kw* token in the vocabulary
      for (const auto& t : lm.vocab.tokens())
        if (t.rfind("kw", 0) == 0) names.push_back(t);
      require(!names.empty(), "config: keyword task needs keywords");
    }
    return ConstraintHandle::keyword(keyword_ids(lm.vocab, names), lm.vocab.size());
  }
  ClassifierHead head = load_classifier(c.classifier_path(), lm.vocab);
  const ClassifierForm form = c.classifier_form == "log_softmax" ? ClassifierForm::log_softmax
                                                                 : ClassifierForm::logit_diff;
  return ConstraintHandle::classifier(lm.embed, head, form, c.classifier_prompt);
}

// run one sampler per chain with deterministic per-chain seed streams and a
// bounded worker pool; results land in a vector indexed by chain, so the
// aggregation below never depends on scheduling order
template <class RunFn>
inline std::vector<DabResult> run_chains(const RunConfig& c, const std::vector<TokenSeq>& prompts,
                                         RunFn&& one_chain) {
  std::vector<DabResult> results(c.chains);
  std::atomic<std::size_t> next{0};
  const std::size_t workers = std::min(c.threads, c.chains);
  Rng master(c.sampler.seed);

  std::vector<std::uint64_t> seeds(c.chains);
  for (std::size_t i = 0; i < c.chains; ++i) seeds[i] = master.fork(i).seed();

  auto work = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= c.chains) return;
      SamplerConfig sc = c.sampler;
      sc.seed = seeds[i];
      results[i] = one_chain(sc, prompts[i % prompts.size()]);
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  return results;
}

struct RunMetrics {
  Aggregate satisfaction, mean_hops, mean_unique, final_perplexity, best_f;
};

inline RunMetrics collect_metrics(const std::vector<DabResult>& results, double threshold) {
  RealVec sat, hops_v, uniq, ppl, bests;
  for (const DabResult& r : results) {
    TraceSummary s = summarize_trace(r.trace);
    sat.push_back(r.best_f >= threshold ? 1.0 : 0.0);
    hops_v.push_back(s.mean_hops);
    uniq.push_back(s.mean_unique);
    ppl.push_back(s.final_perplexity);
    bests.push_back(r.best_f);
  }
  RunMetrics m;
  m.satisfaction = aggregate(sat);
  m.mean_hops = aggregate(hops_v);
  m.mean_unique = aggregate(uniq);
  m.final_perplexity = aggregate(ppl);
  m.best_f = aggregate(bests);
  return m;
}

inline json metrics_json(const RunMetrics& m) {
  auto pair = [](const Aggregate& a) { return json{{"mean", a.mean}, {"stderr", a.stderr_}}; };
  return json{{"satisfaction", pair(m.satisfaction)},
              {"mean_hops", pair(m.mean_hops)},
              {"mean_unique", pair(m.mean_unique)},
              {"final_perplexity", pair(m.final_perplexity)},
              {"best_f", pair(m.best_f)}};
}

}  // namespace detail

// ---- train ----

inline int cmd_train(const RunConfig& c, std::ostream& log) {
  c.validate();
  std::filesystem::create_directories(c.paths.out_dir);

  SyntheticSpec spec;
  Vocabulary vocab = synthetic_vocabulary(spec);
  std::vector<TokenSeq> corpus;
  std::vector<int> labels;
  if (c.train.synthesize) {
    Rng data_rng(c.sampler.seed);
    corpus = synthetic_corpus(spec, c.train.corpus_lines, data_rng, &labels);
    write_corpus(c.corpus_path(), corpus, vocab, &labels);
  } else {
    corpus = read_corpus(c.corpus_path(), vocab, &labels);
  }

  TrainConfig tc;
  tc.steps = c.train.lm_steps;
  tc.batch = c.train.lm_batch;
  tc.lr = c.train.lm_lr;
  tc.lr_final = c.train.lm_lr_final;
  tc.grad_clip = c.train.grad_clip;
  tc.init_scale = c.train.init_scale;

  Rng lm_rng = Rng(c.sampler.seed).fork(1);
  TrainStats stats;
  LMBundle lm = train_tiny_lm(corpus, vocab, vocab.id("<s>"), tc, lm_rng, &stats);
  save_lm(c.lm_path(), lm);

  ClassifierTrainConfig cc;
  cc.hidden = c.train.classifier_hidden;
  cc.steps = c.train.classifier_steps;
  cc.batch = c.train.classifier_batch;
  cc.lr = c.train.classifier_lr;
  Rng cls_rng = Rng(c.sampler.seed).fork(2);
  double acc = 0.0;
  ClassifierHead head = train_classifier_head(corpus, labels, lm.embed, cc, cls_rng, &acc);
  save_classifier(c.classifier_path(), head, vocab);

  char line[160];
  std::snprintf(line, sizeof line,
                "trained decoder: holdout perplexity %.4f (vocab %zu)\n"
                "trained classifier head: train accuracy %.4f\n",
                stats.holdout_perplexity, vocab.size(), acc);
  detail::write_text(c.paths.out_dir + "/report.txt", line);
  // pin resolved artifact paths so downstream commands can point --config at
  // this snapshot and still find the weights under a different --out
  RunConfig snap = c;
  snap.paths.corpus = c.corpus_path();
  snap.paths.lm_weights = c.lm_path();
  snap.paths.classifier_weights = c.classifier_path();
  detail::snapshot_config(snap);
  log << line;
  return 0;
}

// ---- generate ----

inline int cmd_generate(const RunConfig& c, std::ostream& log) {
  c.validate();
  std::filesystem::create_directories(c.paths.out_dir + "/traces");

  LMBundle lm = load_lm(c.lm_path());
  ConstraintHandle constraint = detail::build_constraint(c, lm);
  std::vector<TokenSeq> prompts = detail::resolve_prompts(c, lm.vocab);

  std::vector<DabResult> results =
      detail::run_chains(c, prompts, [&](const SamplerConfig& sc, const TokenSeq& prompt) {
        return run_dab(lm, constraint, prompt, sc);
      });

  for (std::size_t i = 0; i < results.size(); ++i) {
    char leaf[48];
    std::snprintf(leaf, sizeof leaf, "/traces/chain_%03zu.csv", i);
    write_trace_csv(c.paths.out_dir + leaf, results[i].trace);
  }

  const double threshold = c.resolved_threshold();
  detail::RunMetrics m = detail::collect_metrics(results, threshold);
  json mj = detail::metrics_json(m);
  mj["chains"] = c.chains;
  mj["task"] = c.task;
  mj["threshold"] = threshold;
  detail::write_text(c.paths.out_dir + "/metrics.json", mj.dump(2) + "\n");

  std::ostringstream rep;
  rep << "chains " << c.chains << ", steps " << c.sampler.steps << ", length "
      << c.sampler.length << "\n";
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "satisfaction %.4f +/- %.4f (threshold %.4f)\n"
                "mean hops %.4f +/- %.4f\nmean unique tokens %.4f +/- %.4f\n"
                "final perplexity %.4f +/- %.4f\nbest f %.4f +/- %.4f\n",
                m.satisfaction.mean, m.satisfaction.stderr_, threshold, m.mean_hops.mean,
                m.mean_hops.stderr_, m.mean_unique.mean, m.mean_unique.stderr_,
                m.final_perplexity.mean, m.final_perplexity.stderr_, m.best_f.mean,
                m.best_f.stderr_);
  rep << buf;
  detail::write_text(c.paths.out_dir + "/report.txt", rep.str());
  detail::snapshot_config(c);
  log << rep.str();
  return 0;
}

// ---- ablate ----

inline int cmd_ablate(const RunConfig& c, std::ostream& log) {
  c.validate();
  require(!c.sweep.parameter.empty() && !c.sweep.values.empty(),
          "config: ablate needs sweep.parameter and sweep.values");
  const std::string& p = c.sweep.parameter;
  require(p == "weight" || p == "tau" || p == "topk" || p == "steps",
          "config: sweep parameter must be weight|tau|topk|steps");
  std::filesystem::create_directories(c.paths.out_dir);

  LMBundle lm = load_lm(c.lm_path());
  ConstraintHandle constraint = detail::build_constraint(c, lm);
  std::vector<TokenSeq> prompts = detail::resolve_prompts(c, lm.vocab);

  RealVec values = c.sweep.values;
  std::sort(values.begin(), values.end());

  std::ostringstream csv;
  csv << "parameter,value,satisfaction,perplexity\n";
  for (double v : values) {
    RunConfig cv = c;
    if (p == "weight") {
      cv.sampler.weight = v;
    } else if (p == "tau") {
      cv.sampler.tau = v;
    } else if (p == "topk") {
      cv.sampler.topk = static_cast<std::size_t>(v);
      require(static_cast<double>(cv.sampler.topk) == v, "config: topk values must be integral");
    } else {
      cv.sampler.steps = static_cast<std::size_t>(v);
      require(static_cast<double>(cv.sampler.steps) == v, "config: steps values must be integral");
    }
    cv.validate();
    std::vector<DabResult> results =
        detail::run_chains(cv, prompts, [&](const SamplerConfig& sc, const TokenSeq& prompt) {
          return run_dab(lm, constraint, prompt, sc);
        });
    detail::RunMetrics m = detail::collect_metrics(results, cv.resolved_threshold());
    csv << p << ',' << detail::format_double(v) << ','
        << detail::format_double(m.satisfaction.mean) << ','
        << detail::format_double(m.final_perplexity.mean) << '\n';
  }
  detail::write_text(c.paths.out_dir + "/ablation.csv", csv.str());
  detail::snapshot_config(c);
  log << "wrote " << c.paths.out_dir << "/ablation.csv (" << values.size() << " rows)\n";
  return 0;
}

// ---- compare ----

inline int cmd_compare(const RunConfig& c, std::ostream& log) {
  c.validate();
  std::filesystem::create_directories(c.paths.out_dir);

  LMBundle lm = load_lm(c.lm_path());
  ConstraintHandle constraint = detail::build_constraint(c, lm);
  std::vector<TokenSeq> prompts = detail::resolve_prompts(c, lm.vocab);

  ContinuousParams norm{c.baseline.gamma, c.baseline.sigma, true};
  ContinuousParams unnorm{c.baseline.gamma, c.baseline.sigma, false};

  std::ostringstream csv;
  csv << "method,chain,step,f_value,best_f,hops,perplexity,lm_forward_count,"
         "lm_backward_count,constraint_backward_count\n";

  auto emit = [&](const char* method, std::size_t chain, const SamplerTrace& trace) {
    for (const TraceStep& ts : trace.steps)
      csv << method << ',' << chain << ',' << ts.step << ','
          << detail::format_double(ts.f_value) << ',' << detail::format_double(ts.best_f) << ','
          << ts.hops << ',' << detail::format_double(ts.perplexity) << ',' << ts.lm_forwards
          << ',' << ts.lm_backwards << ',' << ts.constraint_backwards << '\n';
  };

  Rng master(c.sampler.seed);
  for (std::size_t chain = 0; chain < c.chains; ++chain) {
    SamplerConfig sc = c.sampler;
    sc.seed = master.fork(chain).seed();
    const TokenSeq& prompt = prompts[chain % prompts.size()];

    emit("dab", chain, run_dab(lm, constraint, prompt, sc).trace);
    emit("continuous_norm", chain, run_continuous(lm, constraint, prompt, sc, norm).trace);
    emit("continuous_unnorm", chain, run_continuous(lm, constraint, prompt, sc, unnorm).trace);

    // the greedy arm is a fixed point: one decode, repeated rows, zero
    // counter deltas after the first
    OpCounters oc;
    SamplerConfig gc = sc;
    gc.weight = 0.0;
    BiasMatrix zero(sc.length, lm.vocab.size());
    GenerateResult gen = generate_biased(lm, prompt, zero, gc, &oc);
    const double f =
        constraint.value(OneHotSeq::from_tokens(gen.tokens, lm.vocab.size()), prompt);
    SamplerTrace gtrace;
    for (std::size_t t = 1; t <= sc.steps; ++t) {
      TraceStep ts;
      ts.step = t;
      ts.response = gen.tokens;
      ts.f_value = f;
      ts.best_f = f;
      ts.hops = 0;
      ts.perplexity = detail::perplexity_from_logits(gen.logits, gen.tokens);
      ts.lm_forwards = t == 1 ? static_cast<std::uint64_t>(oc.lm_forward) : 0;
      gtrace.steps.push_back(ts);
    }
    emit("greedy", chain, gtrace);
  }
  detail::write_text(c.paths.out_dir + "/compare.csv", csv.str());
  detail::snapshot_config(c);
  log << "wrote " << c.paths.out_dir << "/compare.csv\n";
  return 0;
}

// ---- validate ----

namespace detail {

struct CheckReport {
  std::string name;
  bool pass = false;
  std::string message;
};

inline LMBundle validation_lm(std::uint64_t seed, std::size_t vocab_n, std::size_t context = 24) {
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

// brute-force the categorical update distribution in long double, entirely
// independently of ProbVec/softmax
inline std::vector<long double> brute_force_update(const RealVec& grad_row, std::int32_t current,
                                                   double tau,
                                                   const std::vector<std::int32_t>& allowed) {
  std::vector<long double> e;
  for (std::int32_t j : allowed)
    e.push_back(j == current ? 0.0L
                             : static_cast<long double>(grad_row[static_cast<std::size_t>(j)]) /
                                   static_cast<long double>(tau));
  long double mx = e[0];
  for (long double v : e) mx = std::max(mx, v);
  long double z = 0.0L;
  for (long double& v : e) {
    v = std::exp(v - mx);
    z += v;
  }
  std::vector<long double> full(grad_row.size(), 0.0L);
  for (std::size_t a = 0; a < allowed.size(); ++a)
    full[static_cast<std::size_t>(allowed[a])] = e[a] / z;
  return full;
}

}  // namespace detail

// named invariant checks; prints one PASS/FAIL line per check. returns 0 when
// everything passes, 1 otherwise. inject_gradient_bug perturbs the classifier
// gradient before the finite-difference comparison — the harness uses it to
// prove the validator can actually catch a broken gradient.
inline int cmd_validate(const RunConfig& c, std::ostream& log, bool inject_gradient_bug = false) {
  c.validate();
  std::vector<detail::CheckReport> reports;

  auto run_check = [&](const std::string& name, auto&& body) {
    detail::CheckReport r;
    r.name = name;
    try {
      body(r);
      r.pass = r.message.empty();
    } catch (const std::exception& e) {
      r.pass = false;
      r.message = e.what();
    }
    reports.push_back(r);
  };

  run_check("proposal-analytic", [&](detail::CheckReport& r) {
    Rng rng(101);
    for (int rep = 0; rep < 200; ++rep) {
      const std::size_t vocab = 2 + rng.next_u64() % 4;  // up to 5
      RealVec grad(vocab);
      for (double& g : grad) g = rng.next_gaussian() * 4.0;
      const auto cur = static_cast<std::int32_t>(rng.next_u64() % vocab);
      std::vector<std::int32_t> allowed;
      for (std::size_t j = 0; j < vocab; ++j)
        if (j == static_cast<std::size_t>(cur) || rng.next_unit() < 0.7)
          allowed.push_back(static_cast<std::int32_t>(j));
      const double tau = 0.05 + rng.next_unit();
      ProbVec got = dlp_distribution(grad, cur, tau, allowed);
      auto want = detail::brute_force_update(grad, cur, tau, allowed);
      for (std::size_t j = 0; j < vocab; ++j)
        if (std::abs(static_cast<double>(want[j]) - got[j]) > 1e-9) {
          r.message = "analytic update distribution off by more than 1e-9";
          return;
        }
    }
  });

  run_check("proposal-empirical", [&](detail::CheckReport& r) {
    const std::size_t vocab = 5, n = 3;
    GradMatrix grad(n, vocab);
    Rng grng(7);
    for (double& g : grad.data()) g = grng.next_gaussian();
    TokenSeq current = {4, 0, 2};
    OneHotSeq cur = OneHotSeq::from_tokens(current, vocab);
    std::vector<std::vector<std::int32_t>> allowed = {
        {0, 1, 2, 3, 4}, {0, 1, 3}, {1, 2, 4}};
    const double tau = 0.5;
    const int draws = 100000;
    Matrix counts(n, vocab);
    Rng rng(2027);
    for (int d = 0; d < draws; ++d) {
      TokenSeq prop = dlp_propose(cur, grad, tau, allowed, rng);
      for (std::size_t i = 0; i < n; ++i) counts(i, static_cast<std::size_t>(prop[i])) += 1.0;
    }
    for (std::size_t i = 0; i < n; ++i) {
      ProbVec expect = dlp_distribution(grad.row(i), current[i], tau, allowed[i]);
      double tv = 0.0;
      for (std::size_t j = 0; j < vocab; ++j)
        tv += std::abs(counts(i, j) / draws - expect[j]);
      if (tv * 0.5 > 0.01) {
        r.message = "empirical update frequencies drift beyond TV 0.01";
        return;
      }
    }
  });

  run_check("classifier-gradient", [&](detail::CheckReport& r) {
    Rng rng(55);
    const std::size_t vocab = 8, d = 6, n = 4;
    Matrix emb(vocab, d);
    for (double& x : emb.data()) x = rng.next_gaussian() * 0.5;
    ClassifierHead head;
    head.w1 = Matrix(d, 5);
    head.w2 = Matrix(5, 2);
    head.b1.assign(5, 0.0);
    head.b2.assign(2, 0.0);
    for (double& x : head.w1.data()) x = rng.next_gaussian() * 0.4;
    for (double& x : head.w2.data()) x = rng.next_gaussian() * 0.4;
    for (double& x : head.b1) x = rng.next_gaussian() * 0.1;
    for (double& x : head.b2) x = rng.next_gaussian() * 0.1;
    ConstraintHandle con = ConstraintHandle::classifier(emb, head);
    TokenSeq prompt = {0, 3};

    for (int rep = 0; rep < 100; ++rep) {
      OneHotSeq b;
      b.m = Matrix(n, vocab);
      for (double& x : b.m.data()) x = std::abs(rng.next_gaussian());
      GradMatrix g = con.gradient(b, prompt);
      if (inject_gradient_bug) g(0, 0) += 1e-3;
      // probe a handful of coordinates per input
      for (int probe = 0; probe < 5; ++probe) {
        const std::size_t i = rng.next_u64() % n;
        const std::size_t j = rng.next_u64() % vocab;
        auto f = [&](double v) {
          OneHotSeq bb = b;
          bb.m(i, j) = v;
          return con.value(bb, prompt);
        };
        const double x0 = b.m(i, j);
        const double h = 1e-5;
        const double fd = (f(x0 + h) - f(x0 - h)) / (2.0 * h);
        const double an = g(i, j);
        const double rel = std::abs(fd - an) / std::max({1e-6, std::abs(fd), std::abs(an)});
        if (rel > 1e-4) {
          char msg[120];
          std::snprintf(msg, sizeof msg,
                        "classifier gradient mismatch at (%zu,%zu): rel err %.3g", i, j, rel);
          r.message = msg;
          return;
        }
      }
    }
  });

  run_check("keyword-gradient", [&](detail::CheckReport& r) {
    Rng rng(66);
    const std::size_t vocab = 8, n = 4;
    ConstraintHandle con = ConstraintHandle::keyword({2, 5}, vocab);
    TokenSeq prompt = {0};
    for (int rep = 0; rep < 100; ++rep) {
      OneHotSeq b;
      b.m = Matrix(n, vocab);
      for (double& x : b.m.data()) x = std::abs(rng.next_gaussian()) * 0.5;
      GradMatrix g = con.gradient(b, prompt);
      for (int probe = 0; probe < 5; ++probe) {
        const std::size_t i = rng.next_u64() % n;
        const std::size_t j = rng.next_u64() % vocab;
        auto f = [&](double v) {
          OneHotSeq bb = b;
          bb.m(i, j) = v;
          return con.value(bb, prompt);
        };
        const double x0 = b.m(i, j);
        const double h = 1e-5;
        const double fd = (f(x0 + h) - f(x0 - h)) / (2.0 * h);
        const double an = g(i, j);
        const double rel = std::abs(fd - an) / std::max({1e-6, std::abs(fd), std::abs(an)});
        if (rel > 1e-4) {
          r.message = "keyword gradient mismatch beyond 1e-4 relative";
          return;
        }
      }
    }
  });

  run_check("gibbs-tiny", [&](detail::CheckReport& r) {
    LMBundle lm = detail::validation_lm(13, 8);
    TokenSeq prompt = {0};
    auto con = ConstraintHandle::custom(
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
    TokenSeq greedy = greedy_decode(lm, prompt, 4);
    const double fg = con.value(OneHotSeq::from_tokens(greedy, lm.vocab.size()), prompt);
    SamplerConfig sc;
    sc.steps = 10;
    sc.length = 4;
    sc.tau = 0.2;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      sc.seed = seed;
      DabResult res = run_dab(lm, con, prompt, sc);
      double mx = -1e300;
      for (const TraceStep& ts : res.trace.steps) mx = std::max(mx, ts.f_value);
      if (res.best_f != mx) {
        r.message = "returned best differs from the trace maximum";
        return;
      }
      if (res.best_f < fg) {
        r.message = "returned best scores below the greedy decode";
        return;
      }
    }
  });

  run_check("joint-marginal", [&](detail::CheckReport& r) {
    LMBundle lm = detail::validation_lm(23, 6);
    TokenSeq prompt = {0};
    auto con = ConstraintHandle::custom(
        [](const OneHotSeq& b, const TokenSeq&) {
          double s = 0.0;
          for (std::size_t i = 0; i < b.m.rows(); ++i)
            for (std::size_t j = 0; j < b.m.cols(); ++j)
              s += b.m(i, j) * 0.21 * static_cast<double>(j + i);
          return s;
        },
        [](const OneHotSeq& b, const TokenSeq&) {
          GradMatrix g(b.m.rows(), b.m.cols());
          for (std::size_t i = 0; i < b.m.rows(); ++i)
            for (std::size_t j = 0; j < b.m.cols(); ++j)
              g(i, j) = 0.21 * static_cast<double>(j + i);
          return g;
        });
    SamplerConfig sc;
    sc.length = 2;
    JointTable t = enumerate_joint(lm, con, prompt, 2, 3, sc);
    double total = 0.0;
    for (std::size_t bi = 0; bi < t.b_values.size(); ++bi) {
      const double want = t.b_exp_f[bi] / t.z_b;
      if (std::abs(t.b_marginal[bi] - want) > 1e-9) {
        r.message = "bias marginal differs from exp(f)/Z beyond 1e-9";
        return;
      }
      total += t.b_marginal[bi];
    }
    if (std::abs(total - 1.0) > 1e-9) r.message = "bias marginal does not sum to 1";
  });

  run_check("enumeration-cap", [&](detail::CheckReport& r) {
    LMBundle lm = detail::validation_lm(2, 24, 40);
    SamplerConfig sc;
    sc.length = 3;
    auto con = ConstraintHandle::custom([](const OneHotSeq&, const TokenSeq&) { return 0.0; });
    try {
      enumerate_joint(lm, con, {0}, 3, 24, sc);
      r.message = "oversized enumeration was not refused";
    } catch (const std::invalid_argument&) {
      // expected refusal
    }
  });

  run_check("degenerations", [&](detail::CheckReport& r) {
    LMBundle lm = detail::validation_lm(99, 6);
    TokenSeq prompt = {0};
    TokenSeq greedy = greedy_decode(lm, prompt, 5);

    SamplerConfig sc;
    sc.steps = 1;
    sc.length = 5;
    sc.weight = 0.0;
    auto zero = ConstraintHandle::custom(
        [](const OneHotSeq&, const TokenSeq&) { return 0.0; },
        [](const OneHotSeq& b, const TokenSeq&) { return GradMatrix(b.m.rows(), b.m.cols()); });
    if (run_dab(lm, zero, prompt, sc).best != greedy) {
      r.message = "zero-weight run differs from greedy decoding";
      return;
    }
    SamplerConfig sg;
    sg.length = 5;
    BiasMatrix zb(5, lm.vocab.size());
    if (generate_biased(lm, prompt, zb, sg).tokens != greedy) {
      r.message = "zero-penalty generation differs from greedy decoding";
      return;
    }
    std::vector<RealVec> logits = {{1.0, 3.0, 2.0, 0.0, -1.0, 5.0}};
    auto sets = topk_mask(logits, lm.vocab.size(), {2});
    std::vector<std::int32_t> all(lm.vocab.size());
    std::iota(all.begin(), all.end(), 0);
    if (sets[0] != all) r.message = "full-k mask is not the whole vocabulary";
  });

  int failures = 0;
  for (const detail::CheckReport& r : reports) {
    if (r.pass) {
      log << "PASS " << r.name << "\n";
    } else {
      ++failures;
      log << "FAIL " << r.name << ": " << r.message << "\n";
    }
  }
  log << (failures ? "validation failed\n" : "all checks passed\n");
  return failures ? 1 : 0;
}

}  // namespace dab
