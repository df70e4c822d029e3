#pragma once

// plain-text weight container + corpus file helpers.
//
// format ("dabw 1"):
//   dabw 1
//   vocab <n> <tok0> <tok1> ...
//   meta <key> <value>          (repeated; integer values)
//   tensor <name> <rows> <cols> (repeated; declaration order = payload order)
//   checksum <16 hex digits>    (fnv-1a over the raw payload bytes)
//   payload <nbytes>
//   <raw little-endian float64, row-major, tensor after tensor>
//
// everything before the payload is line-oriented ascii so a human (or a
// shell pipeline) can inspect shapes without decoding anything.

#include "dab/constraints.hpp"
#include "dab/lm.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace dab {

struct NamedTensor {
  std::string name;
  Matrix values;
};

struct WeightFile {
  std::vector<std::string> vocab;
  std::vector<std::pair<std::string, std::int64_t>> meta;
  std::vector<NamedTensor> tensors;

  std::int64_t meta_value(const std::string& key) const {
    for (const auto& [k, val] : meta)
      if (k == key) return val;
    throw std::invalid_argument("weight file: missing meta key '" + key + "'");
  }
  const Matrix& tensor(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t.values;
    throw std::invalid_argument("weight file: missing tensor '" + name + "'");
  }
};

namespace detail {

inline std::uint64_t fnv1a(const unsigned char* bytes, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

// doubles are serialized as little-endian bit patterns regardless of host
// order so files move between machines
inline void store_f64(double v, unsigned char* out) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  for (int i = 0; i < 8; ++i) out[i] = static_cast<unsigned char>(bits >> (8 * i));
}

inline double load_f64(const unsigned char* in) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(in[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace detail

inline void write_weight_file(const std::string& path, const WeightFile& wf) {
  std::size_t total = 0;
  for (const auto& t : wf.tensors) total += t.values.data().size();

  std::vector<unsigned char> payload(total * 8);
  std::size_t off = 0;
  for (const auto& t : wf.tensors)
    for (double v : t.values.data()) {
      detail::store_f64(v, payload.data() + off);
      off += 8;
    }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "dabw 1\n";
  out << "vocab " << wf.vocab.size();
  for (const auto& tok : wf.vocab) out << ' ' << tok;
  out << '\n';
  for (const auto& [k, v] : wf.meta) out << "meta " << k << ' ' << v << '\n';
  for (const auto& t : wf.tensors)
    out << "tensor " << t.name << ' ' << t.values.rows() << ' ' << t.values.cols() << '\n';

  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx",
                static_cast<unsigned long long>(detail::fnv1a(payload.data(), payload.size())));
  out << "checksum " << hex << '\n';
  out << "payload " << payload.size() << '\n';
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
  if (!out) throw std::runtime_error("short write: " + path);
}

inline WeightFile read_weight_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);

  WeightFile wf;
  std::string line;

  if (!std::getline(in, line) || line != "dabw 1")
    throw std::runtime_error(path + ": not a dabw 1 file");

  std::string checksum_hex;
  std::size_t payload_bytes = 0;
  bool saw_payload = false;

  struct Decl {
    std::string name;
    std::size_t rows, cols;
  };
  std::vector<Decl> decls;

  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "vocab") {
      std::size_t n = 0;
      ls >> n;
      wf.vocab.resize(n);
      for (std::size_t i = 0; i < n; ++i)
        if (!(ls >> wf.vocab[i])) throw std::runtime_error(path + ": truncated vocab line");
    } else if (kind == "meta") {
      std::string k;
      std::int64_t v;
      if (!(ls >> k >> v)) throw std::runtime_error(path + ": bad meta line");
      wf.meta.emplace_back(k, v);
    } else if (kind == "tensor") {
      Decl d;
      if (!(ls >> d.name >> d.rows >> d.cols))
        throw std::runtime_error(path + ": bad tensor line");
      decls.push_back(d);
    } else if (kind == "checksum") {
      if (!(ls >> checksum_hex) || checksum_hex.size() != 16)
        throw std::runtime_error(path + ": bad checksum line");
    } else if (kind == "payload") {
      if (!(ls >> payload_bytes)) throw std::runtime_error(path + ": bad payload line");
      saw_payload = true;
      break;
    } else {
      throw std::runtime_error(path + ": unknown header line '" + kind + "'");
    }
  }
  if (!saw_payload) throw std::runtime_error(path + ": missing payload header");
  if (checksum_hex.empty()) throw std::runtime_error(path + ": missing checksum");

  std::size_t expect = 0;
  for (const auto& d : decls) expect += d.rows * d.cols * 8;
  if (expect != payload_bytes)
    throw std::runtime_error(path + ": payload size does not match tensor shapes");

  std::vector<unsigned char> payload(payload_bytes);
  in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload_bytes));
  if (static_cast<std::size_t>(in.gcount()) != payload_bytes)
    throw std::runtime_error(path + ": truncated payload");

  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx",
                static_cast<unsigned long long>(detail::fnv1a(payload.data(), payload.size())));
  if (checksum_hex != hex) throw std::runtime_error(path + ": checksum mismatch");

  std::size_t off = 0;
  for (const auto& d : decls) {
    NamedTensor t;
    t.name = d.name;
    t.values = Matrix(d.rows, d.cols);
    for (double& v : t.values.data()) {
      v = detail::load_f64(payload.data() + off);
      off += 8;
    }
    wf.tensors.push_back(std::move(t));
  }
  return wf;
}

// ---- decoder weights ----

inline void save_lm(const std::string& path, const LMBundle& lm) {
  WeightFile wf;
  wf.vocab = lm.vocab.tokens();
  wf.meta = {{"embed_dim", static_cast<std::int64_t>(lm.config.embed_dim)},
             {"heads", static_cast<std::int64_t>(lm.config.heads)},
             {"mlp_hidden", static_cast<std::int64_t>(lm.config.mlp_hidden)},
             {"blocks", static_cast<std::int64_t>(lm.config.blocks)},
             {"context", static_cast<std::int64_t>(lm.config.context)}};
  // visit_params fixes the tensor order; reuse it so save/load can't drift
  visit_params(const_cast<LMBundle&>(lm), [&](const std::string& name, std::span<double> s,
                                              std::size_t rows, std::size_t cols) {
    NamedTensor t;
    t.name = name;
    t.values = Matrix(rows, cols);
    std::copy(s.begin(), s.end(), t.values.data().begin());
    wf.tensors.push_back(std::move(t));
  });
  write_weight_file(path, wf);
}

inline LMBundle load_lm(const std::string& path) {
  WeightFile wf = read_weight_file(path);
  LMConfig cfg;
  cfg.embed_dim = static_cast<std::size_t>(wf.meta_value("embed_dim"));
  cfg.heads = static_cast<std::size_t>(wf.meta_value("heads"));
  cfg.mlp_hidden = static_cast<std::size_t>(wf.meta_value("mlp_hidden"));
  cfg.blocks = static_cast<std::size_t>(wf.meta_value("blocks"));
  cfg.context = static_cast<std::size_t>(wf.meta_value("context"));

  LMBundle lm(Vocabulary(wf.vocab), cfg);
  std::size_t idx = 0;
  visit_params(lm, [&](const std::string& name, std::span<double> s, std::size_t rows,
                       std::size_t cols) {
    if (idx >= wf.tensors.size()) throw std::runtime_error(path + ": too few tensors");
    const NamedTensor& t = wf.tensors[idx++];
    if (t.name != name)
      throw std::runtime_error(path + ": tensor '" + t.name + "' where '" + name +
                               "' was expected");
    if (t.values.rows() != rows || t.values.cols() != cols)
      throw std::runtime_error(path + ": tensor '" + name + "' has the wrong shape");
    std::copy(t.values.data().begin(), t.values.data().end(), s.begin());
  });
  if (idx != wf.tensors.size())
    throw std::runtime_error(path + ": tensor count does not match the architecture");
  return lm;
}

// ---- classifier head ----

inline void save_classifier(const std::string& path, const ClassifierHead& head,
                            const Vocabulary& vocab) {
  WeightFile wf;
  wf.vocab = vocab.tokens();
  wf.meta = {{"embed_dim", static_cast<std::int64_t>(head.w1.rows())},
             {"hidden", static_cast<std::int64_t>(head.w1.cols())}};
  Matrix b1(1, head.b1.size()), b2(1, head.b2.size());
  for (std::size_t i = 0; i < head.b1.size(); ++i) b1(0, i) = head.b1[i];
  for (std::size_t i = 0; i < head.b2.size(); ++i) b2(0, i) = head.b2[i];
  wf.tensors = {{"w1", head.w1}, {"b1", b1}, {"w2", head.w2}, {"b2", b2}};
  write_weight_file(path, wf);
}

inline ClassifierHead load_classifier(const std::string& path, const Vocabulary& expect_vocab) {
  WeightFile wf = read_weight_file(path);
  if (wf.vocab != expect_vocab.tokens())
    throw std::runtime_error(path + ": classifier vocab does not match the decoder's");
  ClassifierHead head;
  head.w1 = wf.tensor("w1");
  head.w2 = wf.tensor("w2");
  const Matrix& b1 = wf.tensor("b1");
  const Matrix& b2 = wf.tensor("b2");
  require(b1.rows() == 1 && b2.rows() == 1, "classifier bias tensors must be rows");
  require(head.w2.cols() == 2 && b2.cols() == 2, "classifier output must be 2-way");
  require(head.w1.cols() == head.w2.rows() && b1.cols() == head.w1.cols(),
          "classifier hidden sizes disagree");
  head.b1.assign(b1.row(0).begin(), b1.row(0).end());
  head.b2.assign(b2.row(0).begin(), b2.row(0).end());
  return head;
}

// ---- corpus files: one whitespace-tokenized sequence per line ----

inline void write_corpus(const std::string& path, const std::vector<TokenSeq>& corpus,
                         const Vocabulary& vocab, const std::vector<int>* labels = nullptr) {
  if (labels) require(labels->size() == corpus.size(), "corpus/label count mismatch");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (labels) out << (*labels)[i] << '\t';
    for (std::size_t j = 0; j < corpus[i].size(); ++j) {
      if (j) out << ' ';
      out << vocab.token(corpus[i][j]);
    }
    out << '\n';
  }
}

inline std::vector<TokenSeq> read_corpus(const std::string& path, const Vocabulary& vocab,
                                         std::vector<int>* labels = nullptr) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  std::vector<TokenSeq> corpus;
  if (labels) labels->clear();
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    if (labels) {
      int lab;
      if (!(ls >> lab)) throw std::runtime_error(path + ": bad label column");
      labels->push_back(lab);
    }
    TokenSeq seq;
    std::string tok;
    while (ls >> tok) seq.push_back(vocab.id(tok));
    if (seq.empty()) throw std::runtime_error(path + ": empty sequence line");
    corpus.push_back(std::move(seq));
  }
  return corpus;
}

}  // namespace dab
