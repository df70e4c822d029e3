#include "dab/io.hpp"
#include "dab/synthetic.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace dab;

namespace {

std::string work_path(const std::string& leaf) {
  const char* base = std::getenv("DAB_TEST_WORK");
  std::filesystem::path dir = base ? base : std::filesystem::temp_directory_path() / "dab_io";
  std::filesystem::create_directories(dir);
  return (dir / leaf).string();
}

LMBundle small_random_lm(std::uint64_t seed) {
  LMConfig cfg;
  cfg.embed_dim = 8;
  cfg.heads = 2;
  cfg.mlp_hidden = 12;
  cfg.blocks = 2;
  cfg.context = 10;
  Vocabulary v({"<s>", "a", "b", "c", "d"});
  Rng rng(seed);
  return LMBundle::initialized(v, cfg, rng);
}

std::vector<unsigned char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in),
                                    std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("weight file round-trips tensors, vocab and meta exactly") {
  WeightFile wf;
  wf.vocab = {"<s>", "x", "y"};
  wf.meta = {{"alpha", 7}, {"beta", -3}};
  Matrix a(2, 3), b(1, 4);
  double vals[] = {0.0, -1.5, 3.25, 1e-300, -1e300, 0.1};
  for (std::size_t i = 0; i < 6; ++i) a.data()[i] = vals[i];
  for (std::size_t i = 0; i < 4; ++i) b.data()[i] = std::ldexp(1.0, -int(i * 13));
  wf.tensors = {{"first", a}, {"second", b}};

  const std::string path = work_path("roundtrip.dabw");
  write_weight_file(path, wf);
  WeightFile back = read_weight_file(path);

  REQUIRE(back.vocab == wf.vocab);
  REQUIRE(back.meta == wf.meta);
  REQUIRE(back.tensors.size() == 2);
  REQUIRE(back.tensors[0].name == "first");
  REQUIRE(back.tensors[1].name == "second");
  // bit-exact, not approximately equal
  REQUIRE(back.tensor("first") == a);
  REQUIRE(back.tensor("second") == b);
  REQUIRE(back.meta_value("alpha") == 7);
  REQUIRE_THROWS_AS(back.meta_value("gamma"), std::invalid_argument);
  REQUIRE_THROWS_AS(back.tensor("third"), std::invalid_argument);
}

TEST_CASE("weight file rejects a corrupted payload byte") {
  WeightFile wf;
  wf.vocab = {"<s>", "t"};
  Matrix m(2, 2);
  m(0, 0) = 1.0;
  m(0, 1) = 2.0;
  m(1, 0) = 3.0;
  m(1, 1) = 4.0;
  wf.tensors = {{"m", m}};
  const std::string path = work_path("corrupt.dabw");
  write_weight_file(path, wf);

  auto bytes = slurp(path);
  // flip one bit near the end (inside the payload)
  bytes[bytes.size() - 5] ^= 0x01;
  spit(path, bytes);
  REQUIRE_THROWS_WITH(read_weight_file(path), Catch::Matchers::ContainsSubstring("checksum"));
}

TEST_CASE("weight file rejects truncation and header tampering") {
  WeightFile wf;
  wf.vocab = {"<s>", "t"};
  Matrix m(3, 3);
  for (std::size_t i = 0; i < 9; ++i) m.data()[i] = double(i);
  wf.tensors = {{"m", m}};
  const std::string path = work_path("trunc.dabw");
  write_weight_file(path, wf);
  auto bytes = slurp(path);

  SECTION("payload cut short") {
    bytes.resize(bytes.size() - 9);
    spit(path, bytes);
    REQUIRE_THROWS_WITH(read_weight_file(path), Catch::Matchers::ContainsSubstring("truncated"));
  }
  SECTION("magic line replaced") {
    bytes[0] = 'x';
    spit(path, bytes);
    REQUIRE_THROWS(read_weight_file(path));
  }
  SECTION("declared shape disagrees with payload size") {
    std::string text(bytes.begin(), bytes.end());
    auto at = text.find("tensor m 3 3");
    REQUIRE(at != std::string::npos);
    text.replace(at, 12, "tensor m 3 4");
    spit(path, std::vector<unsigned char>(text.begin(), text.end()));
    REQUIRE_THROWS(read_weight_file(path));
  }
}

TEST_CASE("decoder weights survive a save/load round trip bit-exactly") {
  LMBundle lm = small_random_lm(99);
  const std::string path = work_path("lm.dabw");
  save_lm(path, lm);
  LMBundle back = load_lm(path);

  REQUIRE(back.vocab == lm.vocab);
  REQUIRE(back.config.embed_dim == lm.config.embed_dim);
  REQUIRE(back.config.heads == lm.config.heads);
  REQUIRE(back.config.mlp_hidden == lm.config.mlp_hidden);
  REQUIRE(back.config.blocks == lm.config.blocks);
  REQUIRE(back.config.context == lm.config.context);

  auto va = param_views(lm);
  auto vb = param_views(back);
  REQUIRE(va.size() == vb.size());
  for (std::size_t i = 0; i < va.size(); ++i) {
    REQUIRE(va[i].first == vb[i].first);
    REQUIRE(va[i].second.size() == vb[i].second.size());
    for (std::size_t j = 0; j < va[i].second.size(); ++j)
      REQUIRE(va[i].second[j] == vb[i].second[j]);
  }

  // loaded model produces identical logits
  TokenSeq prefix = {0, 1, 2, 3};
  PrefixState sa(lm), sb(back);
  sa.append(prefix);
  sb.append(prefix);
  RealVec la = next_logits(lm, sa), lb = next_logits(back, sb);
  for (std::size_t j = 0; j < la.size(); ++j) REQUIRE(la[j] == lb[j]);
}

TEST_CASE("decoder load rejects a renamed tensor") {
  LMBundle lm = small_random_lm(7);
  const std::string path = work_path("lm_rename.dabw");
  save_lm(path, lm);
  auto bytes = slurp(path);
  std::string text(bytes.begin(), bytes.end());
  auto at = text.find("tensor blk0.wq");
  REQUIRE(at != std::string::npos);
  text.replace(at, 14, "tensor blk0.wx");
  spit(path, std::vector<unsigned char>(text.begin(), text.end()));
  REQUIRE_THROWS_WITH(load_lm(path), Catch::Matchers::ContainsSubstring("blk0.wx"));
}

TEST_CASE("classifier head round-trips and validates the vocabulary") {
  Vocabulary v({"<s>", "p", "q", "r"});
  Rng rng(21);
  ClassifierHead head;
  head.w1 = Matrix(6, 5);
  head.w2 = Matrix(5, 2);
  head.b1.assign(5, 0.0);
  head.b2.assign(2, 0.0);
  for (double& x : head.w1.data()) x = rng.next_gaussian();
  for (double& x : head.w2.data()) x = rng.next_gaussian();
  for (double& x : head.b1) x = rng.next_gaussian();
  for (double& x : head.b2) x = rng.next_gaussian();

  const std::string path = work_path("head.dabw");
  save_classifier(path, head, v);
  ClassifierHead back = load_classifier(path, v);
  REQUIRE(back.w1 == head.w1);
  REQUIRE(back.w2 == head.w2);
  REQUIRE(back.b1 == head.b1);
  REQUIRE(back.b2 == head.b2);

  Vocabulary other({"<s>", "p", "q", "z"});
  REQUIRE_THROWS_WITH(load_classifier(path, other),
                      Catch::Matchers::ContainsSubstring("vocab"));
}

TEST_CASE("corpus files round-trip sequences and labels") {
  SyntheticSpec spec;
  Rng rng(4242);
  std::vector<int> labels;
  auto corpus = synthetic_corpus(spec, 50, rng, &labels);
  Vocabulary v = synthetic_vocabulary(spec);

  const std::string with_labels = work_path("corpus_labeled.txt");
  write_corpus(with_labels, corpus, v, &labels);
  std::vector<int> labels_back;
  auto corpus_back = read_corpus(with_labels, v, &labels_back);
  REQUIRE(corpus_back == corpus);
  REQUIRE(labels_back == labels);

  const std::string plain = work_path("corpus_plain.txt");
  write_corpus(plain, corpus, v);
  auto plain_back = read_corpus(plain, v);
  REQUIRE(plain_back == corpus);

  // unknown token should be rejected by the vocabulary lookup
  {
    std::ofstream out(work_path("corpus_bad.txt"));
    out << "w0 nosuchtoken w1\n";
  }
  REQUIRE_THROWS(read_corpus(work_path("corpus_bad.txt"), v));
}

TEST_CASE("two saves of the same model are byte-identical") {
  LMBundle lm = small_random_lm(3);
  const std::string p1 = work_path("same1.dabw");
  const std::string p2 = work_path("same2.dabw");
  save_lm(p1, lm);
  save_lm(p2, lm);
  REQUIRE(slurp(p1) == slurp(p2));
}
