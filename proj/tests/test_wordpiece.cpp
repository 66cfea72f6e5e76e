#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "hypo/error.hpp"
#include "hypo/rng.hpp"
#include "hypo/wordpiece.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace hypo;
using fixtures::random_corpus;

namespace {

void check_against_oracle(const std::vector<std::string>& corpus, std::size_t target) {
  const Vocabulary v = train_bpe(corpus, target);
  const auto expected = oracle::greedy_bpe(corpus, target);
  REQUIRE(v.merges().size() == expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) {
    CHECK(v.merges()[i].left == expected[i].left);
    CHECK(v.merges()[i].right == expected[i].right);
    CHECK(v.merges()[i].result == expected[i].result);
  }
}

}  // namespace

TEST_CASE("zero merge budget keeps only specials and the base alphabet") {
  const std::vector<std::string> corpus = {"ab ab"};
  const Vocabulary v = train_bpe(corpus, kNumSpecials + 3);
  CHECK(v.merges().empty());
  REQUIRE(v.size() == 7);
  CHECK(v.token(4) == std::string(kWordBoundary));
  CHECK(v.token(5) == "a");
  CHECK(v.token(6) == "b");
}

TEST_CASE("first merge takes the most frequent pair and later merges follow a recount") {
  const std::vector<std::string> corpus = {"aaab aaab"};
  const std::size_t base = kNumSpecials + 3;
  const Vocabulary v = train_bpe(corpus, base + 2);
  REQUIRE(v.merges().size() == 2);
  CHECK(v.token(v.merges()[0].result) == "aa");
  check_against_oracle(corpus, base + 2);
}

TEST_CASE("merges match the greedy recount oracle on random corpora") {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    auto corpus = random_corpus(rng, 200, "abcdeé");
    check_against_oracle(corpus, 120);
  }
}

TEST_CASE("training is deterministic byte for byte") {
  Rng a(5), b(5);
  const auto ca = random_corpus(a, 300, "abcdefgh");
  const auto cb = random_corpus(b, 300, "abcdefgh");
  CHECK(train_bpe(ca, 150).serialize() == train_bpe(cb, 150).serialize());
}

TEST_CASE("train_bpe configuration errors") {
  const std::vector<std::string> empty;
  CHECK_THROWS_AS(train_bpe(empty, 100), ConfigError);
  const std::vector<std::string> blank = {"   ", ""};
  CHECK_THROWS_AS(train_bpe(blank, 100), ConfigError);
  const std::vector<std::string> corpus = {"abc"};
  try {
    train_bpe(corpus, 5);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("minimum of 8") != std::string::npos);
  }
}

TEST_CASE("vocabulary invariants") {
  Rng rng(3);
  const auto corpus = random_corpus(rng, 300, "abcdef");
  const Vocabulary v = train_bpe(corpus, 100);
  CHECK(v.size() == 100);
  for (const auto& m : v.merges()) {
    CHECK(v.token(m.result) == v.token(m.left) + v.token(m.right));
    CHECK(m.result >= kNumSpecials);
  }
}

TEST_CASE("vocabulary stops at the attainable size") {
  const std::vector<std::string> corpus = {"abc abc"};
  const Vocabulary v = train_bpe(corpus, 1000);
  CHECK(v.size() == kNumSpecials + 4 + 3);  // ▁a, ▁ab, ▁abc
  CHECK(encode(v, "abc").size() == 1);
}

TEST_CASE("encode and decode") {
  Rng rng(9);
  const auto corpus = random_corpus(rng, 400, "abcdefg");
  const Vocabulary v = train_bpe(corpus, 80);

  CHECK(encode(v, "").empty());
  CHECK(decode(v, TokenSeq{}).empty());
  CHECK(decode(v, TokenSeq{kPad, kBos, kEos, kPad}).empty());

  for (const auto& line : random_corpus(rng, 200, "abcdefg")) CHECK(decode(v, encode(v, line)) == line);

  const TokenSeq with_unknown = encode(v, "ab zq");
  CHECK(std::find(with_unknown.begin(), with_unknown.end(), kUnk) != with_unknown.end());

  try {
    decode(v, TokenSeq{5, 6, static_cast<TokenId>(v.size())});
    FAIL("expected DecodeError");
  } catch (const DecodeError& e) {
    CHECK(std::string(e.what()).find("index 2") != std::string::npos);
  }
}

TEST_CASE("encode reproduces the training segmentation") {
  const std::vector<std::string> corpus = {"banana bandana", "ban an ana"};
  const Vocabulary v = train_bpe(corpus, 20);
  for (const auto& line : corpus) CHECK(decode(v, encode(v, line)) == line);
  // Every word of the training corpus is covered by its merges.
  const TokenSeq ids = encode(v, "banana");
  for (TokenId id : ids) CHECK(id != kUnk);
}

TEST_CASE("serialization round trip is exact") {
  Rng rng(21);
  const auto corpus = random_corpus(rng, 300, "abcdé");
  const Vocabulary v = train_bpe(corpus, 90);
  const std::string text = v.serialize();
  const Vocabulary back = Vocabulary::deserialize(text);
  CHECK(back.serialize() == text);
  CHECK(back.tokens() == v.tokens());
  CHECK(back.fingerprint() == v.fingerprint());

  const auto path = (std::filesystem::temp_directory_path() / "hypo_vocab_test.jsonl").string();
  v.save(path);
  CHECK(Vocabulary::load(path).serialize() == text);
  std::filesystem::remove(path);

  CHECK_THROWS_AS(Vocabulary::deserialize("{\"type\":\"merge\"}\n"), ConfigError);
}

TEST_CASE("full-scale default inventory size") { CHECK(kFullScaleVocabSize == 16000); }
