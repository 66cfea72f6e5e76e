#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "hypo/error.hpp"
#include "hypo/lm.hpp"
#include "hypo/synth.hpp"

using namespace hypo;

namespace {

LMConfig tiny(int vocab = 12) {
  LMConfig c;
  c.vocab_size = vocab;
  c.embed_dim = 6;
  c.hidden = 8;
  c.layers = 2;
  return c;
}

void make_uniform(LanguageModel& lm) {
  lm.store().at("lm.out.W").value.matrix().setZero();
  lm.store().at("lm.out.b").value.matrix().setZero();
}

std::vector<TokenSeq> random_seqs(Rng& rng, int vocab, std::size_t count, std::size_t max_len) {
  std::vector<TokenSeq> out(count);
  for (auto& s : out) {
    s.resize(1 + rng.uniform_int(max_len));
    for (auto& t : s) t = static_cast<TokenId>(kNumSpecials + rng.uniform_int(static_cast<std::size_t>(vocab - kNumSpecials)));
  }
  return out;
}

// Teacher-forced score through the single-step API.
double stepwise_score(const LanguageModel& lm, const TokenSeq& seq) {
  LMState st = lm.initial_state(1);
  TokenId prev = kBos;
  double s = 0.0;
  for (std::size_t t = 0; t <= seq.size(); ++t) {
    const Matrix lp = lm.step(std::span(&prev, 1), st);
    const TokenId next = t < seq.size() ? seq[t] : kEos;
    s += lp(0, next);
    prev = next;
  }
  return s;
}

}  // namespace

TEST_CASE("config validation") {
  LMConfig c = tiny();
  CHECK_NOTHROW(c.validate());
  c.layers = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(LMConfig{}.layers == 2);
  const LMConfig back = nlohmann::json(tiny()).get<LMConfig>();
  CHECK(back.hidden == 8);
}

TEST_CASE("uniform logits") {
  LanguageModel lm = LanguageModel::create(tiny(), 1);
  make_uniform(lm);
  const double V = 12.0;
  CHECK(lm.score(TokenSeq{5}) == doctest::Approx(2.0 * std::log(1.0 / V)).epsilon(1e-12));
  Rng rng(2);
  const auto corpus = random_seqs(rng, 12, 30, 6);
  CHECK(std::abs(perplexity(lm, corpus) - V) < 1e-6);
}

TEST_CASE("scores are negative and decrease with extension") {
  const LanguageModel lm = LanguageModel::create(tiny(), 3);
  Rng rng(4);
  for (auto seq : random_seqs(rng, 12, 20, 5)) {
    const double s = lm.score(seq);
    CHECK(s < 0.0);
    seq.push_back(7);
    CHECK(lm.score(seq) < s);
  }
  CHECK(lm.score(TokenSeq{}) < 0.0);
  CHECK_THROWS_AS(lm.score(TokenSeq{12}), DecodeError);
  CHECK_THROWS_AS(lm.score(TokenSeq{-1}), DecodeError);
}

TEST_CASE("length-2 sequences of a vocab-5 model carry all the mass") {
  const LanguageModel lm = LanguageModel::create(tiny(5), 5);
  LMState st0 = lm.initial_state(1);
  const TokenId bos = kBos;
  const Matrix first = lm.step(std::span(&bos, 1), st0);
  double total = 0.0;
  for (TokenId a = 0; a < 5; ++a) {
    LMState st = st0;
    const Matrix second = lm.step(std::span(&a, 1), st);
    double row = 0.0;
    for (TokenId b = 0; b < 5; ++b) {
      row += std::exp(second(0, b));
      total += std::exp(first(0, a) + second(0, b));
    }
    CHECK(std::abs(row - 1.0) < 1e-12);
  }
  CHECK(std::abs(total - 1.0) < 1e-6);
}

TEST_CASE("batched scoring equals the step loop") {
  const LanguageModel lm = LanguageModel::create(tiny(), 6);
  Rng rng(7);
  const auto seqs = random_seqs(rng, 12, 90, 9);
  const auto batch = lm.score_batch(seqs);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    CHECK(std::abs(batch[i] - stepwise_score(lm, seqs[i])) < 1e-9);
    CHECK(std::abs(batch[i] - lm.score(seqs[i])) < 1e-9);
  }
}

TEST_CASE("perplexity matches a direct recomputation") {
  const LanguageModel lm = LanguageModel::create(tiny(), 8);
  Rng rng(9);
  const auto corpus = random_seqs(rng, 12, 100, 7);
  double logp = 0.0, n = 0.0;
  for (const auto& s : corpus) {
    logp += stepwise_score(lm, s);
    n += static_cast<double>(s.size() + 1);
  }
  CHECK(perplexity(lm, corpus) == doctest::Approx(std::exp(-logp / n)).epsilon(1e-10));
  const std::vector<TokenSeq> one = {corpus[0]};
  CHECK(perplexity(lm, one) ==
        doctest::Approx(std::exp(-lm.score(corpus[0]) / static_cast<double>(corpus[0].size() + 1))).epsilon(1e-12));
  CHECK_THROWS_AS(perplexity(lm, std::vector<TokenSeq>{}), DatasetError);
}

TEST_CASE("loss gradient") {
  LanguageModel lm = LanguageModel::create(tiny(), 10);
  Rng rng(11);
  const auto seqs = random_seqs(rng, 12, 3, 4);
  auto closure = [&](Tape& t, ParameterStore& s) { return lm.batch_loss(t, s, seqs, 0.0, nullptr); };
  CHECK(grad_check(closure, lm.store(), 1e-3, nullptr, Stencil::kCentral4) < 1e-4);
}

TEST_CASE("checkpoint round trip") {
  const LanguageModel lm = LanguageModel::create(tiny(), 12);
  const auto path = (std::filesystem::temp_directory_path() / "hypo_test_lm.ckpt").string();
  lm.save(path);
  const LanguageModel back = LanguageModel::load(path);
  CHECK(bitwise_equal(lm.store(), back.store()));
  CHECK(back.config().hidden == 8);
  std::filesystem::remove(path);
}

TEST_CASE("repeated-token corpus approaches perplexity one") {
  LMConfig c = tiny(8);
  c.hidden = 16;
  LanguageModel lm = LanguageModel::create(c, 13);
  const std::vector<TokenSeq> train(64, TokenSeq(5, 6));
  const std::vector<TokenSeq> dev(8, TokenSeq(5, 6));
  TrainConfig tc;
  tc.warmup_steps = 20;
  tc.constant_steps = 400;
  tc.peak_lr = 1e-2;
  tc.batch_size = 16;
  tc.max_steps = 400;
  tc.dropout_rate = 0.0;
  tc.l2_weight = 0.0;
  tc.patience = 1000;
  const LMTrainLog log = train_lm(lm, train, dev, tc);
  CHECK(log.best_dev_perplexity <= 1.05);
  CHECK(perplexity(lm, dev) == doctest::Approx(log.best_dev_perplexity).epsilon(1e-12));
}

TEST_CASE("perplexity falls over the first epochs on the synthetic corpus") {
  SynthConfig sc;
  sc.lines = 2200;
  const auto lines = synthetic_corpus(sc);
  const std::vector<std::string> text(lines.begin(), lines.begin() + 2000);
  const Vocabulary vocab = train_bpe(text, 128);
  std::vector<TokenSeq> train, dev;
  for (std::size_t i = 0; i < lines.size(); ++i) (i < 2000 ? train : dev).push_back(encode(vocab, lines[i]));
  LMConfig c;
  c.vocab_size = static_cast<int>(vocab.size());
  c.hidden = 32;
  c.embed_dim = 16;
  LanguageModel lm = LanguageModel::create(c, 0);
  TrainConfig tc;
  tc.seed = 0;
  tc.max_epochs = 3;
  tc.warmup_steps = 20;
  tc.patience = 3;
  const LMTrainLog log = train_lm(lm, train, dev, tc);
  REQUIRE(log.dev_perplexity.size() == 3);
  CHECK(log.dev_perplexity[0] < log.initial_dev_perplexity);
  CHECK(log.dev_perplexity[1] < log.dev_perplexity[0]);
  CHECK(log.dev_perplexity[2] < log.dev_perplexity[1]);
  CHECK(log.best_dev_perplexity <= log.initial_dev_perplexity);
  CHECK(perplexity(lm, dev) == doctest::Approx(log.best_dev_perplexity).epsilon(1e-12));
}
