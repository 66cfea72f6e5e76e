#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hypo/autodiff.hpp"
#include "hypo/corrector.hpp"
#include "hypo/optim.hpp"
#include "hypo/wordpiece.hpp"

namespace hypo {

struct LMConfig {
  int vocab_size = static_cast<int>(kDeskVocabSize);
  int embed_dim = 32;
  int hidden = 64;
  int layers = 2;
  double init_scale = 0.1;

  void validate() const;
};

void to_json(nlohmann::json& j, const LMConfig& c);
void from_json(const nlohmann::json& j, LMConfig& c);

struct LMState {
  std::vector<Matrix> h;
  std::vector<Matrix> c;
  int rows() const { return h.empty() ? 0 : static_cast<int>(h[0].rows()); }
};

// Stacked LSTM language model over wordpieces. Sequences are scored with a
// BOS start and an EOS end; scores are natural-log probabilities.
class LanguageModel {
 public:
  LanguageModel() = default;
  LanguageModel(LMConfig cfg, ParameterStore store);
  static LanguageModel create(const LMConfig& cfg, std::uint64_t seed);

  const LMConfig& config() const { return cfg_; }
  ParameterStore& store() { return store_; }
  const ParameterStore& store() const { return store_; }

  // Mean next-token cross-entropy over all predicted tokens (EOS included).
  Var batch_loss(Tape& tape, ParameterStore& store, std::span<const TokenSeq> seqs, double dropout, Rng* rng) const;

  // log P(ids, EOS). An empty sequence scores log P(EOS | BOS).
  double score(std::span<const TokenId> ids) const;
  std::vector<double> score_batch(std::span<const TokenSeq> seqs) const;

  LMState initial_state(int rows) const;
  // Log-probabilities of the next token for each row after consuming `prev`.
  Matrix step(std::span<const TokenId> prev, LMState& state) const;

  void save(const std::string& path) const;
  static LanguageModel load(const std::string& path);

 private:
  void check_ids(std::span<const TokenId> ids) const;

  LMConfig cfg_;
  ParameterStore store_;
};

// exp(-sum log p / number of predicted tokens), EOS included.
double perplexity(const LanguageModel& lm, std::span<const TokenSeq> corpus);

struct LMTrainLog {
  double initial_dev_perplexity = 0.0;
  std::vector<double> dev_perplexity;  // after each epoch
  std::vector<double> train_loss;
  int best_epoch = -1;  // -1: initialization was best
  double best_dev_perplexity = 0.0;
  bool early_stopped = false;
};

// Epoch loop with dev perplexity after every epoch; stops after `patience`
// epochs without improvement and restores the best parameters. Label
// smoothing is not used.
LMTrainLog train_lm(LanguageModel& lm, std::span<const TokenSeq> train, std::span<const TokenSeq> dev,
                    const TrainConfig& cfg, const TrainCallback& on_event = {});

}  // namespace hypo
