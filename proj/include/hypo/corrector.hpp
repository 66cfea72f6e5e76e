#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hypo/autodiff.hpp"
#include "hypo/channel.hpp"
#include "hypo/layers.hpp"
#include "hypo/optim.hpp"
#include "hypo/wordpiece.hpp"

namespace hypo {

struct CorrectorConfig {
  int vocab_size = static_cast<int>(kDeskVocabSize);
  int embed_dim = 32;
  int hidden = 64;
  int enc_layers = 2;
  int dec_layers = 2;
  int heads = 4;
  int attention_dim = 16;  // per head
  // 1-based index of the first layer with a residual connection; layer 1
  // never has one because its input width differs.
  int residual_from_layer = 2;
  double init_scale = 0.1;

  void validate() const;
  // Full-scale shape: 3+3 layers, residual from layer 3, 16K wordpieces.
  static CorrectorConfig full_scale();
};

void to_json(nlohmann::json& j, const CorrectorConfig& c);
void from_json(const nlohmann::json& j, CorrectorConfig& c);

// Framed pair: source ends with EOS; target_in starts with BOS;
// labels are the target followed by EOS.
struct TrainingPair {
  TokenSeq source;
  TokenSeq target;
};

TokenSeq frame_source(std::span<const TokenId> raw);

// Uniform choice among the record's hypotheses, paired with its truth.
TrainingPair sample_training_pair(const NBestList& record, Rng& rng);

struct EncodedSource {
  Matrix values;     // T × 2H top encoder outputs
  Matrix keys_proj;  // T × (heads · attention_dim)
  int length = 0;
};

// Decoder state for a set of rows (beam hypotheses or batch entries).
struct DecoderState {
  std::vector<Matrix> h;
  std::vector<Matrix> c;
  Matrix context;  // previous step's attention context, rows × 2H
  int rows() const { return static_cast<int>(context.rows()); }
  // Gathers rows (used to reorder beams).
  DecoderState select(std::span<const int> rows) const;
};

struct StepOutput {
  Matrix log_probs;  // rows × V
  DecoderState state;
  Matrix attention;  // rows × (heads · T), per-head weights
};

class Corrector {
 public:
  Corrector() = default;
  Corrector(CorrectorConfig cfg, ParameterStore store);
  static Corrector create(const CorrectorConfig& cfg, std::uint64_t seed);

  const CorrectorConfig& config() const { return cfg_; }
  ParameterStore& store() { return store_; }
  const ParameterStore& store() const { return store_; }

  // Teacher-forced label-smoothed loss averaged over target tokens.
  // `store` is the store the graph reads (typically this->store()).
  Var batch_loss(Tape& tape, ParameterStore& store, std::span<const TrainingPair> batch, double uncertainty,
                 double dropout, Rng* rng) const;
  // Same graph over a read-only store; returns loss and token count.
  double evaluate_loss(std::span<const TrainingPair> batch, double uncertainty, std::size_t* tokens = nullptr) const;

  // Encoder over an already framed source.
  EncodedSource encode_sequence(std::span<const TokenId> framed_source) const;
  DecoderState initial_state(int rows) const;
  StepOutput decode_step(std::span<const TokenId> prev, const DecoderState& state, const EncodedSource& enc) const;

  // Checkpoint with config embedded.
  void save(const std::string& path) const;
  static Corrector load(const std::string& path);

 private:
  CorrectorConfig cfg_;
  ParameterStore store_;
};

struct TrainLog {
  std::vector<double> train_loss;  // per update
  std::vector<std::pair<std::int64_t, double>> dev_loss;  // (step, loss)
  std::int64_t best_step = 0;
  double best_dev_loss = 0.0;
  bool early_stopped = false;
};

using TrainCallback = std::function<void(const nlohmann::json&)>;

// Minibatch training on pairs drawn via sample_training_pair, with held-out
// loss every eval_interval updates; keeps the best held-out parameters.
TrainLog train_corrector(Corrector& model, std::span<const NBestList> train, std::span<const NBestList> dev,
                         const TrainConfig& cfg, const TrainCallback& on_event = {});

// Entropy of the smoothed target distribution: the per-token loss floor.
double smoothing_floor(double uncertainty, std::size_t vocab_size);

}  // namespace hypo
