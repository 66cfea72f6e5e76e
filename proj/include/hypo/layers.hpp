#pragma once

#include <string>
#include <vector>

#include "hypo/autodiff.hpp"

namespace hypo {

// LSTM cell whose four gate pre-activations are each layer-normalized.
// Weight layout: [input; hidden] × [i | f | g | o] gates of width `hidden`.
struct LstmCell {
  std::string prefix;
  int input = 0;
  int hidden = 0;

  // Adds "<prefix>.W", "<prefix>.ln_gain" and "<prefix>.ln_bias"; the forget
  // gate's normalization bias starts at 1.
  void create(ParameterStore& store, Rng& rng, double init_scale) const;
};

struct LstmState {
  Var h;
  Var c;
};

LstmState zero_state(Tape& tape, int batch, int hidden);

// One step over a batch: x is B×input, state B×hidden each.
template <class Store>
LstmState lstm_step(Tape& tape, Store& store, const LstmCell& cell, Var x, const LstmState& state);

// Additive attention block: projections "<prefix>.Wq" (query_dim × H·A),
// "<prefix>.Wk" (key_dim × H·A) and score vector "<prefix>.v" (1 × H·A).
struct AttentionBlock {
  std::string prefix;
  int query_dim = 0;
  int key_dim = 0;
  int heads = 1;
  int head_dim = 1;

  void create(ParameterStore& store, Rng& rng, double init_scale) const;
  int width() const { return heads * head_dim; }
};

template <class Store>
Var project_keys(Tape& tape, Store& store, const AttentionBlock& block, Var keys);

template <class Store>
Var attend(Tape& tape, Store& store, const AttentionBlock& block, Var query, Var key_proj, Var values,
           const AttentionLayout& layout, double dropout, Rng* rng, Matrix* weights_out);

// Plain-value conveniences over a non-recording tape.
Matrix layer_norm(const Matrix& v, const Matrix& gain, const Matrix& bias, double eps = 1e-5);
double label_smoothed_ce(const Matrix& logits_row, std::int32_t target, double uncertainty);

}  // namespace hypo
