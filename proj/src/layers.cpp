#include "hypo/layers.hpp"

#include "hypo/error.hpp"

namespace hypo {

void LstmCell::create(ParameterStore& store, Rng& rng, double init_scale) const {
  store.add_uniform(prefix + ".W", {input + hidden, 4 * hidden}, init_scale, rng);
  auto& gain = store.add(prefix + ".ln_gain", {4 * hidden});
  gain.value.matrix().setOnes();
  auto& bias = store.add(prefix + ".ln_bias", {4 * hidden});
  bias.value.matrix().middleCols(hidden, hidden).setOnes();
}

LstmState zero_state(Tape& tape, int batch, int hidden) {
  return {tape.constant(Matrix::Zero(batch, hidden)), tape.constant(Matrix::Zero(batch, hidden))};
}

template <class Store>
LstmState lstm_step(Tape& tape, Store& store, const LstmCell& cell, Var x, const LstmState& state) {
  const Matrix& xv = tape.value(x);
  const Matrix& hv = tape.value(state.h);
  if (xv.cols() != cell.input || hv.cols() != cell.hidden || tape.value(state.c).cols() != cell.hidden ||
      xv.rows() != hv.rows()) {
    throw ShapeError(cell.prefix + ": lstm_step dimension mismatch (input " + std::to_string(xv.cols()) + ", expected " +
                     std::to_string(cell.input) + ")");
  }
  const int H = cell.hidden;
  Var W = tape.parameter(store, cell.prefix + ".W");
  Var gain = tape.parameter(store, cell.prefix + ".ln_gain");
  Var bias = tape.parameter(store, cell.prefix + ".ln_bias");
  Var pre = tape.matmul(tape.concat_cols({x, state.h}), W);
  Var gates = tape.layer_norm(pre, gain, bias, 4);
  Var i = tape.sigmoid(tape.slice_cols(gates, 0, H));
  Var f = tape.sigmoid(tape.slice_cols(gates, H, H));
  Var g = tape.tanh(tape.slice_cols(gates, 2 * H, H));
  Var o = tape.sigmoid(tape.slice_cols(gates, 3 * H, H));
  Var c = tape.add(tape.mul(f, state.c), tape.mul(i, g));
  Var h = tape.mul(o, tape.tanh(c));
  if (!all_finite(tape.value(h))) throw NumericError(cell.prefix + ": non-finite LSTM output");
  return {h, c};
}

template LstmState lstm_step<ParameterStore>(Tape&, ParameterStore&, const LstmCell&, Var, const LstmState&);
template LstmState lstm_step<const ParameterStore>(Tape&, const ParameterStore&, const LstmCell&, Var,
                                                   const LstmState&);

void AttentionBlock::create(ParameterStore& store, Rng& rng, double init_scale) const {
  store.add_uniform(prefix + ".Wq", {query_dim, width()}, init_scale, rng);
  store.add_uniform(prefix + ".Wk", {key_dim, width()}, init_scale, rng);
  store.add_uniform(prefix + ".v", {width()}, init_scale, rng);
}

template <class Store>
Var project_keys(Tape& tape, Store& store, const AttentionBlock& block, Var keys) {
  return tape.matmul(keys, tape.parameter(store, block.prefix + ".Wk"));
}

template <class Store>
Var attend(Tape& tape, Store& store, const AttentionBlock& block, Var query, Var key_proj, Var values,
           const AttentionLayout& layout, double dropout, Rng* rng, Matrix* weights_out) {
  Var qp = tape.matmul(query, tape.parameter(store, block.prefix + ".Wq"));
  Var v = tape.parameter(store, block.prefix + ".v");
  AttentionLayout l = layout;
  l.heads = block.heads;
  return tape.additive_attention(qp, key_proj, values, v, l, dropout, rng, weights_out);
}

template Var project_keys<ParameterStore>(Tape&, ParameterStore&, const AttentionBlock&, Var);
template Var project_keys<const ParameterStore>(Tape&, const ParameterStore&, const AttentionBlock&, Var);
template Var attend<ParameterStore>(Tape&, ParameterStore&, const AttentionBlock&, Var, Var, Var,
                                    const AttentionLayout&, double, Rng*, Matrix*);
template Var attend<const ParameterStore>(Tape&, const ParameterStore&, const AttentionBlock&, Var, Var, Var,
                                          const AttentionLayout&, double, Rng*, Matrix*);

Matrix layer_norm(const Matrix& v, const Matrix& gain, const Matrix& bias, double eps) {
  Tape tape(false);
  return tape.value(tape.layer_norm(tape.constant(v), tape.constant(gain), tape.constant(bias), 1, eps));
}

double label_smoothed_ce(const Matrix& logits_row, std::int32_t target, double uncertainty) {
  Tape tape(false);
  const std::int32_t t[1] = {target};
  const double w[1] = {1.0};
  return tape.value(tape.cross_entropy(tape.constant(logits_row), t, w, uncertainty))(0, 0);
}

}  // namespace hypo
