#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "hypo/params.hpp"
#include "hypo/rng.hpp"
#include "hypo/tensor.hpp"

namespace hypo {

// Handle to a node on a Tape.
struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

// Row layout of attention keys/values: `lengths.size()` sequences of
// `max_len` rows each, sequence k occupying rows [k*max_len, (k+1)*max_len).
// One key sequence may be shared by every query row.
struct AttentionLayout {
  int heads = 1;
  int max_len = 0;
  std::vector<int> lengths;
};

// Reverse-mode tape over matrix-valued nodes. Nodes are appended in
// evaluation order; backward() walks them in reverse. A tape built with
// record=false only evaluates values (inference).
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Matrix value);
  // Non-owning constant; `value` must outlive the tape.
  Var view(const Matrix& value);
  // Leaf bound to a store entry; its gradient accumulates into entry.grad.
  Var parameter(ParameterStore& store, const std::string& name);
  // Read-only leaf; never receives gradient.
  Var parameter(const ParameterStore& store, const std::string& name);

  const Matrix& value(Var v) const;
  Matrix& grad(Var v);
  bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }

  // Seeds d(loss)/d(loss) = 1 for a 1×1 node and back-propagates.
  void backward(Var loss);

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var add_bias(Var x, Var bias);
  Var mul(Var a, Var b);
  Var scale(Var x, double factor);
  Var sigmoid(Var x);
  Var tanh(Var x);
  Var sum(Var x);
  Var concat_cols(std::span<const Var> parts);
  Var concat_cols(std::initializer_list<Var> parts) { return concat_cols(std::span<const Var>(parts.begin(), parts.size())); }
  Var slice_cols(Var x, int start, int width);

  // Normalizes each of `groups` equal column segments of every row, then
  // applies the per-column gain and bias.
  Var layer_norm(Var x, Var gain, Var bias, int groups = 1, double eps = 1e-5);

  // Gathers rows of `table` (V×E).
  Var embedding(Var table, std::span<const std::int32_t> ids);

  // Inverted dropout; identity when rate == 0.
  Var dropout(Var x, double rate, Rng& rng);

  // Row r of the result is a.row(r) when take_a[r] != 0, else b.row(r).
  Var select_rows(Var a, Var b, std::span<const std::uint8_t> take_a);

  // Stacks T nodes of shape B×D into (B·T)×D with row b*T + t.
  Var interleave(std::span<const Var> steps);

  // Multi-head additive attention over pre-projected queries and keys.
  // query_proj: B×(H·A); key_proj: (K·T)×(H·A); values: (K·T)×Dv;
  // score_weights: 1×(H·A). K is B, or 1 for keys shared by all rows.
  // Returns the B×Dv context; per-head weights (B×H·T, zero on padding,
  // before dropout) are written to *weights_out when given.
  Var additive_attention(Var query_proj, Var key_proj, Var values, Var score_weights, const AttentionLayout& layout,
                         double dropout_rate = 0.0, Rng* rng = nullptr, Matrix* weights_out = nullptr);

  // Σ_r weights[r] · CE(softmax(logits_r), smoothed one-hot(targets[r])),
  // with (1 - uncertainty) on the target and uncertainty/(V-1) elsewhere.
  Var cross_entropy(Var logits, std::span<const std::int32_t> targets, std::span<const double> weights,
                    double uncertainty);

 private:
  struct Node {
    Matrix own;
    const Matrix* ext = nullptr;
    Matrix* ext_grad = nullptr;
    Matrix grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::function<void()> back;
  };

  Var push(Matrix value, bool requires_grad);
  Node& node(Var v) { return nodes_[static_cast<std::size_t>(v.id)]; }
  const Node& node(Var v) const { return nodes_[static_cast<std::size_t>(v.id)]; }
  bool any_requires(std::initializer_list<Var> vs) const;
  void check(Var v, const char* op) const;

  bool record_;
  std::vector<Node> nodes_;
  std::unordered_map<const void*, std::int32_t> param_cache_;
};

// Row-wise log-softmax on plain values.
Matrix log_softmax_rows(const Matrix& logits);

}  // namespace hypo
