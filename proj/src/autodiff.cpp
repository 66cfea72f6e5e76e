#include "hypo/autodiff.hpp"

#include <cmath>

#include "hypo/error.hpp"

namespace hypo {

Var Tape::push(Matrix value, bool requires_grad) {
  Node n;
  n.own = std::move(value);
  n.requires_grad = requires_grad && record_;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

void Tape::check(Var v, const char* op) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw ShapeError(std::string(op) + ": invalid tape variable");
  }
}

bool Tape::any_requires(std::initializer_list<Var> vs) const {
  if (!record_) return false;
  for (Var v : vs) {
    if (node(v).requires_grad) return true;
  }
  return false;
}

Var Tape::constant(Matrix value) { return push(std::move(value), false); }

Var Tape::view(const Matrix& value) {
  Node n;
  n.ext = &value;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Tape::parameter(ParameterStore& store, const std::string& name) {
  ParameterEntry& e = store.at(name);
  const void* key = &e;
  if (auto it = param_cache_.find(key); it != param_cache_.end()) return Var{it->second};
  Node n;
  n.ext = &e.value.matrix();
  if (record_) {
    n.ext_grad = &e.grad.matrix();
    n.requires_grad = true;
  }
  nodes_.push_back(std::move(n));
  const auto id = static_cast<std::int32_t>(nodes_.size() - 1);
  param_cache_.emplace(key, id);
  return Var{id};
}

Var Tape::parameter(const ParameterStore& store, const std::string& name) {
  const ParameterEntry& e = store.at(name);
  const void* key = &e;
  if (auto it = param_cache_.find(key); it != param_cache_.end()) return Var{it->second};
  Node n;
  n.ext = &e.value.matrix();
  nodes_.push_back(std::move(n));
  const auto id = static_cast<std::int32_t>(nodes_.size() - 1);
  param_cache_.emplace(key, id);
  return Var{id};
}

const Matrix& Tape::value(Var v) const {
  const Node& n = node(v);
  return n.ext ? *n.ext : n.own;
}

Matrix& Tape::grad(Var v) {
  Node& n = node(v);
  if (n.ext_grad) return *n.ext_grad;
  if (!n.has_grad) {
    const Matrix& val = n.ext ? *n.ext : n.own;
    n.grad = Matrix::Zero(val.rows(), val.cols());
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::backward(Var loss) {
  check(loss, "backward");
  if (!record_) throw HarnessError("backward on a non-recording tape");
  const Matrix& lv = value(loss);
  if (lv.rows() != 1 || lv.cols() != 1) throw ShapeError("backward: loss must be 1x1");
  grad(loss)(0, 0) += 1.0;
  for (std::int32_t i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || !n.back || !n.has_grad) continue;
    n.back();
  }
}

Var Tape::matmul(Var a, Var b) {
  const Matrix& A = value(a);
  const Matrix& B = value(b);
  if (A.cols() != B.rows()) {
    throw ShapeError("matmul: " + std::to_string(A.rows()) + "x" + std::to_string(A.cols()) + " by " +
                     std::to_string(B.rows()) + "x" + std::to_string(B.cols()));
  }
  Matrix C(A.rows(), B.cols());
  C.noalias() = A * B;
  Var out = push(std::move(C), any_requires({a, b}));
  if (node(out).requires_grad) {
    node(out).back = [this, a, b, out] {
      const Matrix& g = node(out).grad;
      if (node(a).requires_grad) grad(a).noalias() += g * value(b).transpose();
      if (node(b).requires_grad) grad(b).noalias() += value(a).transpose() * g;
    };
  }
  return out;
}

Var Tape::add(Var a, Var b) {
  const Matrix& A = value(a);
  const Matrix& B = value(b);
  if (A.rows() != B.rows() || A.cols() != B.cols()) throw ShapeError("add: shape mismatch");
  Var out = push(A + B, any_requires({a, b}));
  if (node(out).requires_grad) {
    node(out).back = [this, a, b, out] {
      const Matrix& g = node(out).grad;
      if (node(a).requires_grad) grad(a) += g;
      if (node(b).requires_grad) grad(b) += g;
    };
  }
  return out;
}

Var Tape::add_bias(Var x, Var bias) {
  const Matrix& X = value(x);
  const Matrix& b = value(bias);
  if (b.rows() != 1 || b.cols() != X.cols()) throw ShapeError("add_bias: bias must be 1xcols");
  Matrix Y = X.rowwise() + b.row(0);
  Var out = push(std::move(Y), any_requires({x, bias}));
  if (node(out).requires_grad) {
    node(out).back = [this, x, bias, out] {
      const Matrix& g = node(out).grad;
      if (node(x).requires_grad) grad(x) += g;
      if (node(bias).requires_grad) grad(bias) += g.colwise().sum();
    };
  }
  return out;
}

Var Tape::mul(Var a, Var b) {
  const Matrix& A = value(a);
  const Matrix& B = value(b);
  if (A.rows() != B.rows() || A.cols() != B.cols()) throw ShapeError("mul: shape mismatch");
  Var out = push(A.cwiseProduct(B), any_requires({a, b}));
  if (node(out).requires_grad) {
    node(out).back = [this, a, b, out] {
      const Matrix& g = node(out).grad;
      if (node(a).requires_grad) grad(a) += g.cwiseProduct(value(b));
      if (node(b).requires_grad) grad(b) += g.cwiseProduct(value(a));
    };
  }
  return out;
}

Var Tape::scale(Var x, double factor) {
  Var out = push(value(x) * factor, any_requires({x}));
  if (node(out).requires_grad) {
    node(out).back = [this, x, out, factor] { grad(x) += node(out).grad * factor; };
  }
  return out;
}

Var Tape::sigmoid(Var x) {
  Matrix Y = (1.0 + (-value(x).array()).exp()).inverse().matrix();
  Var out = push(std::move(Y), any_requires({x}));
  if (node(out).requires_grad) {
    node(out).back = [this, x, out] {
      const auto y = value(out).array();
      grad(x).array() += node(out).grad.array() * y * (1.0 - y);
    };
  }
  return out;
}

Var Tape::tanh(Var x) {
  Matrix Y = value(x).array().tanh().matrix();
  Var out = push(std::move(Y), any_requires({x}));
  if (node(out).requires_grad) {
    node(out).back = [this, x, out] {
      const auto y = value(out).array();
      grad(x).array() += node(out).grad.array() * (1.0 - y.square());
    };
  }
  return out;
}

Var Tape::sum(Var x) {
  Matrix s(1, 1);
  s(0, 0) = value(x).sum();
  Var out = push(std::move(s), any_requires({x}));
  if (node(out).requires_grad) {
    node(out).back = [this, x, out] { grad(x).array() += node(out).grad(0, 0); };
  }
  return out;
}

Var Tape::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Eigen::Index rows = value(parts[0]).rows();
  Eigen::Index cols = 0;
  bool req = false;
  for (Var p : parts) {
    if (value(p).rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += value(p).cols();
    req = req || (record_ && node(p).requires_grad);
  }
  Matrix Y(rows, cols);
  Eigen::Index off = 0;
  for (Var p : parts) {
    const Matrix& P = value(p);
    Y.middleCols(off, P.cols()) = P;
    off += P.cols();
  }
  Var out = push(std::move(Y), req);
  if (node(out).requires_grad) {
    std::vector<Var> saved(parts.begin(), parts.end());
    node(out).back = [this, saved, out] {
      const Matrix& g = node(out).grad;
      Eigen::Index o = 0;
      for (Var p : saved) {
        const Eigen::Index w = value(p).cols();
        if (node(p).requires_grad) grad(p) += g.middleCols(o, w);
        o += w;
      }
    };
  }
  return out;
}

Var Tape::slice_cols(Var x, int start, int width) {
  const Matrix& X = value(x);
  if (start < 0 || width <= 0 || start + width > X.cols()) throw ShapeError("slice_cols: out of range");
  Var out = push(X.middleCols(start, width), any_requires({x}));
  if (node(out).requires_grad) {
    node(out).back = [this, x, out, start, width] { grad(x).middleCols(start, width) += node(out).grad; };
  }
  return out;
}

Var Tape::layer_norm(Var x, Var gain, Var bias, int groups, double eps) {
  const Matrix& X = value(x);
  const Matrix& G = value(gain);
  const Matrix& B = value(bias);
  if (groups <= 0 || X.cols() % groups != 0) throw ShapeError("layer_norm: groups must divide the width");
  if (G.rows() != 1 || G.cols() != X.cols() || B.rows() != 1 || B.cols() != X.cols()) {
    throw ShapeError("layer_norm: gain/bias must be 1x" + std::to_string(X.cols()));
  }
  const Eigen::Index w = X.cols() / groups;
  Matrix xhat(X.rows(), X.cols());
  Matrix inv_sigma(X.rows(), groups);
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    for (int g = 0; g < groups; ++g) {
      const auto seg = X.row(r).segment(g * w, w).array();
      const double mean = seg.mean();
      const double var = (seg - mean).square().mean();
      const double is = 1.0 / std::sqrt(var + eps);
      inv_sigma(r, g) = is;
      xhat.row(r).segment(g * w, w) = ((seg - mean) * is).matrix();
    }
  }
  Matrix Y = (xhat.array().rowwise() * G.row(0).array()).rowwise() + B.row(0).array();
  Var out = push(std::move(Y), any_requires({x, gain, bias}));
  if (node(out).requires_grad) {
    node(out).back = [this, x, gain, bias, out, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma), groups,
                      w] {
      const Matrix& gy = node(out).grad;
      if (node(gain).requires_grad) grad(gain) += gy.cwiseProduct(xhat).colwise().sum();
      if (node(bias).requires_grad) grad(bias) += gy.colwise().sum();
      if (node(x).requires_grad) {
        Matrix& gx = grad(x);
        const auto gainrow = value(gain).row(0);
        for (Eigen::Index r = 0; r < gy.rows(); ++r) {
          for (int g = 0; g < groups; ++g) {
            const Eigen::VectorXd dxhat =
                gy.row(r).segment(g * w, w).cwiseProduct(gainrow.segment(g * w, w)).transpose();
            const Eigen::VectorXd xh = xhat.row(r).segment(g * w, w).transpose();
            const double m1 = dxhat.mean();
            const double m2 = dxhat.dot(xh) / static_cast<double>(w);
            gx.row(r).segment(g * w, w) +=
                (inv_sigma(r, g) * (dxhat.array() - m1 - xh.array() * m2)).matrix().transpose();
          }
        }
      }
    };
  }
  return out;
}

Var Tape::embedding(Var table, std::span<const std::int32_t> ids) {
  const Matrix& T = value(table);
  Matrix Y(static_cast<Eigen::Index>(ids.size()), T.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= T.rows()) {
      throw ShapeError("embedding: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(T.rows()));
    }
    Y.row(static_cast<Eigen::Index>(i)) = T.row(ids[i]);
  }
  Var out = push(std::move(Y), any_requires({table}));
  if (node(out).requires_grad) {
    std::vector<std::int32_t> saved(ids.begin(), ids.end());
    node(out).back = [this, table, out, saved = std::move(saved)] {
      const Matrix& g = node(out).grad;
      Matrix& gt = grad(table);
      for (std::size_t i = 0; i < saved.size(); ++i) gt.row(saved[i]) += g.row(static_cast<Eigen::Index>(i));
    };
  }
  return out;
}

Var Tape::dropout(Var x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be below 1");
  const Matrix& X = value(x);
  Matrix mask(X.rows(), X.cols());
  const double keep_scale = 1.0 / (1.0 - rate);
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng.uniform() < rate ? 0.0 : keep_scale;
  Var out = push(X.cwiseProduct(mask), any_requires({x}));
  if (node(out).requires_grad) {
    node(out).back = [this, x, out, mask = std::move(mask)] { grad(x) += node(out).grad.cwiseProduct(mask); };
  }
  return out;
}

Var Tape::select_rows(Var a, Var b, std::span<const std::uint8_t> take_a) {
  const Matrix& A = value(a);
  const Matrix& B = value(b);
  if (A.rows() != B.rows() || A.cols() != B.cols() || static_cast<std::size_t>(A.rows()) != take_a.size()) {
    throw ShapeError("select_rows: shape mismatch");
  }
  Matrix Y(A.rows(), A.cols());
  for (Eigen::Index r = 0; r < A.rows(); ++r) Y.row(r) = take_a[static_cast<std::size_t>(r)] ? A.row(r) : B.row(r);
  Var out = push(std::move(Y), any_requires({a, b}));
  if (node(out).requires_grad) {
    std::vector<std::uint8_t> mask(take_a.begin(), take_a.end());
    node(out).back = [this, a, b, out, mask = std::move(mask)] {
      const Matrix& g = node(out).grad;
      const bool ga = node(a).requires_grad;
      const bool gb = node(b).requires_grad;
      for (Eigen::Index r = 0; r < g.rows(); ++r) {
        if (mask[static_cast<std::size_t>(r)]) {
          if (ga) grad(a).row(r) += g.row(r);
        } else if (gb) {
          grad(b).row(r) += g.row(r);
        }
      }
    };
  }
  return out;
}

Var Tape::interleave(std::span<const Var> steps) {
  if (steps.empty()) throw ShapeError("interleave: no steps");
  const Eigen::Index B = value(steps[0]).rows();
  const Eigen::Index D = value(steps[0]).cols();
  const auto T = static_cast<Eigen::Index>(steps.size());
  Matrix Y(B * T, D);
  bool req = false;
  for (Eigen::Index t = 0; t < T; ++t) {
    const Matrix& S = value(steps[static_cast<std::size_t>(t)]);
    if (S.rows() != B || S.cols() != D) throw ShapeError("interleave: step shape mismatch");
    for (Eigen::Index b = 0; b < B; ++b) Y.row(b * T + t) = S.row(b);
    req = req || (record_ && node(steps[static_cast<std::size_t>(t)]).requires_grad);
  }
  Var out = push(std::move(Y), req);
  if (node(out).requires_grad) {
    std::vector<Var> saved(steps.begin(), steps.end());
    node(out).back = [this, saved, out, B, T] {
      const Matrix& g = node(out).grad;
      for (Eigen::Index t = 0; t < T; ++t) {
        Var s = saved[static_cast<std::size_t>(t)];
        if (!node(s).requires_grad) continue;
        Matrix& gs = grad(s);
        for (Eigen::Index b = 0; b < B; ++b) gs.row(b) += g.row(b * T + t);
      }
    };
  }
  return out;
}

Var Tape::additive_attention(Var query_proj, Var key_proj, Var values, Var score_weights, const AttentionLayout& layout,
                             double dropout_rate, Rng* rng, Matrix* weights_out) {
  const Matrix& Q = value(query_proj);
  const Matrix& K = value(key_proj);
  const Matrix& V = value(values);
  const Matrix& S = value(score_weights);
  const int H = layout.heads;
  const Eigen::Index T = layout.max_len;
  const auto nkeys = static_cast<Eigen::Index>(layout.lengths.size());
  const Eigen::Index B = Q.rows();
  if (H <= 0 || Q.cols() % H != 0) throw ShapeError("additive_attention: heads must divide the projection width");
  if (V.cols() % H != 0) throw ShapeError("additive_attention: heads must divide the value width");
  if (nkeys == 0 || T <= 0) throw ShapeError("additive_attention: zero-length key sequence");
  if (nkeys != B && nkeys != 1) throw ShapeError("additive_attention: key batch must be 1 or match queries");
  if (K.rows() != nkeys * T || V.rows() != nkeys * T || K.cols() != Q.cols() || S.rows() != 1 ||
      S.cols() != Q.cols()) {
    throw ShapeError("additive_attention: key/value/score shapes inconsistent");
  }
  for (int len : layout.lengths) {
    if (len <= 0 || len > T) throw ShapeError("additive_attention: zero-length key sequence");
  }
  const Eigen::Index A = Q.cols() / H;
  const Eigen::Index dv = V.cols() / H;
  const bool drop = dropout_rate > 0.0 && rng != nullptr;
  const double keep_scale = drop ? 1.0 / (1.0 - dropout_rate) : 1.0;

  // Per (row, head): tanh activations (len×A), weights and dropped weights.
  std::vector<Matrix> act(static_cast<std::size_t>(B * H));
  std::vector<Eigen::VectorXd> wts(static_cast<std::size_t>(B * H));
  std::vector<Eigen::VectorXd> wdrop(static_cast<std::size_t>(B * H));
  std::vector<Eigen::VectorXd> masks(drop ? static_cast<std::size_t>(B * H) : 0);
  Matrix ctx = Matrix::Zero(B, V.cols());
  if (weights_out) *weights_out = Matrix::Zero(B, H * T);
  for (Eigen::Index b = 0; b < B; ++b) {
    const Eigen::Index kb = nkeys == 1 ? 0 : b;
    const Eigen::Index len = layout.lengths[static_cast<std::size_t>(kb)];
    for (int h = 0; h < H; ++h) {
      const auto idx = static_cast<std::size_t>(b * H + h);
      Matrix U = (K.block(kb * T, h * A, len, A).rowwise() + Q.row(b).segment(h * A, A)).array().tanh().matrix();
      Eigen::VectorXd s = U * S.row(0).segment(h * A, A).transpose();
      const double mx = s.maxCoeff();
      Eigen::VectorXd w = (s.array() - mx).exp().matrix();
      w /= w.sum();
      Eigen::VectorXd wd = w;
      if (drop) {
        Eigen::VectorXd m(len);
        for (Eigen::Index t = 0; t < len; ++t) m(t) = rng->uniform() < dropout_rate ? 0.0 : keep_scale;
        wd = w.cwiseProduct(m);
        masks[idx] = std::move(m);
      }
      ctx.row(b).segment(h * dv, dv) = wd.transpose() * V.block(kb * T, h * dv, len, dv);
      if (weights_out) weights_out->row(b).segment(h * T, len) = w.transpose();
      act[idx] = std::move(U);
      wts[idx] = std::move(w);
      wdrop[idx] = std::move(wd);
    }
  }
  Var out = push(std::move(ctx), any_requires({query_proj, key_proj, values, score_weights}));
  if (node(out).requires_grad) {
    node(out).back = [this, query_proj, key_proj, values, score_weights, out, act = std::move(act),
                      wts = std::move(wts), wdrop = std::move(wdrop), masks = std::move(masks), lengths = layout.lengths, H,
                      T, A, dv, nkeys, drop] {
      const Matrix& g = node(out).grad;
      const Matrix& V = value(values);
      const Matrix& S = value(score_weights);
      const bool gq = node(query_proj).requires_grad;
      const bool gk = node(key_proj).requires_grad;
      const bool gv = node(values).requires_grad;
      const bool gs = node(score_weights).requires_grad;
      for (Eigen::Index b = 0; b < g.rows(); ++b) {
        const Eigen::Index kb = nkeys == 1 ? 0 : b;
        const Eigen::Index len = lengths[static_cast<std::size_t>(kb)];
        for (int h = 0; h < H; ++h) {
          const auto idx = static_cast<std::size_t>(b * H + h);
          const auto gctx = g.row(b).segment(h * dv, dv);
          const auto Vb = V.block(kb * T, h * dv, len, dv);
          if (gv) grad(values).block(kb * T, h * dv, len, dv).noalias() += wdrop[idx] * gctx;
          Eigen::VectorXd gw = Vb * gctx.transpose();
          if (drop) gw.array() *= masks[idx].array();
          const Eigen::VectorXd& w = wts[idx];
          const Eigen::VectorXd gsc = (w.array() * (gw.array() - w.dot(gw))).matrix();
          const Matrix& U = act[idx];
          if (gs) grad(score_weights).row(0).segment(h * A, A) += gsc.transpose() * U;
          if (gq || gk) {
            Matrix gpre = (1.0 - U.array().square()).matrix();
            gpre.array().colwise() *= gsc.array();
            gpre.array().rowwise() *= S.row(0).segment(h * A, A).array();
            if (gq) grad(query_proj).row(b).segment(h * A, A) += gpre.colwise().sum();
            if (gk) grad(key_proj).block(kb * T, h * A, len, A) += gpre;
          }
        }
      }
    };
  }
  return out;
}

Var Tape::cross_entropy(Var logits, std::span<const std::int32_t> targets, std::span<const double> weights,
                        double uncertainty) {
  const Matrix& Z = value(logits);
  const Eigen::Index R = Z.rows();
  const Eigen::Index Vn = Z.cols();
  if (Vn < 2) throw ShapeError("cross_entropy: vocabulary must have at least 2 entries");
  if (static_cast<std::size_t>(R) != targets.size() || targets.size() != weights.size()) {
    throw ShapeError("cross_entropy: targets/weights must match logit rows");
  }
  if (uncertainty < 0.0 || uncertainty >= 1.0) throw ConfigError("cross_entropy: uncertainty must be in [0,1)");
  const double on = 1.0 - uncertainty;
  const double off = uncertainty / static_cast<double>(Vn - 1);
  Matrix P(R, Vn);
  double loss = 0.0;
  for (Eigen::Index r = 0; r < R; ++r) {
    const std::int32_t t = targets[static_cast<std::size_t>(r)];
    if (t < 0 || t >= Vn) throw ShapeError("cross_entropy: target id out of range");
    const auto z = Z.row(r).array();
    const double mx = z.maxCoeff();
    const Eigen::ArrayXd e = (z - mx).exp().transpose();
    const double se = e.sum();
    const double logz = mx + std::log(se);
    P.row(r) = (e / se).matrix().transpose();
    const double wr = weights[static_cast<std::size_t>(r)];
    if (wr == 0.0) continue;
    const double zt = Z(r, t);
    const double ce = logz - (on * zt + off * (z.sum() - zt));
    loss += wr * ce;
  }
  if (!std::isfinite(loss)) throw NumericError("cross_entropy: non-finite loss");
  Matrix L(1, 1);
  L(0, 0) = loss;
  Var out = push(std::move(L), any_requires({logits}));
  if (node(out).requires_grad) {
    std::vector<std::int32_t> tg(targets.begin(), targets.end());
    std::vector<double> wv(weights.begin(), weights.end());
    node(out).back = [this, logits, out, P = std::move(P), tg = std::move(tg), wv = std::move(wv), on, off] {
      const double go = node(out).grad(0, 0);
      Matrix& gz = grad(logits);
      for (Eigen::Index r = 0; r < P.rows(); ++r) {
        const double wr = wv[static_cast<std::size_t>(r)] * go;
        if (wr == 0.0) continue;
        gz.row(r).array() += wr * (P.row(r).array() - off);
        gz(r, tg[static_cast<std::size_t>(r)]) -= wr * (on - off);
      }
    };
  }
  return out;
}

Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const auto z = logits.row(r).array();
    const double mx = z.maxCoeff();
    const double logz = mx + std::log((z - mx).exp().sum());
    out.row(r) = (z - logz).matrix();
  }
  return out;
}

}  // namespace hypo
