#include "hypo/corrector.hpp"

#include <algorithm>
#include <cmath>

#include "hypo/error.hpp"

namespace hypo {

void CorrectorConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("corrector vocab_size must be >= 2");
  if (embed_dim <= 0 || hidden <= 0 || attention_dim <= 0) throw ConfigError("corrector dimensions must be positive");
  if (enc_layers < 1 || dec_layers < 1) throw ConfigError("corrector needs at least one encoder and decoder layer");
  if (heads < 1) throw ConfigError("corrector heads must be >= 1");
  if ((2 * hidden) % heads != 0) throw ConfigError("corrector heads must divide the attention value width 2*hidden");
  if (residual_from_layer < 1 || residual_from_layer > std::min(enc_layers, dec_layers) + 1) {
    throw ConfigError("residual_from_layer must be in [1, min(enc_layers, dec_layers) + 1]");
  }
  if (!(init_scale > 0.0)) throw ConfigError("init_scale must be positive");
}

CorrectorConfig CorrectorConfig::full_scale() {
  CorrectorConfig c;
  c.vocab_size = static_cast<int>(kFullScaleVocabSize);
  c.enc_layers = 3;
  c.dec_layers = 3;
  c.residual_from_layer = 3;
  return c;
}

void to_json(nlohmann::json& j, const CorrectorConfig& c) {
  j = {{"vocab_size", c.vocab_size},   {"embed_dim", c.embed_dim},
       {"hidden", c.hidden},           {"enc_layers", c.enc_layers},
       {"dec_layers", c.dec_layers},   {"heads", c.heads},
       {"attention_dim", c.attention_dim}, {"residual_from_layer", c.residual_from_layer},
       {"init_scale", c.init_scale}};
}

void from_json(const nlohmann::json& j, CorrectorConfig& c) {
  CorrectorConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.hidden = j.value("hidden", d.hidden);
  c.enc_layers = j.value("enc_layers", d.enc_layers);
  c.dec_layers = j.value("dec_layers", d.dec_layers);
  c.heads = j.value("heads", d.heads);
  c.attention_dim = j.value("attention_dim", d.attention_dim);
  c.residual_from_layer = j.value("residual_from_layer", d.residual_from_layer);
  c.init_scale = j.value("init_scale", d.init_scale);
}

TokenSeq frame_source(std::span<const TokenId> raw) {
  TokenSeq s(raw.begin(), raw.end());
  s.push_back(kEos);
  return s;
}

TrainingPair sample_training_pair(const NBestList& record, Rng& rng) {
  if (record.hyps.empty()) throw DatasetError("sample_training_pair: record " + record.utterance_id + " is empty");
  const auto& h = record.hyps[rng.uniform_int(record.hyps.size())];
  return {frame_source(h.ids), record.truth};
}

DecoderState DecoderState::select(std::span<const int> rows) const {
  DecoderState out;
  auto gather = [&](const Matrix& m) {
    Matrix g(static_cast<Eigen::Index>(rows.size()), m.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) g.row(static_cast<Eigen::Index>(r)) = m.row(rows[r]);
    return g;
  };
  for (const auto& m : h) out.h.push_back(gather(m));
  for (const auto& m : c) out.c.push_back(gather(m));
  out.context = gather(context);
  return out;
}

namespace {

struct Layout {
  std::vector<LstmCell> enc_fw, enc_bw, dec;
  AttentionBlock att;

  explicit Layout(const CorrectorConfig& cfg) {
    const int H = cfg.hidden;
    for (int l = 1; l <= cfg.enc_layers; ++l) {
      const int in = l == 1 ? cfg.embed_dim : 2 * H;
      enc_fw.push_back({"enc.l" + std::to_string(l) + ".fw", in, H});
      enc_bw.push_back({"enc.l" + std::to_string(l) + ".bw", in, H});
    }
    for (int l = 1; l <= cfg.dec_layers; ++l) {
      const int in = (l == 1 ? cfg.embed_dim : H) + 2 * H;
      dec.push_back({"dec.l" + std::to_string(l), in, H});
    }
    att = {"att", H, 2 * H, cfg.heads, cfg.attention_dim};
  }
};

bool has_residual(const CorrectorConfig& cfg, int layer) { return layer >= std::max(2, cfg.residual_from_layer); }

// Graph construction shared by training (mutable store, recording tape)
// and inference (const store, non-recording tape).
template <class Store>
struct Graph {
  Tape& t;
  Store& s;
  const CorrectorConfig& cfg;
  const Layout& lay;
  double dropout;
  Rng* rng;

  Var drop(Var x) { return dropout > 0.0 && rng ? t.dropout(x, dropout, *rng) : x; }

  // ids is B×T row-major, PAD beyond each length. Returns top outputs per step.
  std::vector<Var> encode(const std::vector<std::int32_t>& ids, const std::vector<int>& lengths, int T) {
    const int B = static_cast<int>(lengths.size());
    Var embed = t.parameter(s, "embed");
    std::vector<Var> in(static_cast<std::size_t>(T));
    std::vector<std::vector<std::uint8_t>> valid(static_cast<std::size_t>(T), std::vector<std::uint8_t>(B));
    std::vector<bool> all_valid(static_cast<std::size_t>(T), true);
    std::vector<std::int32_t> col(static_cast<std::size_t>(B));
    for (int step = 0; step < T; ++step) {
      for (int b = 0; b < B; ++b) {
        col[static_cast<std::size_t>(b)] = ids[static_cast<std::size_t>(b * T + step)];
        const bool v = step < lengths[static_cast<std::size_t>(b)];
        valid[static_cast<std::size_t>(step)][static_cast<std::size_t>(b)] = v;
        if (!v) all_valid[static_cast<std::size_t>(step)] = false;
      }
      in[static_cast<std::size_t>(step)] = drop(t.embedding(embed, col));
    }
    const int H = cfg.hidden;
    for (int l = 0; l < cfg.enc_layers; ++l) {
      std::vector<Var> fw(static_cast<std::size_t>(T)), bw(static_cast<std::size_t>(T));
      LstmState st = zero_state(t, B, H);
      for (int step = 0; step < T; ++step) {
        const auto k = static_cast<std::size_t>(step);
        LstmState next = lstm_step(t, s, lay.enc_fw[static_cast<std::size_t>(l)], in[k], st);
        st = next;
        fw[k] = st.h;
      }
      st = zero_state(t, B, H);
      for (int step = T - 1; step >= 0; --step) {
        const auto k = static_cast<std::size_t>(step);
        LstmState next = lstm_step(t, s, lay.enc_bw[static_cast<std::size_t>(l)], in[k], st);
        if (all_valid[k]) {
          st = next;
        } else {
          st = {t.select_rows(next.h, st.h, valid[k]), t.select_rows(next.c, st.c, valid[k])};
        }
        bw[k] = st.h;
      }
      for (int step = 0; step < T; ++step) {
        const auto k = static_cast<std::size_t>(step);
        Var out = t.concat_cols({fw[k], bw[k]});
        if (has_residual(cfg, l + 1)) out = t.add(out, in[k]);
        in[k] = drop(out);
      }
    }
    return in;
  }

  // One decoder step over all rows. Updates states and the context in place
  // and returns the pre-softmax features [top output, context].
  Var decode(Var x, std::vector<LstmState>& states, Var& context, Var key_proj, Var values,
             const AttentionLayout& layout, Matrix* weights_out) {
    Var below;
    Var ctx;
    for (int l = 0; l < cfg.dec_layers; ++l) {
      const auto k = static_cast<std::size_t>(l);
      Var input = l == 0 ? t.concat_cols({x, context}) : t.concat_cols({below, ctx});
      states[k] = lstm_step(t, s, lay.dec[k], input, states[k]);
      Var out = states[k].h;
      if (l > 0 && has_residual(cfg, l + 1)) out = t.add(out, below);
      out = drop(out);
      if (l == 0) {
        ctx = attend(t, s, lay.att, out, key_proj, values, layout, dropout, rng, weights_out);
      }
      below = out;
    }
    context = ctx;
    return t.concat_cols({below, ctx});
  }

  Var logits(Var features) {
    return t.add_bias(t.matmul(features, t.parameter(s, "out.W")), t.parameter(s, "out.b"));
  }

  Var batch_loss(std::span<const TrainingPair> batch, double uncertainty, std::size_t* token_count) {
    const int B = static_cast<int>(batch.size());
    if (B == 0) throw ShapeError("batch_loss: empty batch");
    int Ts = 0, Tt = 0;
    for (const auto& p : batch) {
      if (p.source.empty()) throw DatasetError("batch_loss: empty source");
      Ts = std::max(Ts, static_cast<int>(p.source.size()));
      Tt = std::max(Tt, static_cast<int>(p.target.size()) + 1);
    }
    std::vector<std::int32_t> src(static_cast<std::size_t>(B * Ts), kPad);
    std::vector<int> lengths(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b) {
      const auto& p = batch[static_cast<std::size_t>(b)];
      lengths[static_cast<std::size_t>(b)] = static_cast<int>(p.source.size());
      for (std::size_t i = 0; i < p.source.size(); ++i) src[static_cast<std::size_t>(b * Ts) + i] = p.source[i];
    }
    const std::vector<Var> enc = encode(src, lengths, Ts);
    Var values = t.interleave(enc);
    Var key_proj = project_keys(t, s, lay.att, values);
    const AttentionLayout layout{cfg.heads, Ts, lengths};

    std::vector<LstmState> states;
    for (int l = 0; l < cfg.dec_layers; ++l) states.push_back(zero_state(t, B, cfg.hidden));
    Var context = t.constant(Matrix::Zero(B, 2 * cfg.hidden));
    Var embed = t.parameter(s, "embed");

    std::vector<Var> feats;
    std::vector<std::int32_t> targets(static_cast<std::size_t>(B * Tt), 0);
    std::vector<double> weights(static_cast<std::size_t>(B * Tt), 0.0);
    std::size_t tokens = 0;
    std::vector<std::int32_t> prev(static_cast<std::size_t>(B));
    for (int step = 0; step < Tt; ++step) {
      for (int b = 0; b < B; ++b) {
        const auto& y = batch[static_cast<std::size_t>(b)].target;
        const int len = static_cast<int>(y.size());
        prev[static_cast<std::size_t>(b)] = step == 0 ? kBos : (step <= len ? y[static_cast<std::size_t>(step - 1)] : kPad);
        if (step <= len) {
          targets[static_cast<std::size_t>(b * Tt + step)] = step < len ? y[static_cast<std::size_t>(step)] : kEos;
          weights[static_cast<std::size_t>(b * Tt + step)] = 1.0;
          ++tokens;
        }
      }
      Var x = drop(t.embedding(embed, prev));
      feats.push_back(decode(x, states, context, key_proj, values, layout, nullptr));
    }
    for (auto& w : weights) w /= static_cast<double>(tokens);
    if (token_count) *token_count = tokens;
    return t.cross_entropy(logits(t.interleave(feats)), targets, weights, uncertainty);
  }
};

}  // namespace

Corrector::Corrector(CorrectorConfig cfg, ParameterStore store) : cfg_(std::move(cfg)), store_(std::move(store)) {
  cfg_.validate();
  const Layout lay(cfg_);
  auto expect = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    if (!store_.contains(name)) throw ShapeError("corrector checkpoint lacks parameter " + name);
    const Matrix& m = store_.at(name).value.matrix();
    if (m.rows() != rows || m.cols() != cols) throw ShapeError("corrector parameter " + name + " has wrong shape");
  };
  expect("embed", cfg_.vocab_size, cfg_.embed_dim);
  expect("out.W", 3 * cfg_.hidden, cfg_.vocab_size);
  for (const auto* cells : {&lay.enc_fw, &lay.enc_bw, &lay.dec}) {
    for (const auto& c : *cells) expect(c.prefix + ".W", c.input + c.hidden, 4 * c.hidden);
  }
  expect("att.Wk", 2 * cfg_.hidden, lay.att.width());
}

Corrector Corrector::create(const CorrectorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ParameterStore s;
  const Layout lay(cfg);
  const double a = cfg.init_scale;
  s.add_uniform("embed", {cfg.vocab_size, cfg.embed_dim}, a, rng);
  for (std::size_t l = 0; l < lay.enc_fw.size(); ++l) {
    lay.enc_fw[l].create(s, rng, a);
    lay.enc_bw[l].create(s, rng, a);
  }
  for (const auto& c : lay.dec) c.create(s, rng, a);
  lay.att.create(s, rng, a);
  s.add_uniform("out.W", {3 * cfg.hidden, cfg.vocab_size}, a, rng);
  s.add("out.b", {cfg.vocab_size});
  return Corrector(cfg, std::move(s));
}

Var Corrector::batch_loss(Tape& tape, ParameterStore& store, std::span<const TrainingPair> batch, double uncertainty,
                          double dropout, Rng* rng) const {
  const Layout lay(cfg_);
  Graph<ParameterStore> g{tape, store, cfg_, lay, dropout, rng};
  return g.batch_loss(batch, uncertainty, nullptr);
}

double Corrector::evaluate_loss(std::span<const TrainingPair> batch, double uncertainty, std::size_t* tokens) const {
  const Layout lay(cfg_);
  Tape tape(false);
  Graph<const ParameterStore> g{tape, store_, cfg_, lay, 0.0, nullptr};
  return tape.value(g.batch_loss(batch, uncertainty, tokens))(0, 0);
}

EncodedSource Corrector::encode_sequence(std::span<const TokenId> framed_source) const {
  if (framed_source.empty()) throw DecodeError("encode_sequence: empty source");
  for (std::size_t i = 0; i < framed_source.size(); ++i) {
    if (framed_source[i] < 0 || framed_source[i] >= cfg_.vocab_size) {
      throw DecodeError("encode_sequence: token id out of range at index " + std::to_string(i));
    }
  }
  const Layout lay(cfg_);
  Tape tape(false);
  Graph<const ParameterStore> g{tape, store_, cfg_, lay, 0.0, nullptr};
  const int T = static_cast<int>(framed_source.size());
  const std::vector<std::int32_t> ids(framed_source.begin(), framed_source.end());
  const std::vector<Var> enc = g.encode(ids, {T}, T);
  Var values = tape.interleave(enc);
  EncodedSource out;
  out.values = tape.value(values);
  out.keys_proj = tape.value(project_keys(tape, store_, lay.att, values));
  out.length = T;
  return out;
}

DecoderState Corrector::initial_state(int rows) const {
  DecoderState st;
  for (int l = 0; l < cfg_.dec_layers; ++l) {
    st.h.push_back(Matrix::Zero(rows, cfg_.hidden));
    st.c.push_back(Matrix::Zero(rows, cfg_.hidden));
  }
  st.context = Matrix::Zero(rows, 2 * cfg_.hidden);
  return st;
}

StepOutput Corrector::decode_step(std::span<const TokenId> prev, const DecoderState& state,
                                  const EncodedSource& enc) const {
  const int rows = state.rows();
  if (static_cast<int>(prev.size()) != rows || static_cast<int>(state.h.size()) != cfg_.dec_layers ||
      state.context.cols() != 2 * cfg_.hidden) {
    throw ShapeError("decode_step: state does not match the model or token count");
  }
  if (enc.values.rows() != enc.length || enc.values.cols() != 2 * cfg_.hidden) {
    throw ShapeError("decode_step: encoder states do not match the model");
  }
  for (TokenId id : prev) {
    if (id < 0 || id >= cfg_.vocab_size) throw DecodeError("decode_step: token id out of range");
  }
  const Layout lay(cfg_);
  Tape tape(false);
  Graph<const ParameterStore> g{tape, store_, cfg_, lay, 0.0, nullptr};
  std::vector<LstmState> states;
  for (int l = 0; l < cfg_.dec_layers; ++l) {
    states.push_back({tape.view(state.h[static_cast<std::size_t>(l)]), tape.view(state.c[static_cast<std::size_t>(l)])});
  }
  Var context = tape.view(state.context);
  const std::vector<std::int32_t> ids(prev.begin(), prev.end());
  Var x = tape.embedding(tape.parameter(store_, "embed"), ids);
  StepOutput out;
  const AttentionLayout layout{cfg_.heads, enc.length, {enc.length}};
  Var feats = g.decode(x, states, context, tape.view(enc.keys_proj), tape.view(enc.values), layout, &out.attention);
  out.log_probs = log_softmax_rows(tape.value(g.logits(feats)));
  for (const auto& st : states) {
    out.state.h.push_back(tape.value(st.h));
    out.state.c.push_back(tape.value(st.c));
  }
  out.state.context = tape.value(context);
  return out;
}

void Corrector::save(const std::string& path) const { store_.save(path, nlohmann::json(cfg_)); }

Corrector Corrector::load(const std::string& path) {
  nlohmann::json cfg;
  ParameterStore s = ParameterStore::load(path, &cfg);
  return Corrector(cfg.get<CorrectorConfig>(), std::move(s));
}

double smoothing_floor(double uncertainty, std::size_t vocab_size) {
  const double u = uncertainty;
  double h = 0.0;
  if (u < 1.0) h -= (1.0 - u) * std::log(1.0 - u);
  if (u > 0.0) h -= u * std::log(u / static_cast<double>(vocab_size - 1));
  return h;
}

namespace {

std::vector<TrainingPair> fixed_pairs(std::span<const NBestList> records, std::uint64_t seed) {
  std::vector<TrainingPair> out;
  out.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    Rng rng(derive_seed(seed, i));
    out.push_back(sample_training_pair(records[i], rng));
  }
  return out;
}

double mean_loss(const Corrector& model, std::span<const TrainingPair> pairs, double uncertainty) {
  double total = 0.0;
  std::size_t tokens = 0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t i = 0; i < pairs.size(); i += kChunk) {
    const auto part = pairs.subspan(i, std::min(kChunk, pairs.size() - i));
    std::size_t n = 0;
    const double loss = model.evaluate_loss(part, uncertainty, &n);
    total += loss * static_cast<double>(n);
    tokens += n;
  }
  return tokens ? total / static_cast<double>(tokens) : 0.0;
}

}  // namespace

TrainLog train_corrector(Corrector& model, std::span<const NBestList> train, std::span<const NBestList> dev,
                         const TrainConfig& cfg, const TrainCallback& on_event) {
  cfg.validate();
  if (train.empty()) throw DatasetError("train_corrector: empty training set");
  for (const auto& rec : train) {
    for (const auto& h : rec.hyps) {
      for (TokenId id : h.ids) {
        if (id < 0 || id >= model.config().vocab_size) {
          throw DatasetError("train_corrector: record " + rec.utterance_id + " has a token outside the model vocabulary");
        }
      }
    }
  }
  Rng rng(cfg.seed);
  const std::vector<TrainingPair> dev_pairs = fixed_pairs(dev, derive_seed(cfg.seed, 0xD5));
  const double u = cfg.label_smoothing_uncertainty;
  TrainLog log;
  ParameterStore& store = model.store();
  ParameterStore best = store;
  bool have_best = false;
  int bad_evals = 0;

  auto evaluate = [&]() {
    if (dev_pairs.empty()) return false;
    const double loss = mean_loss(model, dev_pairs, u);
    log.dev_loss.emplace_back(store.step, loss);
    if (on_event) on_event({{"event", "dev"}, {"step", store.step}, {"dev_loss", loss}});
    if (!have_best || loss < log.best_dev_loss) {
      log.best_dev_loss = loss;
      log.best_step = store.step;
      best = store;
      have_best = true;
      bad_evals = 0;
    } else if (++bad_evals >= cfg.patience) {
      log.early_stopped = true;
      return true;
    }
    return false;
  };

  const std::size_t B = static_cast<std::size_t>(cfg.batch_size);
  bool stop = false;
  for (int epoch = 0; !stop && (cfg.max_epochs == 0 || epoch < cfg.max_epochs); ++epoch) {
    std::vector<TrainingPair> pairs;
    pairs.reserve(train.size());
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);
    for (std::size_t i : order) pairs.push_back(sample_training_pair(train[i], rng));
    // Length bucketing within windows keeps padding low.
    const std::size_t window = 32 * B;
    for (std::size_t i = 0; i < pairs.size(); i += window) {
      const auto end = pairs.begin() + static_cast<std::ptrdiff_t>(std::min(pairs.size(), i + window));
      std::stable_sort(pairs.begin() + static_cast<std::ptrdiff_t>(i), end,
                       [](const TrainingPair& a, const TrainingPair& b) { return a.source.size() < b.source.size(); });
    }
    std::vector<std::size_t> batch_starts;
    for (std::size_t i = 0; i < pairs.size(); i += B) batch_starts.push_back(i);
    for (std::size_t i = batch_starts.size(); i > 1; --i) std::swap(batch_starts[i - 1], batch_starts[rng.uniform_int(i)]);

    for (std::size_t start : batch_starts) {
      const std::span<const TrainingPair> batch(pairs.data() + start, std::min(B, pairs.size() - start));
      store.zero_grad();
      double loss = 0.0;
      {
        Tape tape(true);
        Var l = model.batch_loss(tape, store, batch, u, cfg.dropout_rate, &rng);
        loss = tape.value(l)(0, 0);
        if (!std::isfinite(loss)) {
          throw NumericError("train_corrector: non-finite loss at step " + std::to_string(store.step) + ", epoch " +
                             std::to_string(epoch) + ", batch of " + std::to_string(batch.size()) + " pairs");
        }
        tape.backward(l);
      }
      const bool clipped = clip_gradients(store, cfg);
      adam_step(store, cfg);
      log.train_loss.push_back(loss);
      if (on_event && store.step % 50 == 0) {
        on_event({{"event", "train"},
                  {"step", store.step},
                  {"epoch", epoch},
                  {"loss", loss},
                  {"lr", learning_rate(cfg, store.step)},
                  {"clipped", clipped}});
      }
      if (store.step % cfg.eval_interval == 0 && evaluate()) {
        stop = true;
        break;
      }
      if (store.step >= cfg.max_steps) {
        stop = true;
        break;
      }
    }
  }
  if (log.dev_loss.empty() || log.dev_loss.back().first != store.step) evaluate();
  if (have_best) store = std::move(best);
  return log;
}

}  // namespace hypo
