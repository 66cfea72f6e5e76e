#include "hypo/lm.hpp"

#include <algorithm>
#include <cmath>

#include "hypo/error.hpp"
#include "hypo/layers.hpp"

namespace hypo {

void LMConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("lm vocab_size must be >= 2");
  if (embed_dim <= 0 || hidden <= 0) throw ConfigError("lm dimensions must be positive");
  if (layers < 1) throw ConfigError("lm layers must be >= 1");
  if (!(init_scale > 0.0)) throw ConfigError("lm init_scale must be positive");
}

void to_json(nlohmann::json& j, const LMConfig& c) {
  j = {{"vocab_size", c.vocab_size},
       {"embed_dim", c.embed_dim},
       {"hidden", c.hidden},
       {"layers", c.layers},
       {"init_scale", c.init_scale}};
}

void from_json(const nlohmann::json& j, LMConfig& c) {
  LMConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.hidden = j.value("hidden", d.hidden);
  c.layers = j.value("layers", d.layers);
  c.init_scale = j.value("init_scale", d.init_scale);
}

namespace {

std::vector<LstmCell> cells(const LMConfig& cfg) {
  std::vector<LstmCell> out;
  for (int l = 1; l <= cfg.layers; ++l) {
    out.push_back({"lm.l" + std::to_string(l), l == 1 ? cfg.embed_dim : cfg.hidden, cfg.hidden});
  }
  return out;
}

template <class Store>
struct LmGraph {
  Tape& t;
  Store& s;
  const LMConfig& cfg;
  const std::vector<LstmCell>& cells;
  double dropout;
  Rng* rng;

  Var drop(Var x) { return dropout > 0.0 && rng ? t.dropout(x, dropout, *rng) : x; }

  Var step(std::span<const std::int32_t> prev, std::vector<LstmState>& states) {
    Var x = drop(t.embedding(t.parameter(s, "lm.embed"), prev));
    for (std::size_t l = 0; l < cells.size(); ++l) {
      states[l] = lstm_step(t, s, cells[l], x, states[l]);
      x = drop(states[l].h);
    }
    return x;
  }

  Var logits(Var features) {
    return t.add_bias(t.matmul(features, t.parameter(s, "lm.out.W")), t.parameter(s, "lm.out.b"));
  }

  // Logits for all B·T positions (row b*T + t) plus targets and validity.
  Var sequence_logits(std::span<const TokenSeq> seqs, std::vector<std::int32_t>& targets,
                      std::vector<double>& valid, int& T) {
    const int B = static_cast<int>(seqs.size());
    T = 0;
    for (const auto& q : seqs) T = std::max(T, static_cast<int>(q.size()) + 1);
    std::vector<LstmState> states;
    for (std::size_t l = 0; l < cells.size(); ++l) states.push_back(zero_state(t, B, cfg.hidden));
    targets.assign(static_cast<std::size_t>(B * T), 0);
    valid.assign(static_cast<std::size_t>(B * T), 0.0);
    std::vector<std::int32_t> prev(static_cast<std::size_t>(B));
    std::vector<Var> feats;
    for (int step_i = 0; step_i < T; ++step_i) {
      for (int b = 0; b < B; ++b) {
        const auto& q = seqs[static_cast<std::size_t>(b)];
        const int len = static_cast<int>(q.size());
        prev[static_cast<std::size_t>(b)] =
            step_i == 0 ? kBos : (step_i <= len ? q[static_cast<std::size_t>(step_i - 1)] : kPad);
        if (step_i <= len) {
          const auto k = static_cast<std::size_t>(b * T + step_i);
          targets[k] = step_i < len ? q[static_cast<std::size_t>(step_i)] : kEos;
          valid[k] = 1.0;
        }
      }
      feats.push_back(step(prev, states));
    }
    return logits(t.interleave(feats));
  }
};

}  // namespace

LanguageModel::LanguageModel(LMConfig cfg, ParameterStore store) : cfg_(std::move(cfg)), store_(std::move(store)) {
  cfg_.validate();
  auto expect = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    if (!store_.contains(name)) throw ShapeError("lm checkpoint lacks parameter " + name);
    const Matrix& m = store_.at(name).value.matrix();
    if (m.rows() != rows || m.cols() != cols) throw ShapeError("lm parameter " + name + " has wrong shape");
  };
  expect("lm.embed", cfg_.vocab_size, cfg_.embed_dim);
  expect("lm.out.W", cfg_.hidden, cfg_.vocab_size);
  for (const auto& c : cells(cfg_)) expect(c.prefix + ".W", c.input + c.hidden, 4 * c.hidden);
}

LanguageModel LanguageModel::create(const LMConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ParameterStore s;
  s.add_uniform("lm.embed", {cfg.vocab_size, cfg.embed_dim}, cfg.init_scale, rng);
  for (const auto& c : cells(cfg)) c.create(s, rng, cfg.init_scale);
  s.add_uniform("lm.out.W", {cfg.hidden, cfg.vocab_size}, cfg.init_scale, rng);
  s.add("lm.out.b", {cfg.vocab_size});
  return LanguageModel(cfg, std::move(s));
}

void LanguageModel::check_ids(std::span<const TokenId> ids) const {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= cfg_.vocab_size) {
      throw DecodeError("lm: token id " + std::to_string(ids[i]) + " out of range at index " + std::to_string(i));
    }
  }
}

Var LanguageModel::batch_loss(Tape& tape, ParameterStore& store, std::span<const TokenSeq> seqs, double dropout,
                              Rng* rng) const {
  if (seqs.empty()) throw ShapeError("lm batch_loss: empty batch");
  const auto cs = cells(cfg_);
  LmGraph<ParameterStore> g{tape, store, cfg_, cs, dropout, rng};
  std::vector<std::int32_t> targets;
  std::vector<double> weights;
  int T = 0;
  Var logits = g.sequence_logits(seqs, targets, weights, T);
  double n = 0.0;
  for (double w : weights) n += w;
  for (double& w : weights) w /= n;
  return tape.cross_entropy(logits, targets, weights, 0.0);
}

std::vector<double> LanguageModel::score_batch(std::span<const TokenSeq> seqs) const {
  std::vector<double> out;
  out.reserve(seqs.size());
  const auto cs = cells(cfg_);
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < seqs.size(); start += kChunk) {
    const auto part = seqs.subspan(start, std::min(kChunk, seqs.size() - start));
    for (const auto& q : part) check_ids(q);
    Tape tape(false);
    LmGraph<const ParameterStore> g{tape, store_, cfg_, cs, 0.0, nullptr};
    std::vector<std::int32_t> targets;
    std::vector<double> valid;
    int T = 0;
    const Matrix lp = log_softmax_rows(tape.value(g.sequence_logits(part, targets, valid, T)));
    for (std::size_t b = 0; b < part.size(); ++b) {
      double s = 0.0;
      for (int t = 0; t < T; ++t) {
        const auto k = b * static_cast<std::size_t>(T) + static_cast<std::size_t>(t);
        if (valid[k] > 0.0) s += lp(static_cast<Eigen::Index>(k), targets[k]);
      }
      out.push_back(s);
    }
  }
  return out;
}

double LanguageModel::score(std::span<const TokenId> ids) const {
  const TokenSeq seq(ids.begin(), ids.end());
  return score_batch(std::span(&seq, 1))[0];
}

LMState LanguageModel::initial_state(int rows) const {
  LMState st;
  for (int l = 0; l < cfg_.layers; ++l) {
    st.h.push_back(Matrix::Zero(rows, cfg_.hidden));
    st.c.push_back(Matrix::Zero(rows, cfg_.hidden));
  }
  return st;
}

Matrix LanguageModel::step(std::span<const TokenId> prev, LMState& state) const {
  if (static_cast<int>(state.h.size()) != cfg_.layers || state.rows() != static_cast<int>(prev.size())) {
    throw ShapeError("lm step: state does not match the model or token count");
  }
  check_ids(prev);
  const auto cs = cells(cfg_);
  Tape tape(false);
  LmGraph<const ParameterStore> g{tape, store_, cfg_, cs, 0.0, nullptr};
  std::vector<LstmState> states;
  for (int l = 0; l < cfg_.layers; ++l) {
    states.push_back({tape.view(state.h[static_cast<std::size_t>(l)]), tape.view(state.c[static_cast<std::size_t>(l)])});
  }
  const std::vector<std::int32_t> ids(prev.begin(), prev.end());
  Matrix lp = log_softmax_rows(tape.value(g.logits(g.step(ids, states))));
  for (int l = 0; l < cfg_.layers; ++l) {
    state.h[static_cast<std::size_t>(l)] = tape.value(states[static_cast<std::size_t>(l)].h);
    state.c[static_cast<std::size_t>(l)] = tape.value(states[static_cast<std::size_t>(l)].c);
  }
  return lp;
}

void LanguageModel::save(const std::string& path) const { store_.save(path, nlohmann::json(cfg_)); }

LanguageModel LanguageModel::load(const std::string& path) {
  nlohmann::json cfg;
  ParameterStore s = ParameterStore::load(path, &cfg);
  return LanguageModel(cfg.get<LMConfig>(), std::move(s));
}

double perplexity(const LanguageModel& lm, std::span<const TokenSeq> corpus) {
  if (corpus.empty()) throw DatasetError("perplexity: empty corpus");
  const std::vector<double> scores = lm.score_batch(corpus);
  double total = 0.0;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    total += scores[i];
    tokens += corpus[i].size() + 1;
  }
  return std::exp(-total / static_cast<double>(tokens));
}

LMTrainLog train_lm(LanguageModel& lm, std::span<const TokenSeq> train, std::span<const TokenSeq> dev,
                    const TrainConfig& cfg, const TrainCallback& on_event) {
  cfg.validate();
  if (train.empty()) throw DatasetError("train_lm: empty training corpus");
  if (dev.empty()) throw DatasetError("train_lm: empty dev corpus");
  Rng rng(cfg.seed);
  ParameterStore& store = lm.store();
  LMTrainLog log;
  log.initial_dev_perplexity = perplexity(lm, dev);
  log.best_dev_perplexity = log.initial_dev_perplexity;
  if (on_event) on_event({{"event", "lm_dev"}, {"epoch", -1}, {"dev_perplexity", log.initial_dev_perplexity}});
  ParameterStore best = store;
  int bad = 0;
  const std::size_t B = static_cast<std::size_t>(cfg.batch_size);
  const int max_epochs = cfg.max_epochs > 0 ? cfg.max_epochs : 1000000;
  for (int epoch = 0; epoch < max_epochs && store.step < cfg.max_steps; ++epoch) {
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);
    const std::size_t window = 32 * B;
    for (std::size_t i = 0; i < order.size(); i += window) {
      const auto end = order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + window));
      std::stable_sort(order.begin() + static_cast<std::ptrdiff_t>(i), end,
                       [&](std::size_t a, std::size_t b) { return train[a].size() < train[b].size(); });
    }
    std::vector<std::size_t> starts;
    for (std::size_t i = 0; i < order.size(); i += B) starts.push_back(i);
    for (std::size_t i = starts.size(); i > 1; --i) std::swap(starts[i - 1], starts[rng.uniform_int(i)]);
    for (std::size_t start : starts) {
      std::vector<TokenSeq> batch;
      for (std::size_t k = start; k < std::min(order.size(), start + B); ++k) batch.push_back(train[order[k]]);
      store.zero_grad();
      double loss = 0.0;
      {
        Tape tape(true);
        Var l = lm.batch_loss(tape, store, batch, cfg.dropout_rate, &rng);
        loss = tape.value(l)(0, 0);
        if (!std::isfinite(loss)) {
          throw NumericError("train_lm: non-finite loss at step " + std::to_string(store.step) + ", epoch " +
                             std::to_string(epoch));
        }
        tape.backward(l);
      }
      clip_gradients(store, cfg);
      adam_step(store, cfg);
      log.train_loss.push_back(loss);
      if (on_event && store.step % 50 == 0) {
        on_event({{"event", "lm_train"}, {"step", store.step}, {"epoch", epoch}, {"loss", loss}});
      }
      if (store.step >= cfg.max_steps) break;
    }
    const double ppl = perplexity(lm, dev);
    log.dev_perplexity.push_back(ppl);
    if (on_event) on_event({{"event", "lm_dev"}, {"epoch", epoch}, {"dev_perplexity", ppl}});
    if (ppl < log.best_dev_perplexity) {
      log.best_dev_perplexity = ppl;
      log.best_epoch = epoch;
      best = store;
      bad = 0;
    } else if (++bad >= cfg.patience) {
      log.early_stopped = true;
      break;
    }
  }
  store = std::move(best);
  return log;
}

}  // namespace hypo
