#include "hypo/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "hypo/error.hpp"
#include "hypo/io.hpp"

namespace hypo {

namespace {

struct Candidate {
  double score;
  int row;
  TokenId token;
};

}  // namespace

std::vector<BeamHypothesis> beam_search(const Corrector& model, std::span<const TokenId> source, int beam,
                                        int max_steps) {
  if (beam < 1) throw DecodeError("beam_search: beam must be >= 1");
  const TokenSeq framed = frame_source(source);
  const int V = model.config().vocab_size;
  for (TokenId id : source) {
    if (id < 0 || id >= V) throw DecodeError("beam_search: source id " + std::to_string(id) + " out of range");
  }
  if (max_steps < 0) max_steps = 2 * static_cast<int>(source.size()) + 10;
  const EncodedSource enc = model.encode_sequence(framed);

  std::vector<BeamHypothesis> live{{{}, 0.0, false}};
  std::vector<BeamHypothesis> done;
  DecoderState state = model.initial_state(1);
  std::vector<TokenId> prev{kBos};
  std::vector<Candidate> cands;

  for (int step = 0; step < max_steps && !live.empty(); ++step) {
    const StepOutput out = model.decode_step(prev, state, enc);
    const std::size_t k = static_cast<std::size_t>(beam) - done.size();
    cands.clear();
    for (int r = 0; r < static_cast<int>(live.size()); ++r) {
      for (TokenId v = 0; v < V; ++v) {
        if (v == kPad || v == kBos) continue;
        cands.push_back({live[static_cast<std::size_t>(r)].score + out.log_probs(r, v), r, v});
      }
    }
    auto better = [&](const Candidate& a, const Candidate& b) {
      if (a.score != b.score) return a.score > b.score;
      const TokenSeq& ta = live[static_cast<std::size_t>(a.row)].tokens;
      const TokenSeq& tb = live[static_cast<std::size_t>(b.row)].tokens;
      if (a.row != b.row && ta != tb) return ta < tb;
      return a.token < b.token;
    };
    const std::size_t take = std::min(k, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(take), cands.end(), better);

    std::vector<BeamHypothesis> next;
    std::vector<int> rows;
    prev.clear();
    for (std::size_t i = 0; i < take; ++i) {
      const Candidate& c = cands[i];
      BeamHypothesis h{live[static_cast<std::size_t>(c.row)].tokens, c.score, false};
      if (c.token == kEos) {
        h.finished = true;
        done.push_back(std::move(h));
      } else {
        h.tokens.push_back(c.token);
        next.push_back(std::move(h));
        rows.push_back(c.row);
        prev.push_back(c.token);
      }
    }
    live = std::move(next);
    if (!live.empty()) state = out.state.select(rows);
  }
  for (auto& h : live) done.push_back(std::move(h));
  std::stable_sort(done.begin(), done.end(), [](const BeamHypothesis& a, const BeamHypothesis& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.tokens < b.tokens;
  });
  if (done.size() > static_cast<std::size_t>(beam)) done.resize(static_cast<std::size_t>(beam));
  return done;
}

std::size_t CandidateLattice::size() const {
  std::size_t n = 0;
  for (const auto& row : rows) n += row.size();
  return n;
}

nlohmann::json to_json(const CandidateLattice& lattice) {
  auto rows = nlohmann::json::array();
  for (const auto& row : lattice.rows) {
    auto cells = nlohmann::json::array();
    for (const auto& c : row) {
      nlohmann::json cell = {{"tokens", c.tokens}, {"p", c.p}, {"q", c.q}};
      if (lattice.rescored) cell["r"] = c.r;
      cells.push_back(std::move(cell));
    }
    rows.push_back(std::move(cells));
  }
  return {{"id", lattice.utterance_id}, {"truth", lattice.truth}, {"rescored", lattice.rescored}, {"rows", rows}};
}

CandidateLattice lattice_from_json(const nlohmann::json& j) {
  try {
    CandidateLattice l;
    l.utterance_id = j.at("id").get<std::string>();
    l.truth = j.at("truth").get<TokenSeq>();
    l.rescored = j.value("rescored", false);
    for (const auto& row : j.at("rows")) {
      auto& cells = l.rows.emplace_back();
      for (const auto& c : row) {
        cells.push_back({c.at("tokens").get<TokenSeq>(), c.at("p").get<double>(), c.at("q").get<double>(),
                         l.rescored ? c.at("r").get<double>() : 0.0});
      }
    }
    return l;
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError(std::string("malformed lattice record: ") + e.what());
  }
}

std::vector<CandidateLattice> read_lattices_jsonl(const std::string& path) {
  std::vector<CandidateLattice> out;
  for (const auto& j : read_jsonl(path)) out.push_back(lattice_from_json(j));
  return out;
}

void write_lattices_jsonl(const std::string& path, std::span<const CandidateLattice> lattices) {
  std::vector<json> records;
  records.reserve(lattices.size());
  for (const auto& l : lattices) records.push_back(to_json(l));
  write_jsonl_atomic(path, records);
}

CandidateLattice expand_lattice(const NBestList& nbest, const Corrector& model, int beam) {
  if (nbest.hyps.empty()) throw DecodeError("expand_lattice: empty n-best list " + nbest.utterance_id);
  CandidateLattice l{nbest.utterance_id, nbest.truth, {}, false};
  for (const auto& h : nbest.hyps) {
    auto& cells = l.rows.emplace_back();
    for (auto& b : beam_search(model, h.ids, beam)) cells.push_back({std::move(b.tokens), h.score, b.score, 0.0});
  }
  return l;
}

void lm_rescore_lattice(CandidateLattice& lattice, const LanguageModel& lm) {
  std::vector<TokenSeq> seqs;
  for (const auto& row : lattice.rows) {
    for (const auto& c : row) seqs.push_back(c.tokens);
  }
  const std::vector<double> scores = lm.score_batch(seqs);
  std::size_t k = 0;
  for (auto& row : lattice.rows) {
    for (auto& c : row) c.r = scores[k++];
  }
  lattice.rescored = true;
}

void Weights::validate() const {
  if (lambda_las < 0.0 || lambda_sc < 0.0 || lambda_lm < 0.0) throw ConfigError("weights must be >= 0");
  if (lambda_las == 0.0 && lambda_sc == 0.0 && lambda_lm == 0.0) throw ConfigError("weights must not all be zero");
}

void to_json(nlohmann::json& j, const Weights& w) {
  j = {{"lambda_las", w.lambda_las}, {"lambda_sc", w.lambda_sc}, {"lambda_lm", w.lambda_lm}};
}

void from_json(const nlohmann::json& j, Weights& w) {
  w.lambda_las = j.at("lambda_las").get<double>();
  w.lambda_sc = j.at("lambda_sc").get<double>();
  w.lambda_lm = j.at("lambda_lm").get<double>();
}

Selection select_best(const CandidateLattice& lattice, const Weights& w) {
  w.validate();
  if (w.lambda_lm > 0.0 && !lattice.rescored) {
    throw DecodeError("select_best: lattice " + lattice.utterance_id + " lacks LM scores");
  }
  Selection best;
  best.score = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < lattice.rows.size(); ++i) {
    for (std::size_t j = 0; j < lattice.rows[i].size(); ++j) {
      const LatticeCell& c = lattice.rows[i][j];
      const double s = w.lambda_las * c.p + w.lambda_sc * c.q + (w.lambda_lm > 0.0 ? w.lambda_lm * c.r : 0.0);
      if (!best.cell || s > best.score) best = {i, j, s, &c};
    }
  }
  if (!best.cell) throw DecodeError("select_best: empty lattice " + lattice.utterance_id);
  return best;
}

std::size_t rescore_eq1(const NBestList& nbest, std::span<const double> lm_scores, double lambda) {
  if (nbest.hyps.empty()) throw DecodeError("rescore_eq1: empty n-best list " + nbest.utterance_id);
  if (lm_scores.size() != nbest.hyps.size()) throw ShapeError("rescore_eq1: one LM score per hypothesis required");
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < nbest.hyps.size(); ++i) {
    const double s = nbest.hyps[i].score + lambda * lm_scores[i];
    if (i == 0 || s > best_score) {
      best = i;
      best_score = s;
    }
  }
  return best;
}

std::size_t rescore_eq1(const NBestList& nbest, const LanguageModel& lm, double lambda) {
  std::vector<TokenSeq> seqs;
  for (const auto& h : nbest.hyps) seqs.push_back(h.ids);
  const std::vector<double> scores = lm.score_batch(seqs);
  return rescore_eq1(nbest, scores, lambda);
}

std::vector<Weights> default_grid() {
  std::vector<Weights> grid;
  for (double las : {0.0, 0.25, 0.5, 0.7, 1.0}) {
    for (double sc : {0.0, 0.5, 1.0}) {
      for (double lm : {0.0, 0.1, 0.25, 0.5}) {
        if (las == 0.0 && sc == 0.0 && lm == 0.0) continue;
        grid.push_back({las, sc, lm});
      }
    }
  }
  return grid;
}

double lattice_wer(std::span<const CandidateLattice> lattices, const Weights& w, const Vocabulary& vocab) {
  EditCounts total;
  std::size_t ref_words = 0;
  for (const auto& l : lattices) {
    const Selection s = select_best(l, w);
    const WerResult r = wer(normalize_words(decode(vocab, s.cell->tokens)), normalize_words(decode(vocab, l.truth)));
    total += r.counts;
    ref_words += r.ref_words;
  }
  return ref_words == 0 ? 0.0 : static_cast<double>(total.total()) / static_cast<double>(ref_words);
}

SweepResult sweep_weights(std::span<const CandidateLattice> dev, std::span<const Weights> grid,
                          const Vocabulary& vocab) {
  if (grid.empty()) throw ConfigError("sweep_weights: empty grid");
  if (dev.empty()) throw DatasetError("sweep_weights: no dev lattices");
  SweepResult out;
  bool have = false;
  for (const Weights& w : grid) {
    const double rate = lattice_wer(dev, w, vocab);
    out.table.push_back({w, rate});
    const bool better = !have || rate < out.best_wer ||
                        (rate == out.best_wer &&
                         (w.lambda_lm < out.best.lambda_lm ||
                          (w.lambda_lm == out.best.lambda_lm && w.lambda_sc < out.best.lambda_sc)));
    if (better) {
      out.best = w;
      out.best_wer = rate;
      have = true;
    }
  }
  return out;
}

}  // namespace hypo
