#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hypo/channel.hpp"
#include "hypo/corrector.hpp"
#include "hypo/eval.hpp"
#include "hypo/lm.hpp"
#include "hypo/wordpiece.hpp"

namespace hypo {

struct BeamHypothesis {
  TokenSeq tokens;  // without BOS/EOS
  double score = 0.0;
  bool finished = true;  // false when cut at the length limit
};

// Beam search over an unframed source. Expands every id except PAD and BOS;
// finished hypotheses shrink the live beam. Returns up to M hypotheses, best
// first, equal scores ordered by token sequence. max_steps < 0 means
// 2·|source| + 10.
std::vector<BeamHypothesis> beam_search(const Corrector& model, std::span<const TokenId> source, int beam,
                                        int max_steps = -1);

struct LatticeCell {
  TokenSeq tokens;
  double p = 0.0;  // recognizer score of the row's hypothesis
  double q = 0.0;  // corrector beam score
  double r = 0.0;  // LM score, meaningful when the lattice is rescored
};

struct CandidateLattice {
  std::string utterance_id;
  TokenSeq truth;
  std::vector<std::vector<LatticeCell>> rows;
  bool rescored = false;

  std::size_t size() const;
};

nlohmann::json to_json(const CandidateLattice& lattice);
CandidateLattice lattice_from_json(const nlohmann::json& j);
std::vector<CandidateLattice> read_lattices_jsonl(const std::string& path);
void write_lattices_jsonl(const std::string& path, std::span<const CandidateLattice> lattices);

CandidateLattice expand_lattice(const NBestList& nbest, const Corrector& model, int beam);

void lm_rescore_lattice(CandidateLattice& lattice, const LanguageModel& lm);

struct Weights {
  double lambda_las = 0.0;
  double lambda_sc = 0.0;
  double lambda_lm = 0.0;

  void validate() const;
  friend bool operator==(const Weights&, const Weights&) = default;
};

void to_json(nlohmann::json& j, const Weights& w);
void from_json(const nlohmann::json& j, Weights& w);

struct Selection {
  std::size_t row = 0;
  std::size_t col = 0;
  double score = 0.0;
  const LatticeCell* cell = nullptr;
};

// argmax of λ_las·p + λ_sc·q + λ_lm·r; ties go to the lower row, then column.
Selection select_best(const CandidateLattice& lattice, const Weights& w);

// argmax of p_i + λ·r_i over the n-best; ties go to the lower index.
std::size_t rescore_eq1(const NBestList& nbest, std::span<const double> lm_scores, double lambda);
std::size_t rescore_eq1(const NBestList& nbest, const LanguageModel& lm, double lambda);

struct GridPoint {
  Weights weights;
  double wer = 0.0;
};

struct SweepResult {
  Weights best;
  double best_wer = 0.0;
  std::vector<GridPoint> table;  // grid order
};

// Default grid: las {0,.25,.5,.7,1} × sc {0,.5,1} × lm {0,.1,.25,.5} without the origin.
std::vector<Weights> default_grid();

// Corpus WER of the selection under w, against each lattice's truth.
double lattice_wer(std::span<const CandidateLattice> lattices, const Weights& w, const Vocabulary& vocab);

// Minimizes dev WER over the grid; ties go to smaller λ_lm, then smaller λ_sc.
SweepResult sweep_weights(std::span<const CandidateLattice> dev, std::span<const Weights> grid,
                          const Vocabulary& vocab);

}  // namespace hypo
