#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hypo/rng.hpp"
#include "hypo/wordpiece.hpp"

namespace hypo {

// Error-channel parameters. Per truth token: keep with 1 - sub - del,
// substitute with sub, delete with del; after every position a geometric
// number of random tokens is inserted (continue probability ins).
struct ChannelSpec {
  double sub_rate = 0.12;
  double del_rate = 0.02;
  double ins_rate = 0.02;
  // "uniform" or "similar" (edit-distance weighted with temperature).
  std::string substitution = "uniform";
  double confusion_temperature = 1.0;
  std::uint64_t seed = 0;
  std::string label = "clean";

  void validate() const;
  static ChannelSpec clean();
  static ChannelSpec mtr();  // clean rates doubled
};

void to_json(nlohmann::json& j, const ChannelSpec& s);
void from_json(const nlohmann::json& j, ChannelSpec& s);

struct Hypothesis {
  TokenSeq ids;
  double score = 0.0;  // log-likelihood, <= 0

  friend bool operator==(const Hypothesis&, const Hypothesis&) = default;
};

// N scored error hypotheses for one truth, best score first; equal scores
// are ordered by token sequence.
struct NBestList {
  std::string utterance_id;
  TokenSeq truth;
  std::vector<Hypothesis> hyps;

  friend bool operator==(const NBestList&, const NBestList&) = default;
};

nlohmann::json to_json(const NBestList& list);
NBestList nbest_from_json(const nlohmann::json& j);
std::vector<NBestList> read_nbest_jsonl(const std::string& path);
void write_nbest_jsonl(const std::string& path, std::span<const NBestList> lists);

// Substitution and insertion distributions over a pool of token ids.
class ErrorChannel {
 public:
  // Pool is every non-special id of the vocabulary.
  ErrorChannel(const Vocabulary& vocab, ChannelSpec spec);
  // Explicit pool; "similar" substitution needs token strings, one per pool id.
  ErrorChannel(std::vector<TokenId> pool, ChannelSpec spec, std::vector<std::string> pool_strings = {});

  const ChannelSpec& spec() const { return spec_; }
  std::span<const TokenId> pool() const { return pool_; }

  struct Sample {
    TokenSeq ids;
    double log_likelihood = 0.0;
  };

  // One pass over truth. Log-likelihood is that of the sampled edit path.
  Sample corrupt(std::span<const TokenId> truth, Rng& rng) const;

  // Log-probability of substituting `from` by `to` (to != from).
  double substitution_log_prob(TokenId from, TokenId to) const;

  NBestList generate_nbest(std::span<const TokenId> truth, std::size_t n, Rng& rng) const;

 private:
  int pool_index(TokenId id) const;
  const std::vector<double>& similarity_row(int from) const;  // cumulative weights
  TokenId draw_substitute(TokenId from, Rng& rng) const;

  ChannelSpec spec_;
  std::vector<TokenId> pool_;
  std::vector<std::string> strings_;
  std::vector<int> index_;  // id -> pool position or -1
  mutable std::vector<std::vector<double>> sim_cache_;
};

struct DatasetStats {
  std::size_t records = 0;
  std::size_t skipped_empty = 0;
  std::size_t filtered_long = 0;
  std::size_t truth_tokens = 0;
  // Token error rate (edits / truth tokens) per hypothesis rank, summed over
  // records that have that rank.
  std::vector<double> token_error_rate_by_rank;
  std::vector<std::size_t> records_by_rank;

  nlohmann::json to_json() const;
};

inline constexpr std::size_t kMaxWordsPerLine = 90;

struct Dataset {
  std::vector<NBestList> records;
  DatasetStats stats;
};

// One record per usable line; the record for line k draws from
// derive_seed(spec.seed, k). Ids are "<label>-<line index>".
Dataset build_dataset(std::span<const std::string> lines, const Vocabulary& vocab, const ChannelSpec& spec,
                      std::size_t n);

// Concatenation of datasets built with different specs.
Dataset union_datasets(std::span<const Dataset> parts);

}  // namespace hypo
