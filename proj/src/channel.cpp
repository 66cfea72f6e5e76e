#include "hypo/channel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

#include "hypo/error.hpp"
#include "hypo/eval.hpp"
#include "hypo/io.hpp"

namespace hypo {

namespace {

constexpr double kFloor = 1e-12;

double floored_log(double p) { return std::log(std::max(p, kFloor)); }

std::vector<TokenId> learned_ids(const Vocabulary& vocab) {
  std::vector<TokenId> ids;
  for (std::size_t id = kNumSpecials; id < vocab.size(); ++id) ids.push_back(static_cast<TokenId>(id));
  return ids;
}

std::vector<std::string> learned_strings(const Vocabulary& vocab) {
  return {vocab.tokens().begin() + kNumSpecials, vocab.tokens().end()};
}

std::size_t char_edit_distance(const std::string& a, const std::string& b) {
  const auto ca = utf8_chars(a), cb = utf8_chars(b);
  return static_cast<std::size_t>(edit_counts<std::string>(ca, cb).total());
}

}  // namespace

void ChannelSpec::validate() const {
  for (double r : {sub_rate, del_rate, ins_rate}) {
    if (!(r >= 0.0 && r < 1.0)) throw ConfigError("channel rates must be in [0, 1)");
  }
  if (!(sub_rate + del_rate < 1.0)) throw ConfigError("channel sub_rate + del_rate must be < 1");
  if (substitution != "uniform" && substitution != "similar") {
    throw ConfigError("channel substitution must be \"uniform\" or \"similar\", got \"" + substitution + "\"");
  }
  if (!(confusion_temperature > 0.0)) throw ConfigError("confusion_temperature must be positive");
}

ChannelSpec ChannelSpec::clean() { return ChannelSpec{}; }

ChannelSpec ChannelSpec::mtr() {
  ChannelSpec s;
  s.sub_rate *= 2;
  s.del_rate *= 2;
  s.ins_rate *= 2;
  s.label = "mtr";
  return s;
}

void to_json(nlohmann::json& j, const ChannelSpec& s) {
  j = {{"sub_rate", s.sub_rate},
       {"del_rate", s.del_rate},
       {"ins_rate", s.ins_rate},
       {"substitution", s.substitution},
       {"confusion_temperature", s.confusion_temperature},
       {"seed", s.seed},
       {"label", s.label}};
}

void from_json(const nlohmann::json& j, ChannelSpec& s) {
  ChannelSpec d = j.value("label", std::string("clean")) == "mtr" ? ChannelSpec::mtr() : ChannelSpec::clean();
  s.sub_rate = j.value("sub_rate", d.sub_rate);
  s.del_rate = j.value("del_rate", d.del_rate);
  s.ins_rate = j.value("ins_rate", d.ins_rate);
  s.substitution = j.value("substitution", d.substitution);
  s.confusion_temperature = j.value("confusion_temperature", d.confusion_temperature);
  s.seed = j.value("seed", d.seed);
  s.label = j.value("label", d.label);
}

json to_json(const NBestList& list) {
  json hyps = json::array();
  for (const auto& h : list.hyps) hyps.push_back({{"ids", h.ids}, {"score", h.score}});
  return {{"utterance_id", list.utterance_id}, {"truth", list.truth}, {"hyps", hyps}};
}

NBestList nbest_from_json(const json& j) {
  NBestList l;
  try {
    l.utterance_id = j.at("utterance_id").get<std::string>();
    l.truth = j.at("truth").get<TokenSeq>();
    for (const auto& h : j.at("hyps")) l.hyps.push_back({h.at("ids").get<TokenSeq>(), h.at("score").get<double>()});
  } catch (const json::exception& e) {
    throw DatasetError(std::string("malformed n-best record: ") + e.what());
  }
  if (l.hyps.empty()) throw DatasetError("n-best record " + l.utterance_id + " has no hypotheses");
  return l;
}

std::vector<NBestList> read_nbest_jsonl(const std::string& path) {
  std::vector<NBestList> out;
  for (const auto& j : read_jsonl(path)) out.push_back(nbest_from_json(j));
  return out;
}

void write_nbest_jsonl(const std::string& path, std::span<const NBestList> lists) {
  std::vector<json> records;
  records.reserve(lists.size());
  for (const auto& l : lists) records.push_back(to_json(l));
  write_jsonl_atomic(path, records);
}

ErrorChannel::ErrorChannel(const Vocabulary& vocab, ChannelSpec spec)
    : ErrorChannel(learned_ids(vocab), std::move(spec), learned_strings(vocab)) {}

ErrorChannel::ErrorChannel(std::vector<TokenId> pool, ChannelSpec spec, std::vector<std::string> pool_strings)
    : spec_(std::move(spec)), pool_(std::move(pool)), strings_(std::move(pool_strings)) {
  spec_.validate();
  if (pool_.empty()) throw ConfigError("error channel needs a non-empty token pool");
  if (spec_.sub_rate > 0.0 && pool_.size() < 2) throw ConfigError("substitution needs at least two pool tokens");
  if (spec_.substitution == "similar" && strings_.size() != pool_.size()) {
    throw ConfigError("similarity substitution needs one token string per pool id");
  }
  const TokenId max_id = *std::max_element(pool_.begin(), pool_.end());
  index_.assign(static_cast<std::size_t>(max_id) + 1, -1);
  for (std::size_t i = 0; i < pool_.size(); ++i) {
    if (pool_[i] < 0) throw ConfigError("negative token id in channel pool");
    if (index_[static_cast<std::size_t>(pool_[i])] >= 0) throw ConfigError("duplicate token id in channel pool");
    index_[static_cast<std::size_t>(pool_[i])] = static_cast<int>(i);
  }
  sim_cache_.resize(pool_.size());
}

int ErrorChannel::pool_index(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= index_.size()) return -1;
  return index_[static_cast<std::size_t>(id)];
}

const std::vector<double>& ErrorChannel::similarity_row(int from) const {
  auto& row = sim_cache_[static_cast<std::size_t>(from)];
  if (!row.empty()) return row;
  row.resize(pool_.size());
  double acc = 0.0;
  for (std::size_t k = 0; k < pool_.size(); ++k) {
    if (static_cast<int>(k) != from) {
      const double dist = static_cast<double>(char_edit_distance(strings_[static_cast<std::size_t>(from)], strings_[k]));
      acc += std::exp(-dist / spec_.confusion_temperature);
    }
    row[k] = acc;
  }
  return row;
}

double ErrorChannel::substitution_log_prob(TokenId from, TokenId to) const {
  const int f = pool_index(from), t = pool_index(to);
  if (t < 0 || to == from) return -std::numeric_limits<double>::infinity();
  const double p = static_cast<double>(pool_.size());
  if (f < 0) return -std::log(p);
  if (spec_.substitution == "uniform") return -std::log(p - 1.0);
  const auto& row = similarity_row(f);
  const double w = row[static_cast<std::size_t>(t)] - (t > 0 ? row[static_cast<std::size_t>(t) - 1] : 0.0);
  return std::log(w) - std::log(row.back());
}

TokenId ErrorChannel::draw_substitute(TokenId from, Rng& rng) const {
  const int f = pool_index(from);
  if (f < 0) return pool_[rng.uniform_int(pool_.size())];
  if (spec_.substitution == "uniform") {
    const auto k = static_cast<int>(rng.uniform_int(pool_.size() - 1));
    return pool_[static_cast<std::size_t>(k < f ? k : k + 1)];
  }
  const auto& row = similarity_row(f);
  const double u = rng.uniform() * row.back();
  auto it = std::upper_bound(row.begin(), row.end(), u);
  if (it == row.end()) --it;
  auto k = static_cast<std::size_t>(it - row.begin());
  if (static_cast<int>(k) == f) k = k == 0 ? 1 : k - 1;
  return pool_[k];
}

ErrorChannel::Sample ErrorChannel::corrupt(std::span<const TokenId> truth, Rng& rng) const {
  if (truth.empty()) throw DatasetError("corrupt: empty truth sequence");
  const double keep = 1.0 - spec_.sub_rate - spec_.del_rate;
  const double log_pool = std::log(static_cast<double>(pool_.size()));
  Sample s;
  s.ids.reserve(truth.size() + 4);
  for (TokenId t : truth) {
    const double u = rng.uniform();
    if (u < keep) {
      s.ids.push_back(t);
      s.log_likelihood += std::log(keep);
    } else if (u < keep + spec_.sub_rate) {
      const TokenId r = draw_substitute(t, rng);
      s.ids.push_back(r);
      s.log_likelihood += std::log(spec_.sub_rate) + substitution_log_prob(t, r);
    } else {
      s.log_likelihood += std::log(spec_.del_rate);
    }
    if (spec_.ins_rate > 0.0) {
      while (rng.uniform() < spec_.ins_rate) {
        s.ids.push_back(pool_[rng.uniform_int(pool_.size())]);
        s.log_likelihood += std::log(spec_.ins_rate) - log_pool;
      }
      s.log_likelihood += std::log(1.0 - spec_.ins_rate);
    }
  }
  return s;
}

NBestList ErrorChannel::generate_nbest(std::span<const TokenId> truth, std::size_t n, Rng& rng) const {
  if (n == 0) throw ConfigError("generate_nbest: N must be >= 1");
  if (truth.empty()) throw DatasetError("generate_nbest: empty truth sequence");
  std::map<TokenSeq, double> found;
  const std::size_t cap = 50 * n;
  for (std::size_t attempt = 0; attempt < cap && found.size() < n; ++attempt) {
    Sample s = corrupt(truth, rng);
    auto [it, inserted] = found.emplace(std::move(s.ids), s.log_likelihood);
    if (!inserted) it->second = std::max(it->second, s.log_likelihood);
  }
  if (found.size() < n) {
    // Deterministic single-substitution variants, scored on the same path
    // model with probabilities floored so that zero rates stay finite.
    const double keep = 1.0 - spec_.sub_rate - spec_.del_rate;
    const double stop = spec_.ins_rate > 0.0 ? std::log(1.0 - spec_.ins_rate) : 0.0;
    const double base = static_cast<double>(truth.size()) * stop;
    for (std::size_t pos = 0; pos < truth.size() && found.size() < n; ++pos) {
      for (std::size_t k = 0; k < pool_.size() && found.size() < n; ++k) {
        if (pool_[k] == truth[pos]) continue;
        TokenSeq cand(truth.begin(), truth.end());
        cand[pos] = pool_[k];
        if (found.count(cand)) continue;
        const double ll = base + static_cast<double>(truth.size() - 1) * floored_log(keep) +
                          floored_log(spec_.sub_rate) + substitution_log_prob(truth[pos], pool_[k]);
        found.emplace(std::move(cand), ll);
      }
    }
  }
  if (found.size() < n) {
    throw DatasetError("cannot produce " + std::to_string(n) + " distinct hypotheses from a pool of " +
                       std::to_string(pool_.size()) + " tokens");
  }
  NBestList out;
  out.truth.assign(truth.begin(), truth.end());
  for (auto& [ids, score] : found) out.hyps.push_back({ids, score});
  std::stable_sort(out.hyps.begin(), out.hyps.end(),
                   [](const Hypothesis& a, const Hypothesis& b) { return a.score > b.score; });
  return out;
}

json DatasetStats::to_json() const {
  return {{"records", records},
          {"skipped_empty", skipped_empty},
          {"filtered_long", filtered_long},
          {"truth_tokens", truth_tokens},
          {"token_error_rate_by_rank", token_error_rate_by_rank},
          {"records_by_rank", records_by_rank}};
}

namespace {

void accumulate_stats(DatasetStats& st, const NBestList& rec, std::vector<double>& edits,
                      std::vector<double>& tokens) {
  for (std::size_t r = 0; r < rec.hyps.size(); ++r) {
    if (edits.size() <= r) {
      edits.resize(r + 1, 0.0);
      tokens.resize(r + 1, 0.0);
      st.records_by_rank.resize(r + 1, 0);
    }
    edits[r] += static_cast<double>(edit_counts<TokenId>(rec.hyps[r].ids, rec.truth).total());
    tokens[r] += static_cast<double>(rec.truth.size());
    ++st.records_by_rank[r];
  }
}

void finish_stats(DatasetStats& st, const std::vector<double>& edits, const std::vector<double>& tokens) {
  st.token_error_rate_by_rank.resize(edits.size());
  for (std::size_t r = 0; r < edits.size(); ++r) {
    st.token_error_rate_by_rank[r] = tokens[r] > 0 ? edits[r] / tokens[r] : 0.0;
  }
}

}  // namespace

Dataset build_dataset(std::span<const std::string> lines, const Vocabulary& vocab, const ChannelSpec& spec,
                      std::size_t n) {
  const ErrorChannel channel(vocab, spec);
  Dataset ds;
  std::vector<double> edits, tokens;
  char id[64];
  for (std::size_t k = 0; k < lines.size(); ++k) {
    const auto words = split_words(lines[k]);
    if (words.empty()) {
      ++ds.stats.skipped_empty;
      continue;
    }
    if (words.size() > kMaxWordsPerLine) {
      ++ds.stats.filtered_long;
      continue;
    }
    const TokenSeq truth = encode(vocab, lines[k]);
    Rng rng(derive_seed(spec.seed, k));
    NBestList rec = channel.generate_nbest(truth, n, rng);
    std::snprintf(id, sizeof id, "%s-%06zu", spec.label.c_str(), k);
    rec.utterance_id = id;
    ds.stats.truth_tokens += truth.size();
    accumulate_stats(ds.stats, rec, edits, tokens);
    ds.records.push_back(std::move(rec));
  }
  ds.stats.records = ds.records.size();
  finish_stats(ds.stats, edits, tokens);
  return ds;
}

Dataset union_datasets(std::span<const Dataset> parts) {
  Dataset out;
  std::vector<double> edits, tokens;
  for (const auto& p : parts) {
    for (const auto& rec : p.records) {
      out.stats.truth_tokens += rec.truth.size();
      accumulate_stats(out.stats, rec, edits, tokens);
      out.records.push_back(rec);
    }
    out.stats.skipped_empty += p.stats.skipped_empty;
    out.stats.filtered_long += p.stats.filtered_long;
  }
  out.stats.records = out.records.size();
  finish_stats(out.stats, edits, tokens);
  return out;
}

}  // namespace hypo
