#include "hypo/synth.hpp"

#include <cmath>
#include <set>

#include "hypo/error.hpp"
#include "hypo/rng.hpp"

namespace hypo {

void SynthConfig::validate() const {
  if (topics < 1 || nouns_per_topic < 1 || verbs_per_topic < 1 || adjectives_per_topic < 1) {
    throw ConfigError("synthetic corpus word-class sizes must be positive");
  }
  if (min_syllables < 1 || max_syllables < min_syllables) throw ConfigError("invalid syllable range");
  if (!(zipf_exponent >= 0.0)) throw ConfigError("zipf_exponent must be >= 0");
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"lines", c.lines},
       {"topics", c.topics},
       {"nouns_per_topic", c.nouns_per_topic},
       {"verbs_per_topic", c.verbs_per_topic},
       {"adjectives_per_topic", c.adjectives_per_topic},
       {"min_syllables", c.min_syllables},
       {"max_syllables", c.max_syllables},
       {"zipf_exponent", c.zipf_exponent},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
  SynthConfig d;
  c.lines = j.value("lines", d.lines);
  c.topics = j.value("topics", d.topics);
  c.nouns_per_topic = j.value("nouns_per_topic", d.nouns_per_topic);
  c.verbs_per_topic = j.value("verbs_per_topic", d.verbs_per_topic);
  c.adjectives_per_topic = j.value("adjectives_per_topic", d.adjectives_per_topic);
  c.min_syllables = j.value("min_syllables", d.min_syllables);
  c.max_syllables = j.value("max_syllables", d.max_syllables);
  c.zipf_exponent = j.value("zipf_exponent", d.zipf_exponent);
  c.seed = j.value("seed", d.seed);
}

namespace {

constexpr const char* kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"};
constexpr const char* kVowels[] = {"a", "e", "i", "o", "u"};

// Cumulative Zipf weights over n ranks.
std::vector<double> zipf(int n, double s) {
  std::vector<double> c(static_cast<std::size_t>(n));
  double acc = 0.0;
  for (int r = 0; r < n; ++r) {
    acc += 1.0 / std::pow(r + 1.0, s);
    c[static_cast<std::size_t>(r)] = acc;
  }
  return c;
}

std::size_t draw(const std::vector<double>& cumulative, Rng& rng) {
  const double u = rng.uniform() * cumulative.back();
  std::size_t i = 0;
  while (i + 1 < cumulative.size() && cumulative[i] <= u) ++i;
  return i;
}

struct Topic {
  std::vector<std::string> nouns, verbs, adjectives;
};

// Slot codes: N noun, V verb, A adjective; anything else is literal.
const std::vector<std::vector<std::string>> kTemplates = {
    {"the", "A", "N", "V", "the", "N"},
    {"a", "N", "V", "in", "the", "N"},
    {"the", "N", "of", "the", "N", "V"},
    {"the", "A", "N", "and", "the", "A", "N", "V"},
    {"N", "V", "with", "the", "A", "N"},
    {"the", "N", "V", "the", "N", "from", "the", "N"},
    {"a", "A", "N", "is", "A"},
    {"the", "N", "was", "V", "by", "the", "A", "N"},
    {"every", "N", "V", "a", "N", "on", "the", "N"},
    {"the", "N", "V", "and", "the", "N", "V", "to", "the", "N"},
};

}  // namespace

std::vector<std::string> synthetic_corpus(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  std::set<std::string> used = {"the", "a", "of", "in", "and", "with", "from", "is", "was", "by", "every", "on", "to"};
  auto make_word = [&] {
    for (;;) {
      const int n = cfg.min_syllables + static_cast<int>(rng.uniform_int(
                                            static_cast<std::uint64_t>(cfg.max_syllables - cfg.min_syllables + 1)));
      std::string w;
      for (int k = 0; k < n; ++k) {
        w += kOnsets[rng.uniform_int(std::size(kOnsets))];
        w += kVowels[rng.uniform_int(std::size(kVowels))];
      }
      if (used.insert(w).second) return w;
    }
  };
  std::vector<Topic> topics(static_cast<std::size_t>(cfg.topics));
  for (auto& t : topics) {
    for (int i = 0; i < cfg.nouns_per_topic; ++i) t.nouns.push_back(make_word());
    for (int i = 0; i < cfg.verbs_per_topic; ++i) t.verbs.push_back(make_word());
    for (int i = 0; i < cfg.adjectives_per_topic; ++i) t.adjectives.push_back(make_word());
  }
  const auto zn = zipf(cfg.nouns_per_topic, cfg.zipf_exponent);
  const auto zv = zipf(cfg.verbs_per_topic, cfg.zipf_exponent);
  const auto za = zipf(cfg.adjectives_per_topic, cfg.zipf_exponent);

  std::vector<std::string> lines;
  lines.reserve(cfg.lines);
  for (std::size_t i = 0; i < cfg.lines; ++i) {
    const Topic& t = topics[rng.uniform_int(topics.size())];
    const auto& tpl = kTemplates[rng.uniform_int(kTemplates.size())];
    std::string line;
    for (const auto& slot : tpl) {
      if (!line.empty()) line += ' ';
      if (slot == "N") {
        line += t.nouns[draw(zn, rng)];
      } else if (slot == "V") {
        line += t.verbs[draw(zv, rng)];
      } else if (slot == "A") {
        line += t.adjectives[draw(za, rng)];
      } else {
        line += slot;
      }
    }
    lines.push_back(std::move(line));
  }
  return lines;
}

}  // namespace hypo
