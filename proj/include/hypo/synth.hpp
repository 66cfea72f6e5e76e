#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace hypo {

// Deterministic synthetic text: topic-conditioned sentence templates over
// pseudo-words built from consonant-vowel syllables plus a few English
// function words. Stands in for a public-domain corpus.
struct SynthConfig {
  std::size_t lines = 50000;
  int topics = 12;
  int nouns_per_topic = 40;
  int verbs_per_topic = 20;
  int adjectives_per_topic = 15;
  int min_syllables = 2;
  int max_syllables = 3;
  double zipf_exponent = 0.9;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

std::vector<std::string> synthetic_corpus(const SynthConfig& cfg);

}  // namespace hypo
