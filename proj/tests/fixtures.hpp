#pragma once

// Random inputs shared by unit tests and the acceptance run.

#include <string>
#include <vector>

#include "hypo/rng.hpp"
#include "hypo/wordpiece.hpp"

namespace fixtures {

using hypo::Rng;
using hypo::utf8_chars;

inline std::vector<std::string> random_corpus(Rng& rng, int lines, const std::string& alphabet_utf8) {
  const auto alphabet = utf8_chars(alphabet_utf8);
  std::vector<std::string> out;
  for (int i = 0; i < lines; ++i) {
    std::string line;
    const int words = 1 + static_cast<int>(rng.uniform_int(8));
    for (int w = 0; w < words; ++w) {
      if (w) line += ' ';
      const int len = 1 + static_cast<int>(rng.uniform_int(6));
      for (int k = 0; k < len; ++k) line += alphabet[rng.uniform_int(alphabet.size())];
    }
    out.push_back(line);
  }
  return out;
}

}  // namespace fixtures
