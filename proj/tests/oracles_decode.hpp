#pragma once

// Exhaustive decoding oracle for toy correctors.

#include <algorithm>
#include <span>
#include <vector>

#include "hypo/corrector.hpp"

namespace oracle {

using namespace hypo;

struct Scored {
  TokenSeq tokens;
  double score;
  bool finished;
};

// Every outcome of a decoder limited to `steps` steps, scored by teacher
// forcing one token at a time.
inline std::vector<Scored> enumerate_outcomes(const Corrector& m, const TokenSeq& source, int steps) {
  const EncodedSource enc = m.encode_sequence(frame_source(source));
  const int V = m.config().vocab_size;
  std::vector<Scored> out;
  std::vector<TokenSeq> prefixes{{}};
  for (int len = 0; len <= steps; ++len) {
    std::vector<TokenSeq> longer;
    for (const auto& p : prefixes) {
      DecoderState st = m.initial_state(1);
      TokenId prev = kBos;
      double s = 0.0;
      Matrix lp;
      for (std::size_t t = 0; t <= p.size() && static_cast<int>(t) < steps; ++t) {
        StepOutput o = m.decode_step(std::span(&prev, 1), st, enc);
        st = o.state;
        lp = o.log_probs;
        if (t < p.size()) {
          s += lp(0, p[t]);
          prev = p[t];
        }
      }
      if (len == steps) {
        out.push_back({p, s, false});
        continue;
      }
      out.push_back({p, s + lp(0, kEos), true});
      for (TokenId v = 0; v < V; ++v) {
        if (v == kPad || v == kBos || v == kEos) continue;
        longer.push_back(p);
        longer.back().push_back(v);
      }
    }
    prefixes = std::move(longer);
  }
  std::sort(out.begin(), out.end(), [](const Scored& a, const Scored& b) {
    return a.score != b.score ? a.score > b.score : a.tokens < b.tokens;
  });
  return out;
}

}  // namespace oracle
