#pragma once

// Independent reference implementations used only by tests.

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "hypo/wordpiece.hpp"

namespace oracle {

struct BpeMerge {
  int left;
  int right;
  int result;
};

// Greedy BPE by full recount after every merge.
inline std::vector<BpeMerge> greedy_bpe(const std::vector<std::string>& corpus, std::size_t target_size) {
  std::map<std::string, long long> counts;
  for (const auto& line : corpus) {
    std::string word;
    for (std::size_t i = 0; i <= line.size(); ++i) {
      const bool sep = i == line.size() || line[i] == ' ' || line[i] == '\t';
      if (sep) {
        if (!word.empty()) ++counts[word];
        word.clear();
      } else {
        word += line[i];
      }
    }
  }
  std::set<std::string> chars;
  for (const auto& [w, c] : counts) {
    for (const auto& ch : hypo::utf8_chars(w)) chars.insert(ch);
  }
  std::vector<std::string> tokens = {"<pad>", "<s>", "</s>", "<unk>", std::string(hypo::kWordBoundary)};
  for (const auto& ch : chars) tokens.push_back(ch);
  auto id_of = [&](const std::string& s) {
    for (std::size_t i = 4; i < tokens.size(); ++i) {
      if (tokens[i] == s) return static_cast<int>(i);
    }
    return -1;
  };
  std::vector<std::pair<std::vector<int>, long long>> words;
  for (const auto& [w, c] : counts) {
    std::vector<int> syms = {4};
    for (const auto& ch : hypo::utf8_chars(w)) syms.push_back(id_of(ch));
    words.emplace_back(syms, c);
  }
  std::vector<BpeMerge> merges;
  while (tokens.size() < target_size) {
    std::map<std::pair<int, int>, long long> pairs;
    for (const auto& [syms, c] : words) {
      for (std::size_t k = 0; k + 1 < syms.size(); ++k) pairs[{syms[k], syms[k + 1]}] += c;
    }
    if (pairs.empty()) break;
    std::pair<int, int> best{-1, -1};
    long long best_count = 0;
    for (const auto& [p, c] : pairs) {
      if (c > best_count) {
        best = p;
        best_count = c;
      }
    }
    const std::string merged = tokens[static_cast<std::size_t>(best.first)] + tokens[static_cast<std::size_t>(best.second)];
    int result = id_of(merged);
    if (result < 0) {
      result = static_cast<int>(tokens.size());
      tokens.push_back(merged);
    }
    merges.push_back({best.first, best.second, result});
    for (auto& [syms, c] : words) {
      std::vector<int> out;
      for (std::size_t k = 0; k < syms.size(); ++k) {
        if (k + 1 < syms.size() && syms[k] == best.first && syms[k + 1] == best.second) {
          out.push_back(result);
          ++k;
        } else {
          out.push_back(syms[k]);
        }
      }
      syms = std::move(out);
    }
  }
  return merges;
}

// Word edit counts by a forward DP over (cost, S, D, I) tuples, minimizing
// cost and then maximizing substitutions.
struct Edits {
  long long cost = 0, sub = 0, del = 0, ins = 0;
};

inline Edits word_edits(const std::vector<std::string>& hyp, const std::vector<std::string>& ref) {
  auto better = [](const Edits& x, const Edits& y) { return x.cost != y.cost ? x.cost < y.cost : x.sub > y.sub; };
  std::vector<std::vector<Edits>> d(hyp.size() + 1, std::vector<Edits>(ref.size() + 1));
  for (std::size_t i = 1; i <= hyp.size(); ++i) d[i][0] = {static_cast<long long>(i), 0, 0, static_cast<long long>(i)};
  for (std::size_t j = 1; j <= ref.size(); ++j) d[0][j] = {static_cast<long long>(j), 0, static_cast<long long>(j), 0};
  for (std::size_t i = 1; i <= hyp.size(); ++i) {
    for (std::size_t j = 1; j <= ref.size(); ++j) {
      Edits diag = d[i - 1][j - 1];
      if (hyp[i - 1] != ref[j - 1]) {
        ++diag.cost;
        ++diag.sub;
      }
      Edits del = d[i][j - 1];
      ++del.cost;
      ++del.del;
      Edits ins = d[i - 1][j];
      ++ins.cost;
      ++ins.ins;
      Edits best = diag;
      if (better(del, best)) best = del;
      if (better(ins, best)) best = ins;
      d[i][j] = best;
    }
  }
  return d[hyp.size()][ref.size()];
}

}  // namespace oracle
