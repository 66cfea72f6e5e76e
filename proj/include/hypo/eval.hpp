#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace hypo {

struct EditCounts {
  std::int64_t sub = 0;
  std::int64_t del = 0;
  std::int64_t ins = 0;

  std::int64_t total() const { return sub + del + ins; }
  EditCounts& operator+=(const EditCounts& o) {
    sub += o.sub;
    del += o.del;
    ins += o.ins;
    return *this;
  }
  friend bool operator==(const EditCounts&, const EditCounts&) = default;
};

enum class EditKind : std::uint8_t { kMatch, kSub, kDel, kIns };

// One alignment column. hyp/ref are -1 where the side is empty.
struct EditOp {
  EditKind kind;
  int hyp;
  int ref;
};

// Unit-cost Levenshtein alignment of hyp against ref. Among minimum-cost
// alignments the one with the most substitutions is taken, which makes the
// counts unique and symmetric under swapping hyp and ref. The backtrace
// prefers substitution, then deletion, then insertion.
template <class T>
std::vector<EditOp> align(std::span<const T> hyp, std::span<const T> ref) {
  const std::size_t n = hyp.size(), m = ref.size();
  // cost * (n + m + 1) - substitutions orders by cost, then by more subs.
  const std::int64_t scale = static_cast<std::int64_t>(n + m + 1);
  std::vector<std::int64_t> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::int64_t& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = static_cast<std::int64_t>(i) * scale;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = static_cast<std::int64_t>(j) * scale;
  auto diag_cost = [&](std::size_t i, std::size_t j) {
    return at(i - 1, j - 1) + (hyp[i - 1] == ref[j - 1] ? 0 : scale - 1);
  };
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      at(i, j) = std::min({diag_cost(i, j), at(i, j - 1) + scale, at(i - 1, j) + scale});
    }
  }
  std::vector<EditOp> ops;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == diag_cost(i, j)) {
      const EditKind kind = hyp[i - 1] == ref[j - 1] ? EditKind::kMatch : EditKind::kSub;
      ops.push_back({kind, static_cast<int>(i - 1), static_cast<int>(j - 1)});
      --i, --j;
    } else if (j > 0 && at(i, j) == at(i, j - 1) + scale) {
      ops.push_back({EditKind::kDel, -1, static_cast<int>(j - 1)});
      --j;
    } else {
      ops.push_back({EditKind::kIns, static_cast<int>(i - 1), -1});
      --i;
    }
  }
  std::reverse(ops.begin(), ops.end());
  return ops;
}

template <class T>
EditCounts edit_counts(std::span<const T> hyp, std::span<const T> ref) {
  EditCounts c;
  for (const EditOp& op : align(hyp, ref)) {
    if (op.kind == EditKind::kSub) ++c.sub;
    if (op.kind == EditKind::kDel) ++c.del;
    if (op.kind == EditKind::kIns) ++c.ins;
  }
  return c;
}

using Words = std::vector<std::string>;

// Whitespace split with ASCII case folding.
Words normalize_words(std::string_view text);

struct WerResult {
  double rate = 0.0;
  EditCounts counts;
  std::size_t ref_words = 0;
  bool empty_reference = false;  // rate is then |hyp| / 1
};

WerResult wer(const Words& hyp, const Words& ref);
WerResult wer(std::string_view hyp, std::string_view ref);

// Minimum WER over the candidate list.
double oracle_wer(std::span<const Words> candidates, const Words& ref);

struct UtteranceResult {
  std::string id;
  std::string hyp;
  std::string ref;
  EditCounts counts;
  std::size_t ref_words = 0;
};

struct EvalReport {
  std::string system;
  double corpus_wer = 0.0;
  double oracle_wer = -1.0;  // negative when no candidate lists were given
  EditCounts totals;
  std::size_t ref_words = 0;
  std::vector<UtteranceResult> utterances;  // ordered by id

  nlohmann::json to_json() const;
};

using TextById = std::map<std::string, std::string>;
using CandidatesById = std::map<std::string, std::vector<std::string>>;

// Micro-averaged WER over id-aligned outputs. The optional candidate lists
// add a corpus oracle WER. Throws EvaluationError listing unmatched ids.
EvalReport evaluate_corpus(const TextById& outputs, const TextById& refs, std::string system,
                           const CandidatesById* candidates = nullptr);

struct WinLossEntry {
  std::string id;
  std::string ref;
  std::string hyp_a;
  std::string hyp_b;
  double wer_a = 0.0;
  double wer_b = 0.0;
  double delta = 0.0;  // wer_a - wer_b
  std::string diff;    // b against a with changed words bracketed
};

// Utterances where system b gains the most over system a, best first.
// Ties keep id order.
std::vector<WinLossEntry> win_loss_report(const TextById& a, const TextById& b, const TextById& refs,
                                          std::size_t k);
std::string format_win_loss(std::span<const WinLossEntry> entries, std::string_view label_a,
                            std::string_view label_b);
nlohmann::json win_loss_json(std::span<const WinLossEntry> entries);

}  // namespace hypo
