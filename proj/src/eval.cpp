#include "hypo/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>

#include "hypo/error.hpp"
#include "hypo/io.hpp"
#include "hypo/wordpiece.hpp"

namespace hypo {

Words normalize_words(std::string_view text) {
  Words words = split_words(text);
  for (auto& w : words) {
    for (char& ch : w) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  }
  return words;
}

WerResult wer(const Words& hyp, const Words& ref) {
  WerResult r;
  r.counts = edit_counts<std::string>(hyp, ref);
  r.ref_words = ref.size();
  if (ref.empty()) {
    r.empty_reference = true;
    r.rate = static_cast<double>(hyp.size());
  } else {
    r.rate = static_cast<double>(r.counts.total()) / static_cast<double>(ref.size());
  }
  return r;
}

WerResult wer(std::string_view hyp, std::string_view ref) { return wer(normalize_words(hyp), normalize_words(ref)); }

double oracle_wer(std::span<const Words> candidates, const Words& ref) {
  if (candidates.empty()) throw EvaluationError("oracle_wer: empty candidate list");
  double best = wer(candidates[0], ref).rate;
  for (std::size_t i = 1; i < candidates.size(); ++i) best = std::min(best, wer(candidates[i], ref).rate);
  return best;
}

namespace {

json counts_json(const EditCounts& c) { return {{"sub", c.sub}, {"del", c.del}, {"ins", c.ins}}; }

void require_aligned(const TextById& a, const TextById& refs, const char* what) {
  std::vector<std::string> missing, extra;
  for (const auto& [id, _] : refs) {
    if (!a.count(id)) missing.push_back(id);
  }
  for (const auto& [id, _] : a) {
    if (!refs.count(id)) extra.push_back(id);
  }
  if (missing.empty() && extra.empty()) return;
  std::string msg = std::string(what) + ": id mismatch";
  auto list = [&](const char* label, const std::vector<std::string>& ids) {
    if (ids.empty()) return;
    msg += std::string("; ") + label + ":";
    for (std::size_t i = 0; i < ids.size() && i < 20; ++i) msg += " " + ids[i];
    if (ids.size() > 20) msg += " ... (" + std::to_string(ids.size()) + " total)";
  };
  list("missing outputs", missing);
  list("unknown ids", extra);
  throw EvaluationError(msg);
}

}  // namespace

json EvalReport::to_json() const {
  json utts = json::array();
  for (const auto& u : utterances) {
    utts.push_back({{"id", u.id}, {"hyp", u.hyp}, {"ref", u.ref}, {"ref_words", u.ref_words},
                    {"errors", counts_json(u.counts)}});
  }
  json j = {{"system", system},       {"corpus_wer", corpus_wer}, {"errors", counts_json(totals)},
            {"ref_words", ref_words}, {"utterances", utts}};
  if (oracle_wer >= 0.0) j["oracle_wer"] = oracle_wer;
  return j;
}

EvalReport evaluate_corpus(const TextById& outputs, const TextById& refs, std::string system,
                           const CandidatesById* candidates) {
  require_aligned(outputs, refs, "evaluate_corpus");
  EvalReport rep;
  rep.system = std::move(system);
  std::int64_t oracle_errors = 0;
  for (const auto& [id, ref_text] : refs) {
    const Words ref = normalize_words(ref_text);
    const std::string& hyp_text = outputs.at(id);
    const WerResult w = wer(normalize_words(hyp_text), ref);
    rep.totals += w.counts;
    rep.ref_words += ref.size();
    rep.utterances.push_back({id, hyp_text, ref_text, w.counts, ref.size()});
    if (candidates) {
      auto it = candidates->find(id);
      if (it == candidates->end() || it->second.empty()) {
        throw EvaluationError("evaluate_corpus: no candidate list for id " + id);
      }
      std::int64_t best = -1;
      for (const auto& c : it->second) {
        const std::int64_t e = wer(normalize_words(c), ref).counts.total();
        if (best < 0 || e < best) best = e;
      }
      oracle_errors += best;
    }
  }
  const double denom = static_cast<double>(std::max<std::size_t>(rep.ref_words, 1));
  rep.corpus_wer = static_cast<double>(rep.totals.total()) / denom;
  if (candidates) rep.oracle_wer = static_cast<double>(oracle_errors) / denom;
  return rep;
}

namespace {

std::string bracket_diff(const Words& a, const Words& b) {
  std::string out;
  auto emit = [&](const std::string& s) {
    if (!out.empty()) out += ' ';
    out += s;
  };
  for (const EditOp& op : align<std::string>(b, a)) {
    switch (op.kind) {
      case EditKind::kMatch: emit(b[static_cast<std::size_t>(op.hyp)]); break;
      case EditKind::kSub:
        emit("[" + a[static_cast<std::size_t>(op.ref)] + "->" + b[static_cast<std::size_t>(op.hyp)] + "]");
        break;
      case EditKind::kDel: emit("[-" + a[static_cast<std::size_t>(op.ref)] + "]"); break;
      case EditKind::kIns: emit("[+" + b[static_cast<std::size_t>(op.hyp)] + "]"); break;
    }
  }
  return out;
}

}  // namespace

std::vector<WinLossEntry> win_loss_report(const TextById& a, const TextById& b, const TextById& refs,
                                          std::size_t k) {
  require_aligned(a, refs, "win_loss_report (system a)");
  require_aligned(b, refs, "win_loss_report (system b)");
  std::vector<WinLossEntry> all;
  for (const auto& [id, ref] : refs) {
    WinLossEntry e;
    e.id = id;
    e.ref = ref;
    e.hyp_a = a.at(id);
    e.hyp_b = b.at(id);
    e.wer_a = wer(e.hyp_a, ref).rate;
    e.wer_b = wer(e.hyp_b, ref).rate;
    e.delta = e.wer_a - e.wer_b;
    e.diff = bracket_diff(normalize_words(e.hyp_a), normalize_words(e.hyp_b));
    all.push_back(std::move(e));
  }
  std::stable_sort(all.begin(), all.end(), [](const WinLossEntry& x, const WinLossEntry& y) { return x.delta > y.delta; });
  if (all.size() > k) all.resize(k);
  return all;
}

std::string format_win_loss(std::span<const WinLossEntry> entries, std::string_view label_a,
                            std::string_view label_b) {
  std::string out;
  char buf[128];
  for (const auto& e : entries) {
    std::snprintf(buf, sizeof buf, "%s  delta %+.4f  (%.4f -> %.4f)\n", e.id.c_str(), e.delta, e.wer_a, e.wer_b);
    out += buf;
    out += "  ref : " + e.ref + "\n";
    out += "  " + std::string(label_a) + " : " + e.hyp_a + "\n";
    out += "  " + std::string(label_b) + " : " + e.hyp_b + "\n";
    out += "  diff: " + e.diff + "\n\n";
  }
  return out;
}

json win_loss_json(std::span<const WinLossEntry> entries) {
  json arr = json::array();
  for (const auto& e : entries) {
    arr.push_back({{"id", e.id},
                   {"ref", e.ref},
                   {"hyp_a", e.hyp_a},
                   {"hyp_b", e.hyp_b},
                   {"wer_a", e.wer_a},
                   {"wer_b", e.wer_b},
                   {"delta", e.delta},
                   {"diff", e.diff}});
  }
  return arr;
}

}  // namespace hypo
