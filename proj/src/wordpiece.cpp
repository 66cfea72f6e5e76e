#include "hypo/wordpiece.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <tuple>

#include "hypo/error.hpp"
#include "hypo/hash.hpp"
#include "hypo/io.hpp"

namespace hypo {
namespace {

constexpr const char* kSpecialStrings[kNumSpecials] = {"<pad>", "<s>", "</s>", "<unk>"};

std::uint64_t pair_key(TokenId left, TokenId right) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(left)) << 32) | static_cast<std::uint32_t>(right);
}

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;
}

// Merges every non-overlapping occurrence of (left, right), scanning left to right.
bool apply_merge(std::vector<TokenId>& syms, TokenId left, TokenId right, TokenId result) {
  bool changed = false;
  std::size_t w = 0;
  for (std::size_t r = 0; r < syms.size(); ++r) {
    if (r + 1 < syms.size() && syms[r] == left && syms[r + 1] == right) {
      syms[w++] = result;
      ++r;
      changed = true;
    } else {
      syms[w++] = syms[r];
    }
  }
  syms.resize(w);
  return changed;
}

}  // namespace

std::vector<std::string> utf8_chars(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t len = utf8_length(static_cast<unsigned char>(text[i]));
    if (i + len > text.size()) len = 1;
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) words.emplace_back(text.substr(start, i - start));
  }
  return words;
}

Vocabulary::Vocabulary(std::vector<std::string> alphabet, std::vector<Merge> merges,
                       std::vector<std::string> merged_tokens, std::size_t target_size)
    : merges_(std::move(merges)), alphabet_size_(alphabet.size()), target_size_(target_size) {
  tokens_.reserve(kNumSpecials + alphabet.size() + merged_tokens.size());
  for (const char* s : kSpecialStrings) tokens_.emplace_back(s);
  for (auto& a : alphabet) tokens_.push_back(std::move(a));
  for (auto& t : merged_tokens) tokens_.push_back(std::move(t));
  index();
}

void Vocabulary::index() {
  by_string_.clear();
  rank_.clear();
  for (std::size_t i = kNumSpecials; i < tokens_.size(); ++i) {
    by_string_.emplace(tokens_[i], static_cast<TokenId>(i));
  }
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    const Merge& m = merges_[r];
    const auto n = static_cast<TokenId>(tokens_.size());
    if (m.left < 0 || m.left >= n || m.right < 0 || m.right >= n || m.result < 0 || m.result >= n) {
      throw ConfigError("merge " + std::to_string(r) + " references an unknown token");
    }
    rank_.emplace(pair_key(m.left, m.right), static_cast<std::int64_t>(r));
  }
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw DecodeError("token id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

TokenId Vocabulary::lookup(std::string_view token) const {
  auto it = by_string_.find(std::string(token));
  return it == by_string_.end() ? kUnk : it->second;
}

std::int64_t Vocabulary::merge_rank(TokenId left, TokenId right) const {
  auto it = rank_.find(pair_key(left, right));
  return it == rank_.end() ? -1 : it->second;
}

std::string Vocabulary::serialize() const {
  json header;
  header["type"] = "header";
  header["format"] = "hypo-wordpiece";
  header["version"] = 1;
  header["size"] = tokens_.size();
  header["target_size"] = target_size_;
  header["specials"] = {{"pad", kPad}, {"bos", kBos}, {"eos", kEos}, {"unk", kUnk}};
  header["alphabet"] = std::vector<std::string>(tokens_.begin() + kNumSpecials,
                                                tokens_.begin() + kNumSpecials + static_cast<std::ptrdiff_t>(alphabet_size_));
  header["merges"] = merges_.size();
  std::string out = header.dump();
  out += '\n';
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    const Merge& m = merges_[r];
    json rec;
    rec["type"] = "merge";
    rec["rank"] = r;
    rec["left"] = m.left;
    rec["right"] = m.right;
    rec["id"] = m.result;
    rec["token"] = tokens_[static_cast<std::size_t>(m.result)];
    out += rec.dump();
    out += '\n';
  }
  return out;
}

Vocabulary Vocabulary::deserialize(std::string_view text) {
  std::vector<json> records;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    if (end > start) {
      try {
        records.push_back(json::parse(text.substr(start, end - start)));
      } catch (const json::parse_error& e) {
        throw ConfigError(std::string("malformed vocabulary record: ") + e.what());
      }
    }
    start = end + 1;
  }
  if (records.empty() || records[0].value("type", "") != "header") {
    throw ConfigError("vocabulary file has no header record");
  }
  const json& header = records[0];
  const auto& specials = header.at("specials");
  if (specials.at("pad") != kPad || specials.at("bos") != kBos || specials.at("eos") != kEos ||
      specials.at("unk") != kUnk) {
    throw ConfigError("vocabulary specials do not match the reserved ids");
  }
  auto alphabet = header.at("alphabet").get<std::vector<std::string>>();
  std::vector<Merge> merges;
  std::vector<std::string> merged;
  const std::size_t base = kNumSpecials + alphabet.size();
  for (std::size_t i = 1; i < records.size(); ++i) {
    const json& rec = records[i];
    if (rec.at("rank").get<std::size_t>() != i - 1) throw ConfigError("vocabulary merges out of order");
    Merge m{rec.at("left").get<TokenId>(), rec.at("right").get<TokenId>(), rec.at("id").get<TokenId>()};
    if (static_cast<std::size_t>(m.result) == base + merged.size()) {
      merged.push_back(rec.at("token").get<std::string>());
    } else if (static_cast<std::size_t>(m.result) > base + merged.size()) {
      throw ConfigError("vocabulary merge " + std::to_string(i - 1) + " skips token ids");
    }
    merges.push_back(m);
  }
  Vocabulary v(std::move(alphabet), std::move(merges), std::move(merged), header.at("target_size").get<std::size_t>());
  if (v.size() != header.at("size").get<std::size_t>()) throw ConfigError("vocabulary size does not match header");
  return v;
}

void Vocabulary::save(const std::string& path) const { write_file_atomic(path, serialize()); }

Vocabulary Vocabulary::load(const std::string& path) { return deserialize(read_file(path)); }

std::string Vocabulary::fingerprint() const { return hash_string(serialize()); }

Vocabulary train_bpe(std::span<const std::string> corpus, std::size_t target_size) {
  std::map<std::string, std::int64_t> word_counts;
  for (const auto& line : corpus) {
    for (auto& w : split_words(line)) ++word_counts[w];
  }
  if (word_counts.empty()) throw ConfigError("train_bpe: corpus is empty");

  std::set<std::string> chars;
  for (const auto& [w, c] : word_counts) {
    for (auto& ch : utf8_chars(w)) chars.insert(std::move(ch));
  }
  std::vector<std::string> alphabet;
  alphabet.emplace_back(kWordBoundary);
  for (const auto& ch : chars) {
    if (ch != kWordBoundary) alphabet.push_back(ch);
  }
  const std::size_t minimum = kNumSpecials + alphabet.size();
  if (target_size < minimum) {
    throw ConfigError("train_bpe: target_size " + std::to_string(target_size) + " is below the minimum of " +
                      std::to_string(minimum) + " (specials + base alphabet)");
  }

  std::vector<std::string> tokens;
  for (const char* s : kSpecialStrings) tokens.emplace_back(s);
  std::unordered_map<std::string, TokenId> by_string;
  for (const auto& a : alphabet) {
    by_string.emplace(a, static_cast<TokenId>(tokens.size()));
    tokens.push_back(a);
  }

  struct WordEntry {
    std::vector<TokenId> syms;
    std::int64_t count;
  };
  std::vector<WordEntry> words;
  words.reserve(word_counts.size());
  for (const auto& [w, c] : word_counts) {
    WordEntry e{{by_string.at(std::string(kWordBoundary))}, c};
    for (const auto& ch : utf8_chars(w)) e.syms.push_back(by_string.at(ch));
    words.push_back(std::move(e));
  }

  // Pair statistics with a priority order of (-count, left, right).
  std::unordered_map<std::uint64_t, std::int64_t> counts;
  std::unordered_map<std::uint64_t, std::set<std::size_t>> where;
  std::set<std::tuple<std::int64_t, TokenId, TokenId>> queue;
  auto adjust = [&](TokenId l, TokenId r, std::int64_t delta) {
    const auto key = pair_key(l, r);
    std::int64_t& c = counts[key];
    if (c > 0) queue.erase({-c, l, r});
    c += delta;
    if (c > 0) queue.insert({-c, l, r});
  };
  auto add_word = [&](std::size_t wi, std::int64_t sign) {
    const auto& e = words[wi];
    for (std::size_t k = 0; k + 1 < e.syms.size(); ++k) {
      adjust(e.syms[k], e.syms[k + 1], sign * e.count);
      if (sign > 0) where[pair_key(e.syms[k], e.syms[k + 1])].insert(wi);
    }
  };
  for (std::size_t wi = 0; wi < words.size(); ++wi) add_word(wi, +1);

  std::vector<Merge> merges;
  while (tokens.size() < target_size && !queue.empty()) {
    const auto [negc, left, right] = *queue.begin();
    const std::string merged = tokens[static_cast<std::size_t>(left)] + tokens[static_cast<std::size_t>(right)];
    TokenId result;
    if (auto it = by_string.find(merged); it != by_string.end()) {
      result = it->second;
    } else {
      result = static_cast<TokenId>(tokens.size());
      tokens.push_back(merged);
      by_string.emplace(merged, result);
    }
    merges.push_back({left, right, result});
    const auto key = pair_key(left, right);
    const std::set<std::size_t> affected = std::move(where[key]);
    where.erase(key);
    for (std::size_t wi : affected) {
      auto probe = words[wi].syms;
      if (!apply_merge(probe, left, right, result)) continue;
      add_word(wi, -1);
      words[wi].syms = std::move(probe);
      add_word(wi, +1);
    }
    // Pair fully consumed now.
    if (auto it = counts.find(key); it != counts.end() && it->second > 0) {
      queue.erase({-it->second, left, right});
      it->second = 0;
    }
  }

  std::vector<std::string> merged_tokens(tokens.begin() + static_cast<std::ptrdiff_t>(minimum), tokens.end());
  return Vocabulary(std::move(alphabet), std::move(merges), std::move(merged_tokens), target_size);
}

TokenSeq encode(const Vocabulary& vocab, std::string_view text) {
  TokenSeq out;
  const TokenId boundary = vocab.lookup(kWordBoundary);
  std::vector<TokenId> syms;
  for (const auto& word : split_words(text)) {
    syms.clear();
    syms.push_back(boundary);
    for (const auto& ch : utf8_chars(word)) syms.push_back(vocab.lookup(ch));
    for (;;) {
      std::int64_t best = -1;
      for (std::size_t k = 0; k + 1 < syms.size(); ++k) {
        if (syms[k] == kUnk || syms[k + 1] == kUnk) continue;
        const auto r = vocab.merge_rank(syms[k], syms[k + 1]);
        if (r >= 0 && (best < 0 || r < best)) best = r;
      }
      if (best < 0) break;
      const Merge& m = vocab.merges()[static_cast<std::size_t>(best)];
      apply_merge(syms, m.left, m.right, m.result);
    }
    out.insert(out.end(), syms.begin(), syms.end());
  }
  return out;
}

std::string decode(const Vocabulary& vocab, std::span<const TokenId> ids) {
  std::string joined;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const TokenId id = ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size()) {
      throw DecodeError("decode: id " + std::to_string(id) + " at index " + std::to_string(i) + " is out of range");
    }
    if (vocab.is_special(id)) continue;
    joined += vocab.token(id);
  }
  std::string out;
  out.reserve(joined.size());
  std::size_t i = 0;
  while (i < joined.size()) {
    if (joined.compare(i, kWordBoundary.size(), kWordBoundary) == 0) {
      if (!out.empty() && out.back() != ' ') out += ' ';
      i += kWordBoundary.size();
    } else {
      out += joined[i++];
    }
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

}  // namespace hypo
