#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace hypo {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

// Reserved ids. Learned tokens start at kNumSpecials.
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kNumSpecials = 4;

inline constexpr std::size_t kFullScaleVocabSize = 16000;
inline constexpr std::size_t kDeskVocabSize = 512;

// Prefix marking the first piece of every word (U+2581).
inline constexpr std::string_view kWordBoundary = "\xE2\x96\x81";

struct Merge {
  TokenId left;
  TokenId right;
  TokenId result;

  friend bool operator==(const Merge&, const Merge&) = default;
};

// Wordpiece inventory: specials, the base alphabet (boundary marker plus
// characters in code-point order) and the tokens produced by merges.
class Vocabulary {
 public:
  Vocabulary() = default;
  Vocabulary(std::vector<std::string> alphabet, std::vector<Merge> merges, std::vector<std::string> merged_tokens,
             std::size_t target_size);

  std::size_t size() const { return tokens_.size(); }
  std::size_t target_size() const { return target_size_; }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::vector<Merge>& merges() const { return merges_; }
  std::size_t alphabet_size() const { return alphabet_size_; }

  const std::string& token(TokenId id) const;
  TokenId lookup(std::string_view token) const;  // kUnk if absent
  bool is_special(TokenId id) const { return id >= 0 && id < kNumSpecials; }

  // Merge rank of (left, right) or -1.
  std::int64_t merge_rank(TokenId left, TokenId right) const;
  TokenId merge_result(std::int64_t rank) const { return merges_[static_cast<std::size_t>(rank)].result; }

  // JSON-lines form: header record followed by one record per merge.
  std::string serialize() const;
  static Vocabulary deserialize(std::string_view text);
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

  // Digest of serialize(); identifies the vocabulary in model manifests.
  std::string fingerprint() const;

 private:
  void index();

  std::vector<std::string> tokens_;
  std::vector<Merge> merges_;
  std::size_t alphabet_size_ = 0;
  std::size_t target_size_ = 0;
  std::unordered_map<std::string, TokenId> by_string_;
  std::unordered_map<std::uint64_t, std::int64_t> rank_;
};

// Splits a UTF-8 string into code points (as byte strings). Invalid lead
// bytes are kept as single-byte symbols.
std::vector<std::string> utf8_chars(std::string_view text);

// Whitespace tokenization shared by training, encoding and WER scoring.
std::vector<std::string> split_words(std::string_view text);

// Learns merges greedily by pair frequency. Ties go to the lowest
// (left id, right id). Stops at `target_size` tokens or when no pair is left.
Vocabulary train_bpe(std::span<const std::string> corpus, std::size_t target_size);

TokenSeq encode(const Vocabulary& vocab, std::string_view text);

// Concatenates token strings and restores spaces at boundary markers.
// Specials are dropped. Throws DecodeError on out-of-range ids.
std::string decode(const Vocabulary& vocab, std::span<const TokenId> ids);

}  // namespace hypo
