#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace scorer {

using TokenId = int64_t;
/// Token ids beginning with BOS and (normally) ending with EOS.
using CaptionSeq = std::vector<TokenId>;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr size_t kReservedTokens = 4;

/// Word <-> id mapping with fixed reserved ids PAD=0, BOS=1, EOS=2, UNK=3.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> words);

  size_t size() const { return kReservedTokens + words_.size(); }
  TokenId id(const std::string& word) const;  // UNK when absent
  const std::string& word(TokenId id) const;
  bool contains(const std::string& word) const { return index_.contains(word); }
  const std::vector<std::string>& words() const { return words_; }

  /// [BOS, ids..., EOS]
  CaptionSeq encode(std::span<const std::string> words) const;
  /// Words strictly between BOS and the first EOS/PAD.
  std::vector<std::string> decode(const CaptionSeq& seq) const;
  std::string to_text(const CaptionSeq& seq) const;

  /// One word per line; line k holds id k + kReservedTokens.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Throws std::invalid_argument unless seq is BOS ... EOS, within max_len,
/// without PAD before EOS, and every id < vocab_size.
void validate_caption(const CaptionSeq& seq, size_t max_len, size_t vocab_size);

}  // namespace scorer
