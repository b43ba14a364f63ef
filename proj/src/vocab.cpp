#include "scorer/vocab.hpp"

#include <fstream>
#include <stdexcept>

namespace scorer {

namespace {
const std::string kReservedNames[kReservedTokens] = {"<pad>", "<bos>", "<eos>",
                                                     "<unk>"};
}

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  for (size_t i = 0; i < words_.size(); ++i) {
    const auto id = static_cast<TokenId>(i + kReservedTokens);
    if (words_[i].empty() || !index_.emplace(words_[i], id).second) {
      throw std::invalid_argument("vocabulary word '" + words_[i] +
                                  "' is empty or duplicated");
    }
  }
}

TokenId Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::word(TokenId id) const {
  if (id < 0 || static_cast<size_t>(id) >= size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  }
  if (static_cast<size_t>(id) < kReservedTokens) return kReservedNames[id];
  return words_[static_cast<size_t>(id) - kReservedTokens];
}

CaptionSeq Vocabulary::encode(std::span<const std::string> words) const {
  CaptionSeq seq{kBos};
  for (const auto& w : words) seq.push_back(id(w));
  seq.push_back(kEos);
  return seq;
}

std::vector<std::string> Vocabulary::decode(const CaptionSeq& seq) const {
  std::vector<std::string> out;
  for (size_t i = 0; i < seq.size(); ++i) {
    if (i == 0 && seq[i] == kBos) continue;
    if (seq[i] == kEos || seq[i] == kPad) break;
    out.push_back(word(seq[i]));
  }
  return out;
}

std::string Vocabulary::to_text(const CaptionSeq& seq) const {
  std::string s;
  for (const auto& w : decode(seq)) {
    if (!s.empty()) s += ' ';
    s += w;
  }
  return s;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write vocabulary " + path.string());
  for (const auto& w : words_) out << w << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read vocabulary " + path.string());
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) words.push_back(line);
  }
  return Vocabulary(std::move(words));
}

void validate_caption(const CaptionSeq& seq, size_t max_len, size_t vocab_size) {
  if (seq.size() < 2 || seq.size() > max_len) {
    throw std::invalid_argument("caption length " + std::to_string(seq.size()) +
                                " outside [2, " + std::to_string(max_len) + "]");
  }
  if (seq.front() != kBos || seq.back() != kEos) {
    throw std::invalid_argument("caption must start with BOS and end with EOS");
  }
  for (size_t i = 1; i + 1 < seq.size(); ++i) {
    if (seq[i] == kPad || seq[i] == kBos || seq[i] == kEos) {
      throw std::invalid_argument("reserved id inside caption at position " +
                                  std::to_string(i));
    }
    if (seq[i] < 0 || static_cast<size_t>(seq[i]) >= vocab_size) {
      throw std::invalid_argument("caption id " + std::to_string(seq[i]) +
                                  " outside vocabulary");
    }
  }
}

}  // namespace scorer
