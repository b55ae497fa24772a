#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "evcmf/error.hpp"

namespace evcmf {

inline constexpr int kPadId = 0;
inline constexpr int kClsId = 1;
inline constexpr int kSepId = 2;
inline constexpr int kMaskId = 3;
inline constexpr int kEosId = 4;
inline constexpr int kUnkId = 5;
inline constexpr int kReservedCount = 6;

inline bool is_special(int id) { return id >= 0 && id < kReservedCount; }

/// Lowercases, replaces punctuation with spaces and splits on whitespace.
inline std::vector<std::string> tokenize(const std::string& text) {
  std::string clean;
  clean.reserve(text.size());
  for (unsigned char ch : text) {
    if (std::ispunct(ch)) {
      clean.push_back(' ');
    } else {
      clean.push_back(static_cast<char>(std::tolower(ch)));
    }
  }
  std::vector<std::string> out;
  std::istringstream is(clean);
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

/// Token <-> id bijection with fixed reserved ids 0..5.
class Vocabulary {
 public:
  Vocabulary() : tokens_{"[PAD]", "[CLS]", "[SEP]", "[MASK]", "[EOS]", "[UNK]"} { reindex(); }

  /// Rebuilds a vocabulary from its id-ordered token list.
  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    Vocabulary v;
    if (tokens.size() < static_cast<std::size_t>(kReservedCount) ||
        !std::equal(v.tokens_.begin(), v.tokens_.end(), tokens.begin())) {
      throw FormatError("vocabulary must begin with the six reserved tokens");
    }
    v.tokens_ = tokens;
    v.reindex();
    if (v.ids_.size() != v.tokens_.size()) throw FormatError("vocabulary has duplicate tokens");
    return v;
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  int id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnkId : it->second;
  }
  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw InputError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(size()));
    }
    return tokens_[id];
  }

  /// Word ids of a sentence, without framing tokens.
  std::vector<int> encode(const std::string& sentence) const {
    std::vector<int> ids;
    for (const auto& w : tokenize(sentence)) ids.push_back(id(w));
    return ids;
  }

  /// [CLS] w1 .. wn [EOS]
  std::vector<int> encode_caption(const std::string& sentence) const {
    std::vector<int> ids{kClsId};
    for (int w : encode(sentence)) ids.push_back(w);
    ids.push_back(kEosId);
    return ids;
  }

  /// Joins non-special tokens with single spaces.
  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (is_special(id)) continue;
      if (!out.empty()) out.push_back(' ');
      out += token(id);
    }
    return out;
  }

 private:
  void reindex() {
    ids_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) ids_.emplace(tokens_[i], static_cast<int>(i));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

/// Reserved tokens first, then words by descending frequency, ties broken
/// lexicographically.
inline Vocabulary build_vocab(const std::vector<std::string>& captions) {
  if (captions.empty()) throw InputError("build_vocab: empty caption corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& c : captions)
    for (const auto& w : tokenize(c)) ++counts[w];
  std::vector<std::pair<std::string, std::size_t>> words(counts.begin(), counts.end());
  std::stable_sort(words.begin(), words.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary base;
  std::vector<std::string> tokens = base.tokens();
  for (const auto& [w, n] : words) {
    if (base.id(w) == kUnkId && w != "[UNK]") tokens.push_back(w);
  }
  return Vocabulary::from_tokens(tokens);
}

}  // namespace evcmf
