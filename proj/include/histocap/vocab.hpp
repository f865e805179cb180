#pragma once

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "histocap/error.hpp"

namespace histocap {

using TokenId = std::size_t;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kStartId = 1;
inline constexpr TokenId kEndId = 2;
inline constexpr TokenId kUnkId = 3;
inline constexpr std::size_t kNumSpecials = 4;

inline bool is_split_punct(char c) { return c == '.' || c == ',' || c == ':' || c == ';'; }

// Lowercase, split on whitespace, and emit each of . , : ; as its own token.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) tokens.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (is_split_punct(ch)) {
      flush();
      tokens.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return tokens;
}

// Inverse of tokenize for normalized text: tokens joined by single spaces,
// punctuation attached to the preceding word.
inline std::string detokenize(const std::vector<std::string>& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    const bool punct = t.size() == 1 && is_split_punct(t[0]);
    if (!out.empty() && !punct) out.push_back(' ');
    out += t;
  }
  return out;
}

// <start> id ... <end>; never contains <pad>.
struct EncodedCaption {
  std::vector<TokenId> ids;

  std::size_t length() const { return ids.size(); }
};

class Vocabulary {
 public:
  Vocabulary() : tokens_{"<pad>", "<start>", "<end>", "<unk>"} { reindex(); }

  // Tokens with frequency >= min_count, ordered by frequency desc then
  // lexicographically.
  static Vocabulary build(const std::vector<std::string>& corpus, std::size_t min_count = 1) {
    if (corpus.empty()) throw ValueError("cannot build a vocabulary from an empty corpus");
    std::map<std::string, std::size_t> counts;
    for (const auto& caption : corpus)
      for (auto& t : tokenize(caption)) ++counts[t];
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocabulary v;
    for (const auto& [tok, n] : ranked) {
      if (n >= min_count && !v.index_.contains(tok)) v.tokens_.push_back(tok);
    }
    v.reindex();
    return v;
  }

  static Vocabulary from_tokens(const std::vector<std::string>& words) {
    Vocabulary v;
    for (const auto& w : words) {
      if (w.empty()) throw DataError("vocabulary contains an empty token");
      if (v.index_.contains(w)) throw DataError("duplicate vocabulary token '" + w + "'");
      v.tokens_.push_back(w);
      v.index_.emplace(w, v.tokens_.size() - 1);
    }
    return v;
  }

  std::size_t size() const { return tokens_.size(); }

  TokenId id(const std::string& token) const {
    const auto it = index_.find(token);
    return it == index_.end() ? kUnkId : it->second;
  }

  const std::string& token(TokenId id) const {
    if (id >= tokens_.size()) {
      throw ValueError("token id " + std::to_string(id) + " outside vocabulary of size " +
                       std::to_string(tokens_.size()));
    }
    return tokens_[id];
  }

  bool contains(const std::string& token) const { return index_.contains(token); }

  EncodedCaption encode(std::string_view text) const {
    EncodedCaption out;
    out.ids.push_back(kStartId);
    for (const auto& t : tokenize(text)) out.ids.push_back(id(t));
    out.ids.push_back(kEndId);
    return out;
  }

  // Words for the ids, dropping <pad>/<start>/<end>; <unk> stays literal.
  std::vector<std::string> words(const std::vector<TokenId>& ids) const {
    std::vector<std::string> out;
    for (TokenId i : ids) {
      if (i == kPadId || i == kStartId || i == kEndId) continue;
      out.push_back(token(i));
    }
    return out;
  }

  std::string decode(const std::vector<TokenId>& ids) const { return detokenize(words(ids)); }

  // One non-special token per line; line n holds id n + 4.
  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write vocabulary " + path.string());
    for (std::size_t i = kNumSpecials; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read vocabulary " + path.string());
    std::vector<std::string> words;
    std::string line;
    while (std::getline(in, line)) words.push_back(line);
    return from_tokens(words);
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], i);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace histocap
