#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vcgpt/error.hpp"
#include "vcgpt/ops.hpp"

namespace vcgpt {

/// Whitespace word splitter. Shared by the vocabulary and the metrics so the
/// reward sees exactly the tokens the model is trained on.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) words.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return words;
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr TokenId kFirstWord = 4;

  Vocabulary() : tokens_{"<pad>", "<bos>", "<eos>", "<unk>"} {}

  /// Ids are assigned by descending frequency, ties broken lexicographically,
  /// so the result does not depend on corpus order.
  static Vocabulary build(const std::vector<std::string>& corpus) {
    if (corpus.empty()) throw DataError("cannot build a vocabulary from an empty corpus");
    std::map<std::string, std::size_t> counts;
    for (const auto& caption : corpus)
      for (auto& w : split_words(caption)) ++counts[w];
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocabulary vocab;
    for (auto& [word, count] : ranked) vocab.add(word);
    return vocab;
  }

  /// Words in id order (ids 4..V-1).
  static Vocabulary from_words(const std::vector<std::string>& words) {
    Vocabulary vocab;
    for (const auto& w : words) {
      if (w.empty() || w.find_first_of(" \t\r\n") != std::string::npos) {
        throw DataError("vocabulary entry '" + w + "' is not a single word");
      }
      if (vocab.index_.count(w)) throw DataError("duplicate vocabulary entry '" + w + "'");
      vocab.add(w);
    }
    return vocab;
  }

  std::size_t size() const { return tokens_.size(); }

  TokenId id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw IndexError("token id " + std::to_string(id) + " outside vocabulary of size " +
                       std::to_string(tokens_.size()));
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  /// BOS + word ids + EOS.
  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> ids{kBos};
    for (const auto& w : split_words(text)) ids.push_back(id(w));
    ids.push_back(kEos);
    return ids;
  }

  /// Drops BOS/PAD, stops at the first EOS, joins with single spaces.
  std::string decode(std::span<const TokenId> ids) const {
    std::vector<std::string> words;
    for (TokenId t : ids) {
      const std::string& tok = token(t);
      if (t == kEos) break;
      if (t == kBos || t == kPad) continue;
      words.push_back(tok);
    }
    return join_words(words);
  }

  std::vector<std::string> words() const {
    return {tokens_.begin() + kFirstWord, tokens_.end()};
  }

  /// One word per line; line n holds id n + 4.
  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write vocabulary to " + path.string());
    for (std::size_t i = kFirstWord; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
    if (!out) throw IoError("failed writing vocabulary to " + path.string());
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read vocabulary from " + path.string());
    std::vector<std::string> words;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      words.push_back(line);
    }
    return from_words(words);
  }

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void add(const std::string& word) {
    index_.emplace(word, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(word);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace vcgpt
