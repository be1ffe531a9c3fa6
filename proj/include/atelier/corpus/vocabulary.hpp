// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "atelier/corpus/records.hpp"

namespace atelier::corpus {

class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;
  static constexpr std::size_t kBos = 2;
  static constexpr std::size_t kEos = 3;
  static constexpr std::size_t kReserved = 4;

  Vocabulary() : tokens_{"<pad>", "<unk>", "<bos>", "<eos>"} {
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], i);
  }

  // Tokens in the given order get consecutive indices after the reserved ones.
  explicit Vocabulary(const std::vector<std::string>& tokens) : Vocabulary() {
    for (const auto& t : tokens) {
      require(!index_.count(t), "duplicate vocabulary token '" + t + "'");
      index_.emplace(t, tokens_.size());
      tokens_.push_back(t);
    }
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  std::size_t id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& token(std::size_t id) const {
    require(id < tokens_.size(), "vocabulary id out of range: " + std::to_string(id));
    return tokens_[id];
  }

  std::vector<std::size_t> encode(const std::string& text) const {
    std::vector<std::size_t> ids;
    for (const auto& t : tokenize(text)) ids.push_back(id(t));
    return ids;
  }

  // Non-reserved tokens in index order.
  std::vector<std::string> words() const { return {tokens_.begin() + kReserved, tokens_.end()}; }

  nlohmann::json to_json() const { return words(); }
  static Vocabulary from_json(const nlohmann::json& j) { return Vocabulary(j.get<std::vector<std::string>>()); }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Tokens with frequency >= min_freq, ordered by descending frequency then
// lexicographically.
inline Vocabulary build_vocabulary(const std::vector<CaptionRecord>& records, std::size_t min_freq = 1) {
  require(min_freq >= 1, "min_freq must be >= 1");
  std::map<std::string, std::size_t> freq;
  for (const auto& r : records)
    for (const auto& c : r.captions)
      for (auto& t : tokenize(c)) ++freq[t];
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [tok, n] : freq)
    if (n >= min_freq) kept.emplace_back(tok, n);
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens;
  for (auto& [tok, _] : kept) tokens.push_back(tok);
  return Vocabulary(tokens);
}

}  // namespace atelier::corpus
