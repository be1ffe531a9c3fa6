// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "atelier/corpus/records.hpp"

namespace atelier::corpus {

// Painting counts per (genre, style) pair.
class GenreStyleStats {
 public:
  using Key = std::pair<std::string, std::string>;  // (genre, style)

  void add(const std::string& genre, const std::string& style, std::size_t n = 1) { counts_[{genre, style}] += n; }

  std::size_t count(const std::string& genre, const std::string& style) const {
    auto it = counts_.find({genre, style});
    return it == counts_.end() ? 0 : it->second;
  }

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& [_, c] : counts_) n += c;
    return n;
  }

  bool has_genre(const std::string& genre) const {
    auto it = counts_.lower_bound({genre, std::string()});
    return it != counts_.end() && it->first.first == genre;
  }

  // (style, count) pairs for one genre, in style-name order.
  std::vector<std::pair<std::string, std::size_t>> styles_of(const std::string& genre) const {
    std::vector<std::pair<std::string, std::size_t>> out;
    for (auto it = counts_.lower_bound({genre, std::string()}); it != counts_.end() && it->first.first == genre; ++it)
      out.emplace_back(it->first.second, it->second);
    return out;
  }

  bool empty() const noexcept { return counts_.empty(); }
  std::size_t pairs() const noexcept { return counts_.size(); }
  const std::map<Key, std::size_t>& counts() const noexcept { return counts_; }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& [k, c] : counts_) j.push_back({{"genre", k.first}, {"style", k.second}, {"count", c}});
    return j;
  }
  static GenreStyleStats from_json(const nlohmann::json& j) {
    GenreStyleStats s;
    for (const auto& e : j) s.add(e.at("genre"), e.at("style"), e.at("count").get<std::size_t>());
    return s;
  }

  friend bool operator==(const GenreStyleStats&, const GenreStyleStats&) = default;

 private:
  std::map<Key, std::size_t> counts_;
};

inline GenreStyleStats style_frequency_table(const std::vector<PaintingRecord>& records) {
  GenreStyleStats stats;
  for (const auto& r : records) stats.add(r.genre, r.style);
  return stats;
}

}  // namespace atelier::corpus
