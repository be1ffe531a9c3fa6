// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "atelier/core/hash.hpp"
#include "atelier/corpus/stats.hpp"
#include "atelier/genre/classifier.hpp"

namespace atelier::genre {

struct StyleRecommendation {
  std::string genre;
  std::vector<std::pair<std::string, std::size_t>> styles;  // (style, count), most popular first

  bool contains(const std::string& style) const {
    return std::any_of(styles.begin(), styles.end(), [&](const auto& s) { return s.first == style; });
  }

  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& [s, c] : styles) arr.push_back({{"style", s}, {"count", c}});
    return {{"genre", genre}, {"styles", arr}};
  }
};

// Top-k styles seen with `genre`, by descending count then style name. An
// unknown genre yields an empty recommendation.
inline StyleRecommendation recommend_styles(const std::string& genre, const corpus::GenreStyleStats& stats, long k) {
  if (k <= 0) throw Error("invalid_argument", "recommend_styles: k must be positive, got " + std::to_string(k));
  StyleRecommendation rec{genre, {}};
  rec.styles = stats.styles_of(genre);
  std::stable_sort(rec.styles.begin(), rec.styles.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  if (rec.styles.size() > static_cast<std::size_t>(k)) rec.styles.resize(static_cast<std::size_t>(k));
  return rec;
}

// Paintings of `style`, in corpus order.
inline std::vector<corpus::PaintingRecord> paintings_of(const std::string& style,
                                                        const std::vector<corpus::PaintingRecord>& corpus) {
  std::vector<corpus::PaintingRecord> out;
  std::copy_if(corpus.begin(), corpus.end(), std::back_inserter(out), [&](const auto& r) { return r.style == style; });
  return out;
}

// Seeded choice among the paintings of `style`. The index is a rotation of
// the seed by a per-style offset, so every candidate is equally likely over
// seeds and seed, seed+1, ... visits all candidates before repeating.
inline corpus::PaintingRecord pick_painting(const std::string& style, const std::vector<corpus::PaintingRecord>& corpus,
                                            std::uint64_t seed) {
  const auto candidates = paintings_of(style, corpus);
  if (candidates.empty()) throw Error("not_found", "no painting with style '" + style + "' in the corpus");
  const std::uint64_t offset = std::stoull(sha256_hex(style).substr(0, 12), nullptr, 16);
  return candidates[(offset + seed) % candidates.size()];
}

}  // namespace atelier::genre
