// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cctype>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "atelier/core/tensor.hpp"

namespace atelier::corpus {

enum class Split { train, test };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw Error("invalid_argument", "unknown split '" + std::string(s) + "' (expected train or test)");
}

struct CaptionRecord {
  std::filesystem::path image_path;
  std::vector<std::string> captions;
  Split split = Split::train;

  friend bool operator==(const CaptionRecord&, const CaptionRecord&) = default;
};

struct PaintingRecord {
  std::filesystem::path image_path;
  std::string style;
  std::string genre;
  Split split = Split::train;

  friend bool operator==(const PaintingRecord&, const PaintingRecord&) = default;
};

// Lowercases and splits on whitespace and punctuation; separators are dropped.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c) || std::ispunct(c)) {
      if (!cur.empty()) tokens.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

}  // namespace atelier::corpus
