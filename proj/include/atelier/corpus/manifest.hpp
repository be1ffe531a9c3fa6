// SPDX-License-Identifier: Apache-2.0
#pragma once

// Line-delimited JSON manifests. The first non-empty line is a header
// object; every following non-empty line is one record. Image paths are
// stored relative to the manifest's directory.
//
// Caption manifest:
//   {"format":"atelier.captions","version":1}
//   {"image":"img/0000.png","captions":["a red square"],"split":"train"}
//
// Painting manifest:
//   {"format":"atelier.paintings","version":1,"genres":[...],"styles":[...]}
//   {"image":"p/0001.png","style":"impressionism","genre":"landscape","split":"train"}
//
// An empty file is a valid manifest with no records.

#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "atelier/core/checkpoint.hpp"
#include "atelier/core/image.hpp"
#include "atelier/corpus/records.hpp"

namespace atelier::corpus {

inline constexpr int kManifestVersion = 1;
inline constexpr const char* kCaptionFormat = "atelier.captions";
inline constexpr const char* kPaintingFormat = "atelier.paintings";

struct PaintingManifest {
  std::vector<std::string> genres;
  std::vector<std::string> styles;
  std::vector<PaintingRecord> records;
};

struct ManifestOptions {
  bool check_images = true;  // decode every image and enforce H, W >= 8
};

namespace detail {

[[noreturn]] inline void fail_line(const std::filesystem::path& path, std::size_t line, const std::string& why) {
  throw Error("malformed_manifest", path.string() + ":" + std::to_string(line) + ": " + why);
}

inline std::vector<std::pair<std::size_t, std::string>> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("not_found", "manifest not found: " + path.string());
  std::vector<std::pair<std::size_t, std::string>> lines;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    lines.emplace_back(n, line);
  }
  return lines;
}

inline nlohmann::json parse_line(const std::filesystem::path& path, std::size_t n, const std::string& line) {
  try {
    auto j = nlohmann::json::parse(line);
    if (!j.is_object()) fail_line(path, n, "record is not a JSON object");
    return j;
  } catch (const nlohmann::json::parse_error& e) {
    fail_line(path, n, std::string("invalid JSON: ") + e.what());
  }
}

inline void check_header(const std::filesystem::path& path, std::size_t n, const nlohmann::json& h,
                         const char* format) {
  if (!h.contains("format") || h["format"] != format)
    fail_line(path, n, std::string("header must declare format \"") + format + "\"");
  if (!h.contains("version") || h["version"] != kManifestVersion)
    fail_line(path, n, "unsupported manifest version");
}

inline std::string string_field(const std::filesystem::path& path, std::size_t n, const nlohmann::json& j,
                                const char* key) {
  if (!j.contains(key) || !j[key].is_string()) fail_line(path, n, std::string("missing string field \"") + key + "\"");
  std::string v = j[key].get<std::string>();
  if (v.empty()) fail_line(path, n, std::string("empty field \"") + key + "\"");
  return v;
}

inline void check_image(const std::filesystem::path& manifest, std::size_t n, const std::filesystem::path& img) {
  Tensor t;
  try {
    t = read_png(img);
  } catch (const Error& e) {
    fail_line(manifest, n, std::string("unreadable image: ") + e.what());
  }
  if (t.dim(0) < 8 || t.dim(1) < 8) fail_line(manifest, n, "image smaller than 8x8: " + img.string());
}

inline std::filesystem::path resolve(const std::filesystem::path& manifest, const std::string& rel) {
  return (std::filesystem::absolute(manifest).parent_path() / rel).lexically_normal();
}

inline std::string relative_to(const std::filesystem::path& manifest, const std::filesystem::path& img) {
  const auto dir = std::filesystem::absolute(manifest).parent_path();
  return std::filesystem::absolute(img).lexically_normal().lexically_relative(dir).generic_string();
}

}  // namespace detail

inline std::vector<CaptionRecord> load_caption_manifest(const std::filesystem::path& path,
                                                        const ManifestOptions& opts = {}) {
  const auto lines = detail::read_lines(path);
  std::vector<CaptionRecord> records;
  if (lines.empty()) return records;
  detail::check_header(path, lines[0].first, detail::parse_line(path, lines[0].first, lines[0].second),
                       kCaptionFormat);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto& [n, text] = lines[i];
    const auto j = detail::parse_line(path, n, text);
    CaptionRecord r;
    r.image_path = detail::resolve(path, detail::string_field(path, n, j, "image"));
    if (!j.contains("captions") || !j["captions"].is_array()) detail::fail_line(path, n, "missing captions array");
    for (const auto& c : j["captions"]) {
      if (!c.is_string() || c.get<std::string>().empty()) detail::fail_line(path, n, "captions must be non-empty strings");
      r.captions.push_back(c.get<std::string>());
    }
    if (r.captions.empty()) detail::fail_line(path, n, "record has zero captions");
    try {
      r.split = j.contains("split") ? parse_split(j["split"].get<std::string>()) : Split::train;
    } catch (const std::exception& e) {
      detail::fail_line(path, n, e.what());
    }
    if (opts.check_images) detail::check_image(path, n, r.image_path);
    records.push_back(std::move(r));
  }
  return records;
}

inline void write_caption_manifest(const std::filesystem::path& path, const std::vector<CaptionRecord>& records) {
  std::ostringstream os;
  os << nlohmann::json{{"format", kCaptionFormat}, {"version", kManifestVersion}}.dump() << '\n';
  for (const auto& r : records) {
    nlohmann::json j;
    j["image"] = detail::relative_to(path, r.image_path);
    j["captions"] = r.captions;
    j["split"] = to_string(r.split);
    os << j.dump() << '\n';
  }
  const std::string s = os.str();
  write_file_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

inline PaintingManifest load_painting_manifest(const std::filesystem::path& path, const ManifestOptions& opts = {}) {
  const auto lines = detail::read_lines(path);
  PaintingManifest m;
  if (lines.empty()) return m;
  const auto header = detail::parse_line(path, lines[0].first, lines[0].second);
  detail::check_header(path, lines[0].first, header, kPaintingFormat);
  for (const char* key : {"genres", "styles"}) {
    if (!header.contains(key) || !header[key].is_array() || header[key].empty())
      detail::fail_line(path, lines[0].first, std::string("header must declare a non-empty \"") + key + "\" list");
  }
  m.genres = header["genres"].get<std::vector<std::string>>();
  m.styles = header["styles"].get<std::vector<std::string>>();
  const std::set<std::string> genres(m.genres.begin(), m.genres.end());
  const std::set<std::string> styles(m.styles.begin(), m.styles.end());
  if (genres.size() != m.genres.size()) detail::fail_line(path, lines[0].first, "duplicate genre in header");
  if (styles.size() != m.styles.size()) detail::fail_line(path, lines[0].first, "duplicate style in header");
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto& [n, text] = lines[i];
    const auto j = detail::parse_line(path, n, text);
    PaintingRecord r;
    r.image_path = detail::resolve(path, detail::string_field(path, n, j, "image"));
    r.style = detail::string_field(path, n, j, "style");
    r.genre = detail::string_field(path, n, j, "genre");
    if (!genres.count(r.genre)) detail::fail_line(path, n, "genre '" + r.genre + "' not declared in header");
    if (!styles.count(r.style)) detail::fail_line(path, n, "style '" + r.style + "' not declared in header");
    try {
      r.split = j.contains("split") ? parse_split(j["split"].get<std::string>()) : Split::train;
    } catch (const std::exception& e) {
      detail::fail_line(path, n, e.what());
    }
    if (opts.check_images) detail::check_image(path, n, r.image_path);
    m.records.push_back(std::move(r));
  }
  return m;
}

inline void write_painting_manifest(const std::filesystem::path& path, const PaintingManifest& m) {
  std::ostringstream os;
  os << nlohmann::json{{"format", kPaintingFormat}, {"version", kManifestVersion}, {"genres", m.genres},
                       {"styles", m.styles}}
            .dump()
     << '\n';
  for (const auto& r : m.records) {
    nlohmann::json j;
    j["image"] = detail::relative_to(path, r.image_path);
    j["style"] = r.style;
    j["genre"] = r.genre;
    j["split"] = to_string(r.split);
    os << j.dump() << '\n';
  }
  const std::string s = os.str();
  write_file_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

}  // namespace atelier::corpus
