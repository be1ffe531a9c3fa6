// SPDX-License-Identifier: Apache-2.0
#pragma once

// Deterministic synthetic datasets for desk-scale training and tests.
//
// Shapes: one colored square, circle or triangle on black, captioned
// "a <color> <shape>". Classes are balanced by drawing each consecutive
// block of 9 samples as a seeded permutation of the 9 (color, shape) pairs,
// so every class count is within 1 of n/9.
//
// Paintings: a genre fixes the base hue (evenly spaced around the color
// wheel) and a style fixes the texture pattern; both are recoverable from
// pixels, which makes genre classification and style retrieval learnable.

#include <array>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "atelier/core/image.hpp"
#include "atelier/corpus/manifest.hpp"
#include "atelier/corpus/records.hpp"

namespace atelier::corpus {

inline const std::array<std::string, 3> kShapeColors = {"red", "green", "blue"};
inline const std::array<std::string, 3> kShapeKinds = {"square", "circle", "triangle"};

struct ShapeSample {
  Tensor image;  // size x size x 3 in [0, 1]
  std::string caption;
  std::size_t color = 0;
  std::size_t shape = 0;
};

inline Tensor render_shape(std::size_t color, std::size_t shape, double cx, double cy, double r, std::size_t size) {
  Tensor img({size, size, 3}, 0.0);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double px = static_cast<double>(x) + 0.5 - cx;
      const double py = static_cast<double>(y) + 0.5 - cy;
      bool inside = false;
      switch (shape) {
        case 0: inside = std::abs(px) <= r && std::abs(py) <= r; break;
        case 1: inside = px * px + py * py <= r * r; break;
        default: {
          // Upward triangle: apex at top, base at cy + r.
          const double t = (py + r) / (2.0 * r);
          inside = t >= 0.0 && t <= 1.0 && std::abs(px) <= t * r;
        }
      }
      if (inside) img.at(y, x, color) = 1.0;
    }
  return img;
}

inline std::vector<ShapeSample> synth_shapes(std::uint64_t seed, std::size_t n, std::size_t size = 64) {
  require(n >= 1, "synth_shapes: n must be >= 1");
  Rng rng(seed);
  std::vector<ShapeSample> out;
  out.reserve(n);
  std::array<std::size_t, 9> perm{};
  for (std::size_t i = 0; i < n; ++i) {
    if (i % 9 == 0) {
      for (std::size_t k = 0; k < 9; ++k) perm[k] = k;
      rng.shuffle(perm.begin(), perm.end());
    }
    const std::size_t cls = perm[i % 9];
    const double s = static_cast<double>(size);
    const double r = rng.uniform(0.16 * s, 0.3 * s);
    const double cx = rng.uniform(r + 1.0, s - r - 1.0);
    const double cy = rng.uniform(r + 1.0, s - r - 1.0);
    ShapeSample smp;
    smp.color = cls / 3;
    smp.shape = cls % 3;
    smp.image = render_shape(smp.color, smp.shape, cx, cy, r, size);
    smp.caption = "a " + kShapeColors[smp.color] + " " + kShapeKinds[smp.shape];
    out.push_back(std::move(smp));
  }
  return out;
}

// Writes PNGs under dir/img and a caption manifest at dir/captions.jsonl.
// Every eighth sample is assigned to the test split.
inline std::vector<CaptionRecord> synth_shapes_dataset(const std::filesystem::path& dir, std::uint64_t seed,
                                                       std::size_t n, std::size_t size = 64) {
  const auto samples = synth_shapes(seed, n, size);
  std::vector<CaptionRecord> records;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img/%05zu.png", i);
    CaptionRecord r;
    r.image_path = std::filesystem::absolute(dir / name).lexically_normal();
    r.captions = {samples[i].caption};
    r.split = (i % 8 == 7) ? Split::test : Split::train;
    write_png(r.image_path, samples[i].image);
    records.push_back(std::move(r));
  }
  write_caption_manifest(dir / "captions.jsonl", records);
  return records;
}

// ---------------------------------------------------------------------------
// Paintings

inline const std::vector<std::string>& default_genres() {
  static const std::vector<std::string> g = {"abstract",     "cityscape", "flower-painting", "genre-painting",
                                             "illustration", "landscape", "marina",          "portrait",
                                             "religious-painting", "still-life"};
  return g;
}

inline const std::vector<std::string>& default_styles() {
  static const std::vector<std::string> s = {"cubism",     "expressionism", "impressionism",
                                             "minimalism", "op-art",        "pointillism"};
  return s;
}

enum class Pattern { checker, diagonal, blotches, flat, stripes, dots, rings };

inline Pattern pattern_for_style(const std::string& style) {
  if (style == "cubism") return Pattern::checker;
  if (style == "expressionism") return Pattern::diagonal;
  if (style == "impressionism") return Pattern::blotches;
  if (style == "minimalism") return Pattern::flat;
  if (style == "op-art") return Pattern::stripes;
  if (style == "pointillism") return Pattern::dots;
  std::size_t h = 0;
  for (char c : style) h = h * 131 + static_cast<unsigned char>(c);
  return static_cast<Pattern>(h % 7);
}

inline std::array<double, 3> hue_color(double hue_deg) {
  const double h = std::fmod(hue_deg, 360.0) / 60.0;
  const double x = 1.0 - std::abs(std::fmod(h, 2.0) - 1.0);
  switch (static_cast<int>(h)) {
    case 0: return {1, x, 0};
    case 1: return {x, 1, 0};
    case 2: return {0, 1, x};
    case 3: return {0, x, 1};
    case 4: return {x, 0, 1};
    default: return {1, 0, x};
  }
}

inline Tensor render_painting(Pattern pattern, const std::array<double, 3>& color, Rng& rng, std::size_t size) {
  const double period = static_cast<double>(static_cast<int>(rng.uniform(6.0, 10.0)));
  const double phx = rng.uniform(0.0, period), phy = rng.uniform(0.0, period);
  const double cx = rng.uniform(0.0, static_cast<double>(size)), cy = rng.uniform(0.0, static_cast<double>(size));
  const double f1 = rng.uniform(0.15, 0.3), f2 = rng.uniform(0.15, 0.3);
  const double ph1 = rng.uniform(0.0, 2 * std::numbers::pi), ph2 = rng.uniform(0.0, 2 * std::numbers::pi);
  Tensor img({size, size, 3});
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double fx = static_cast<double>(x) + phx, fy = static_cast<double>(y) + phy;
      double p = 0.5;
      switch (pattern) {
        case Pattern::checker:
          p = (static_cast<long>(fx / period) + static_cast<long>(fy / period)) % 2 ? 1.0 : 0.0;
          break;
        case Pattern::diagonal: p = std::fmod(fx + fy, period) < period / 2 ? 1.0 : 0.0; break;
        case Pattern::blotches:
          p = 0.5 + 0.5 * std::sin(f1 * static_cast<double>(x) + ph1) * std::sin(f2 * static_cast<double>(y) + ph2);
          break;
        case Pattern::flat: p = 0.6; break;
        case Pattern::stripes: p = std::fmod(fy, period) < period / 2 ? 1.0 : 0.0; break;
        case Pattern::dots: {
          const double dx = std::fmod(fx, period) - period / 2, dy = std::fmod(fy, period) - period / 2;
          p = dx * dx + dy * dy <= (period / 3) * (period / 3) ? 1.0 : 0.0;
          break;
        }
        case Pattern::rings: {
          const double d = std::hypot(static_cast<double>(x) - cx, static_cast<double>(y) - cy);
          p = std::sin(d * 2 * std::numbers::pi / period) > 0 ? 1.0 : 0.0;
          break;
        }
      }
      for (std::size_t k = 0; k < 3; ++k)
        img.at(y, x, k) = std::clamp(color[k] * (0.45 + 0.55 * p) + 0.03 * rng.normal(), 0.0, 1.0);
    }
  return img;
}

struct PaintingSample {
  Tensor image;
  std::string genre;
  std::string style;
  Split split = Split::train;
};

struct PaintingCorpusConfig {
  std::vector<std::string> genres = default_genres();
  std::vector<std::string> styles = default_styles();
  std::size_t paintings_per_genre = 24;
  std::size_t styles_per_genre = 3;  // genre g uses styles g, g+1, ... (mod count) with weights 3:2:1...
  std::size_t size = 64;
};

inline std::array<double, 3> genre_color(std::size_t genre_index, std::size_t genre_count) {
  return hue_color(360.0 * static_cast<double>(genre_index) / static_cast<double>(genre_count));
}

inline std::vector<PaintingSample> synth_paintings(std::uint64_t seed, const PaintingCorpusConfig& cfg) {
  require(!cfg.genres.empty() && !cfg.styles.empty(), "synth_paintings: empty genre or style set");
  Rng rng(seed);
  std::vector<PaintingSample> out;
  const std::size_t k = std::min(cfg.styles_per_genre, cfg.styles.size());
  for (std::size_t g = 0; g < cfg.genres.size(); ++g) {
    // Weighted style assignment k : k-1 : ... : 1 over the genre's styles.
    std::vector<std::size_t> schedule;
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t w = 0; w < k - j; ++w) schedule.push_back((g + j) % cfg.styles.size());
    const auto color = genre_color(g, cfg.genres.size());
    for (std::size_t i = 0; i < cfg.paintings_per_genre; ++i) {
      PaintingSample s;
      s.genre = cfg.genres[g];
      s.style = cfg.styles[schedule[i % schedule.size()]];
      s.image = render_painting(pattern_for_style(s.style), color, rng, cfg.size);
      s.split = (i % 5 == 4) ? Split::test : Split::train;
      out.push_back(std::move(s));
    }
  }
  return out;
}

// Writes PNGs under dir/paintings and a painting manifest at dir/paintings.jsonl.
inline PaintingManifest synth_painting_corpus(const std::filesystem::path& dir, std::uint64_t seed,
                                              const PaintingCorpusConfig& cfg = {}) {
  const auto samples = synth_paintings(seed, cfg);
  PaintingManifest m;
  m.genres = cfg.genres;
  m.styles = cfg.styles;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[40];
    std::snprintf(name, sizeof name, "paintings/%05zu.png", i);
    PaintingRecord r;
    r.image_path = std::filesystem::absolute(dir / name).lexically_normal();
    r.genre = samples[i].genre;
    r.style = samples[i].style;
    r.split = samples[i].split;
    write_png(r.image_path, samples[i].image);
    m.records.push_back(std::move(r));
  }
  write_painting_manifest(dir / "paintings.jsonl", m);
  return m;
}

}  // namespace atelier::corpus
