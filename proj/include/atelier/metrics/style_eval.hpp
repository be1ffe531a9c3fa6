// SPDX-License-Identifier: Apache-2.0
#pragma once

// Observed / unobserved style-transfer loss report: mean style and content
// loss of feedforward outputs, split by whether the style was seen in
// training.

#include <algorithm>
#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "atelier/corpus/records.hpp"
#include "atelier/styler/transfer.hpp"

namespace atelier::metrics {

// Styles sorted lexicographically; the first round(rho * n) are observed.
struct StyleSplitRule {
  double observed_fraction = 0.8;

  std::pair<std::vector<std::string>, std::vector<std::string>> split(std::vector<std::string> styles) const {
    require(observed_fraction >= 0.0 && observed_fraction <= 1.0, "split rule: observed fraction must be in [0, 1]");
    std::sort(styles.begin(), styles.end());
    styles.erase(std::unique(styles.begin(), styles.end()), styles.end());
    const auto k = static_cast<std::size_t>(std::lround(observed_fraction * static_cast<double>(styles.size())));
    return {{styles.begin(), styles.begin() + static_cast<long>(k)}, {styles.begin() + static_cast<long>(k), styles.end()}};
  }
};

struct StyledImage {
  Tensor image;
  std::string style;
};

struct SplitLosses {
  double style = 0.0;
  double content = 0.0;
  std::size_t samples = 0;
  std::vector<std::string> styles;

  nlohmann::json to_json() const {
    return {{"style_loss", style}, {"content_loss", content}, {"samples", samples}, {"styles", styles}};
  }
};

struct StyleEvalReport {
  SplitLosses observed, unobserved;
  std::string model_id;
  std::string corpus_id;

  nlohmann::json to_json() const {
    return {{"model_id", model_id}, {"corpus_id", corpus_id}, {"observed", observed.to_json()},
            {"unobserved", unobserved.to_json()}};
  }

  // Rows: split x loss kind, one value column.
  std::string table() const {
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "Dataset     Loss          Value\n"
                  "Observed    Style loss    %.3e\n"
                  "            Content loss  %.3e\n"
                  "Unobserved  Style loss    %.3e\n"
                  "            Content loss  %.3e\n",
                  observed.style, observed.content, unobserved.style, unobserved.content);
    return buf;
  }
};

struct StyleEvalConfig {
  StyleSplitRule split;
  std::size_t image_size = 16;       // losses are computed at this square size
  std::size_t max_pairs_per_split = 0;  // 0: every painting in the split
  std::uint64_t seed = 0;
  std::vector<std::string> content_layers = styler::default_content_layers();
  std::vector<std::string> style_layers = styler::default_style_layers();
};

// Each painting in a split is paired with a seeded choice of content image,
// stylized feedforward, and scored against that painting and content.
inline StyleEvalReport eval_style_transfer(const styler::StylePredictor& predictor, const styler::TransferNet& transfer,
                                           const std::vector<StyledImage>& paintings,
                                           const std::vector<Tensor>& contents, const StyleEvalConfig& cfg,
                                           const styler::FeatureExtractor& fx = styler::FeatureExtractor()) {
  require(!contents.empty(), "eval_style_transfer: content set is empty");
  std::vector<std::string> styles;
  for (const auto& p : paintings) styles.push_back(p.style);
  const auto [observed, unobserved] = cfg.split.split(styles);
  if (observed.empty()) throw Error("invalid_argument", "eval_style_transfer: observed split has no styles");
  if (unobserved.empty()) throw Error("invalid_argument", "eval_style_transfer: unobserved split has no styles");

  const std::size_t n = cfg.image_size;
  auto fit = [n](const Tensor& t) { return (t.dim(0) == n && t.dim(1) == n) ? t : resize_bilinear(t, n, n); };
  Rng rng(mix_seed(cfg.seed, 0xE7));
  auto run = [&](const std::vector<std::string>& split_styles) {
    SplitLosses out;
    out.styles = split_styles;
    const std::set<std::string> members(split_styles.begin(), split_styles.end());
    for (const auto& p : paintings) {
      if (!members.count(p.style)) continue;
      if (cfg.max_pairs_per_split && out.samples == cfg.max_pairs_per_split) break;
      const Tensor content = fit(contents[rng.index(contents.size())]);
      const Tensor x = styler::stylize_feedforward(content, predictor.predict(p.image), transfer);
      out.style += styler::style_loss(fx.extract(x, cfg.style_layers), fx.extract(fit(p.image), cfg.style_layers));
      out.content += styler::content_loss(fx.extract(x, cfg.content_layers), fx.extract(content, cfg.content_layers));
      ++out.samples;
    }
    out.style /= static_cast<double>(out.samples);
    out.content /= static_cast<double>(out.samples);
    return out;
  };
  StyleEvalReport r;
  r.observed = run(observed);
  r.unobserved = run(unobserved);
  Checkpoint both = transfer.to_checkpoint();
  both.params.merge(predictor.params());
  r.model_id = checkpoint_id(both);
  std::string corpus_key;
  for (const auto& p : paintings) corpus_key += p.style + ":" + sha256_hex(encode_png(p.image)) + "\n";
  r.corpus_id = sha256_hex(corpus_key).substr(0, 16);
  return r;
}

inline std::vector<StyledImage> styled_images(const std::vector<corpus::PaintingRecord>& records) {
  std::vector<StyledImage> out;
  for (const auto& r : records) out.push_back({read_png(r.image_path), r.style});
  return out;
}

}  // namespace atelier::metrics
