// SPDX-License-Identifier: Apache-2.0
#pragma once

// Generator report at desk scale: IS over the toy genre classifier's class
// probabilities, FID over the frozen style extractor's pooled conv3
// features, and R-precision under the text encoder's similarity.

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "atelier/corpus/records.hpp"
#include "atelier/dmgan/generator.hpp"
#include "atelier/genre/classifier.hpp"
#include "atelier/metrics/scores.hpp"
#include "atelier/styler/features.hpp"

namespace atelier::metrics {

struct GeneratorEvalConfig {
  std::size_t stages = 0;        // 0: every configured stage
  std::size_t max_samples = 0;   // 0: every caption record
  std::size_t splits = 1;        // IS splits and R-precision batches
  std::size_t r = kDefaultR;     // candidates per query, truth included
  std::uint64_t seed = 0;
};

struct GeneratorEvalReport {
  MeanError inception;
  MeanError r_precision;
  double fid = 0.0;
  std::size_t samples = 0;
  std::size_t candidates = 0;  // effective R
  std::string generator_id;

  nlohmann::json to_json() const {
    return {{"inception_score", inception.to_json()}, {"r_precision", r_precision.to_json()}, {"fid", fid},
            {"samples", samples},                       {"r", candidates},                       {"generator_id", generator_id}};
  }

  // Same columns as the published generator table; +- is std err.
  std::string table() const {
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "Dataset  IS              R-precision (%%)   FID\n"
                  "toy      %.2f +- %.2f    %.2f +- %.2f     %.2f\n",
                  inception.mean, inception.std_err, 100.0 * r_precision.mean, 100.0 * r_precision.std_err, fid);
    return buf;
  }
};

inline Tensor pooled_features(const styler::FeatureExtractor& fx, const Tensor& image) {
  const Tensor f = fx.extract(image, {"conv3"}).layers.at("conv3");
  const std::size_t c = f.dim(2), n = f.dim(0) * f.dim(1);
  Tensor out({c}, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) out[k] += f[i * c + k] / static_cast<double>(n);
  return out;
}

inline GaussianSummary feature_gaussian(const std::vector<Tensor>& feats) {
  require(feats.size() >= 2, "fid: need at least two samples per side");
  const std::size_t d = feats[0].size();
  Tensor m({feats.size(), d});
  for (std::size_t i = 0; i < feats.size(); ++i) std::copy(feats[i].data(), feats[i].data() + d, m.data() + i * d);
  return fit_gaussian(m);
}

// One image per caption record (its first caption), seeded per record.
inline GeneratorEvalReport eval_generator(const text::DamsmModel& damsm, const dmgan::DmGanModel& gan,
                                          const genre::GenreClassifier& classifier,
                                          const std::vector<corpus::CaptionRecord>& records,
                                          const GeneratorEvalConfig& cfg,
                                          const styler::FeatureExtractor& fx = styler::FeatureExtractor()) {
  std::vector<const corpus::CaptionRecord*> use;
  for (const auto& r : records)
    if (!r.captions.empty() && (cfg.max_samples == 0 || use.size() < cfg.max_samples)) use.push_back(&r);
  require(use.size() >= 2, "eval_generator: need at least two captioned records");
  require(cfg.r >= 2, "eval_generator: R must be at least 2");
  const std::size_t stages = cfg.stages ? cfg.stages : gan.config().stages;

  std::vector<std::string> captions;
  for (const auto* r : use)
    if (std::find(captions.begin(), captions.end(), r->captions[0]) == captions.end()) captions.push_back(r->captions[0]);
  require(captions.size() >= 2, "eval_generator: need at least two distinct captions");

  std::map<std::string, text::SentenceFeature> sentences;
  for (const auto& c : captions) sentences.emplace(c, damsm.encode_text(c).second);

  Tensor probs({use.size(), classifier.config().genres.size()});
  std::vector<Tensor> real, fake;
  std::vector<RQuery<text::RegionFeatures>> queries;
  Rng rng(mix_seed(cfg.seed, 0x6E));
  for (std::size_t i = 0; i < use.size(); ++i) {
    const auto& rec = *use[i];
    const Tensor img = to_unit_range(dmgan::generate(rec.captions[0], mix_seed(cfg.seed, i), stages, damsm, gan).back().image);
    const auto p = classifier.classify(img).probabilities;
    std::copy(p.data(), p.data() + p.size(), probs.data() + i * p.size());
    fake.push_back(pooled_features(fx, img));
    Tensor ref = read_png(rec.image_path);
    if (ref.dim(0) != img.dim(0) || ref.dim(1) != img.dim(1)) ref = resize_bilinear(ref, img.dim(0), img.dim(1));
    real.push_back(pooled_features(fx, ref));

    RQuery<text::RegionFeatures> q{damsm.encode_image(img), rec.captions[0], {}};
    std::vector<std::string> pool;
    for (const auto& c : captions)
      if (c != q.truth) pool.push_back(c);
    rng.shuffle(pool.begin(), pool.end());
    pool.resize(std::min(pool.size(), cfg.r - 1));
    q.distractors = std::move(pool);
    queries.push_back(std::move(q));
  }

  GeneratorEvalReport out;
  out.samples = use.size();
  out.candidates = queries[0].distractors.size() + 1;
  out.inception = inception_score_splits(probs, std::min(cfg.splits, use.size()));
  out.fid = fid(feature_gaussian(real), feature_gaussian(fake));
  const std::function<double(const text::RegionFeatures&, const std::string&)> sim = [&](const text::RegionFeatures& r,
                                                                                   const std::string& c) {
    return text::damsm_similarity(text::WordFeatures{}, sentences.at(c), r);
  };
  out.r_precision = r_precision(queries, sim, std::min(cfg.splits, queries.size()));
  out.generator_id = checkpoint_id(gan.to_checkpoint());
  return out;
}

}  // namespace atelier::metrics
