// SPDX-License-Identifier: Apache-2.0
#pragma once

// Training recipes shared by the CLI and the service, the data-root layout,
// and first-run bootstrap of a synthetic corpus plus toy checkpoints.
//
//   <root>/corpus/captions.jsonl, img/       caption corpus
//   <root>/corpus/paintings.jsonl, paintings/ painting corpus
//   <root>/models/<kind>.ckpt                 one checkpoint per model kind

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include "atelier/corpus/manifest.hpp"
#include "atelier/corpus/stats.hpp"
#include "atelier/corpus/synth.hpp"
#include "atelier/corpus/vocabulary.hpp"
#include "atelier/dmgan/train.hpp"
#include "atelier/genre/classifier.hpp"
#include "atelier/styler/transfer.hpp"
#include "atelier/text/train.hpp"

namespace atelier::pipeline {

namespace fs = std::filesystem;

inline fs::path default_data_dir() {
  if (const char* env = std::getenv("ATELIER_DATA_DIR"); env && *env) return env;
  return "atelier-data";
}

struct DataLayout {
  fs::path root;

  fs::path corpus() const { return root / "corpus"; }
  fs::path captions() const { return corpus() / "captions.jsonl"; }
  fs::path paintings() const { return corpus() / "paintings.jsonl"; }
  fs::path models() const { return root / "models"; }
  fs::path checkpoint(const std::string& kind) const { return models() / (kind + ".ckpt"); }
  fs::path jobs() const { return root / "jobs"; }
  fs::path artifacts() const { return root / "artifacts"; }
};

// ---------------------------------------------------------------------------
// Recipes

struct DamsmRecipe {
  text::DamsmConfig model;
  text::DamsmTrainConfig train{6, 8, 2e-3, 0};
  std::size_t min_freq = 1;
};

inline std::vector<text::CaptionedImage> captioned_images(const std::vector<corpus::CaptionRecord>& records) {
  std::vector<text::CaptionedImage> out;
  for (const auto& r : records)
    for (const auto& c : r.captions) out.push_back({read_png(r.image_path), c});
  return out;
}

inline text::DamsmModel train_damsm_on(const std::vector<corpus::CaptionRecord>& records, const DamsmRecipe& r) {
  require(!records.empty(), "train-damsm: caption manifest has no records");
  const auto vocab = corpus::build_vocabulary(records, r.min_freq);
  const auto init = text::DamsmModel::initialize(r.model, vocab, r.train.seed);
  return text::train_damsm(init, captioned_images(records), r.train).model;
}

struct GanRecipe {
  dmgan::GanConfig model;
  dmgan::GanTrainConfig train;
  std::size_t steps = 40;
};

inline dmgan::DmGanModel train_gan_on(const text::DamsmModel& damsm, const std::vector<corpus::CaptionRecord>& records,
                                      const GanRecipe& r,
                                      const std::function<void(std::size_t, const dmgan::GanLosses&)>& on_step = {}) {
  require(!records.empty(), "train-gan: caption manifest has no records");
  dmgan::GanConfig cfg = r.model;
  cfg.word_dim = damsm.config().text.feature_dim;
  std::vector<dmgan::GanExample> data;
  for (const auto& c : captioned_images(records)) data.push_back({c.image, c.caption});
  return dmgan::train_gan(damsm, dmgan::DmGanModel::initialize(cfg, r.train.seed), data, r.steps, r.train, on_step).model;
}

struct ClassifierRecipe {
  genre::FinetuneConfig train{6, 16, 3e-3, false, 0};
  std::uint64_t init_seed = 0;
};

inline genre::FinetuneResult train_classifier_on(const corpus::PaintingManifest& m, const ClassifierRecipe& r) {
  const auto base = genre::GenreClassifier::initialize(m.genres, r.init_seed);
  return genre::finetune(genre::labeled_images(m.records), base, r.train);
}

struct StylerRecipe {
  styler::TransferTrainConfig train;
  std::size_t content_images = 16;  // synthetic content set size
};

// Style corpus: training-split paintings. Content corpus: synthetic shapes.
inline styler::TransferTrainResult train_styler_on(const corpus::PaintingManifest& m, const StylerRecipe& r,
                                                   const std::function<void(const styler::TransferEpoch&)>& on_epoch = {}) {
  std::vector<Tensor> styles, contents;
  for (const auto& p : m.records)
    if (p.split == corpus::Split::train) styles.push_back(read_png(p.image_path));
  require(!styles.empty(), "train-styler: painting manifest has no training-split records");
  for (auto& s : corpus::synth_shapes(mix_seed(r.train.seed, 0xC7), r.content_images, r.train.image_size))
    contents.push_back(std::move(s.image));
  return styler::train_transfer(styles, contents, r.train, styler::FeatureExtractor(), on_epoch);
}

// ---------------------------------------------------------------------------
// Bootstrap

struct BootstrapConfig {
  std::uint64_t seed = 0;
  std::size_t caption_images = 48;
  std::size_t caption_image_size = 32;
  corpus::PaintingCorpusConfig paintings{corpus::default_genres(), corpus::default_styles(), 12, 3, 32};
  DamsmRecipe damsm;
  GanRecipe gan;
  ClassifierRecipe classifier;
  StylerRecipe styler;
};

inline void ensure_corpus(const DataLayout& d, const BootstrapConfig& cfg) {
  if (!fs::exists(d.captions()))
    corpus::synth_shapes_dataset(d.corpus(), cfg.seed, cfg.caption_images, cfg.caption_image_size);
  if (!fs::exists(d.paintings())) corpus::synth_painting_corpus(d.corpus(), mix_seed(cfg.seed, 0x9A), cfg.paintings);
}

// Trains and saves every missing checkpoint. Deterministic for a fixed
// config, so two fresh data roots end up with identical models.
inline void ensure_models(const DataLayout& d, const BootstrapConfig& cfg,
                          const std::function<void(const std::string&)>& log = {}) {
  ensure_corpus(d, cfg);
  auto note = [&](const std::string& s) {
    if (log) log(s);
  };
  const auto captions = [&] { return corpus::load_caption_manifest(d.captions()); };
  std::optional<text::DamsmModel> damsm;
  if (!fs::exists(d.checkpoint("damsm"))) {
    note("bootstrap: training damsm");
    damsm = train_damsm_on(captions(), cfg.damsm);
    save_checkpoint(d.checkpoint("damsm"), damsm->to_checkpoint());
  }
  if (!fs::exists(d.checkpoint("dmgan"))) {
    if (!damsm) damsm = text::DamsmModel::from_checkpoint(load_checkpoint(d.checkpoint("damsm"), "damsm"));
    note("bootstrap: training dmgan");
    save_checkpoint(d.checkpoint("dmgan"), train_gan_on(*damsm, captions(), cfg.gan).to_checkpoint());
  }
  if (!fs::exists(d.checkpoint("genre_classifier"))) {
    note("bootstrap: training genre classifier");
    const auto m = corpus::load_painting_manifest(d.paintings());
    save_checkpoint(d.checkpoint("genre_classifier"), train_classifier_on(m, cfg.classifier).model.to_checkpoint());
  }
  if (!fs::exists(d.checkpoint("style_predictor")) || !fs::exists(d.checkpoint("style_transfer"))) {
    note("bootstrap: training style networks");
    const auto r = train_styler_on(corpus::load_painting_manifest(d.paintings()), cfg.styler);
    save_checkpoint(d.checkpoint("style_predictor"), r.predictor.to_checkpoint());
    save_checkpoint(d.checkpoint("style_transfer"), r.transfer.to_checkpoint());
  }
}

// Checkpoints and corpus loaded on first use and shared read-only.
class ModelBundle {
 public:
  explicit ModelBundle(DataLayout layout) : d_(std::move(layout)) {}

  const DataLayout& layout() const noexcept { return d_; }

  const text::DamsmModel& damsm() const {
    return load(damsm_, [&] { return text::DamsmModel::from_checkpoint(load_checkpoint(d_.checkpoint("damsm"), "damsm")); });
  }
  const dmgan::DmGanModel& gan() const {
    return load(gan_, [&] { return dmgan::DmGanModel::from_checkpoint(load_checkpoint(d_.checkpoint("dmgan"), "dmgan")); });
  }
  const genre::GenreClassifier& classifier() const {
    return load(classifier_, [&] {
      return genre::GenreClassifier::from_checkpoint(load_checkpoint(d_.checkpoint("genre_classifier"), "genre_classifier"));
    });
  }
  const styler::StylePredictor& predictor() const {
    return load(predictor_, [&] {
      return styler::StylePredictor::from_checkpoint(load_checkpoint(d_.checkpoint("style_predictor"), "style_predictor"));
    });
  }
  const styler::TransferNet& transfer() const {
    return load(transfer_, [&] {
      return styler::TransferNet::from_checkpoint(load_checkpoint(d_.checkpoint("style_transfer"), "style_transfer"));
    });
  }
  const corpus::PaintingManifest& paintings() const {
    return load(paintings_, [&] { return corpus::load_painting_manifest(d_.paintings()); });
  }
  const corpus::GenreStyleStats& stats() const {
    return load(stats_, [&] { return corpus::style_frequency_table(paintings().records); });
  }

 private:
  template <class T, class F>
  const T& load(std::shared_ptr<const T>& slot, F make) const {
    {
      std::lock_guard lock(mu_);
      if (slot) return *slot;
    }
    auto made = std::make_shared<const T>(make());  // may throw; nothing cached then
    std::lock_guard lock(mu_);
    if (!slot) slot = std::move(made);
    return *slot;
  }

  DataLayout d_;
  mutable std::mutex mu_;
  mutable std::shared_ptr<const text::DamsmModel> damsm_;
  mutable std::shared_ptr<const dmgan::DmGanModel> gan_;
  mutable std::shared_ptr<const genre::GenreClassifier> classifier_;
  mutable std::shared_ptr<const styler::StylePredictor> predictor_;
  mutable std::shared_ptr<const styler::TransferNet> transfer_;
  mutable std::shared_ptr<const corpus::PaintingManifest> paintings_;
  mutable std::shared_ptr<const corpus::GenreStyleStats> stats_;
};

}  // namespace atelier::pipeline
