// SPDX-License-Identifier: Apache-2.0
#pragma once

// Small residual genre classifier: a stride-2 stem, three residual stages
// (the last two halve the resolution), global average pooling, linear head.

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "atelier/core/checkpoint.hpp"
#include "atelier/core/image.hpp"
#include "atelier/core/optim.hpp"
#include "atelier/corpus/records.hpp"

namespace atelier::genre {

inline constexpr std::size_t kInputSize = 64;

struct ResidualBlockParams {
  Tensor k1, b1, k2, b2;
  std::optional<std::pair<Tensor, Tensor>> projection;  // 1x1 kernel and bias
};

inline ResidualBlockParams init_residual_block(Rng& rng, std::size_t cin, std::size_t cout, bool project) {
  ResidualBlockParams p{init::he_conv(rng, 3, cin, cout), init::zeros({cout}), init::he_conv(rng, 3, cout, cout, 0.5),
                        init::zeros({cout}), std::nullopt};
  if (project) p.projection.emplace(init::he_conv(rng, 1, cin, cout), init::zeros({cout}));
  return p;
}

inline void add_residual_block(ParamSet& p, const std::string& name, const ResidualBlockParams& b) {
  p.set(name + ".c1.k", b.k1);
  p.set(name + ".c1.b", b.b1);
  p.set(name + ".c2.k", b.k2);
  p.set(name + ".c2.b", b.b2);
  if (b.projection) {
    p.set(name + ".proj.k", b.projection->first);
    p.set(name + ".proj.b", b.projection->second);
  }
}

// relu(F(x) + shortcut(x)) with F = conv3x3(relu(conv3x3(x, stride))).
// The shortcut is the identity unless a 1x1 projection is bound.
inline ad::Var residual_block(const Binding& p, const std::string& name, ad::Var x, std::size_t stride = 1) {
  using namespace ad;
  Var f = conv(p, name + ".c2", relu(conv(p, name + ".c1", x, stride)));
  Var shortcut = x;
  if (p.contains(name + ".proj.k")) {
    shortcut = conv(p, name + ".proj", x, stride);
  } else if (stride != 1 || f.shape() != x.shape()) {
    throw Error("shape_mismatch", "residual_block " + name + ": " + shape_str(x.shape()) + " -> " +
                                      shape_str(f.shape()) + " needs a projection shortcut");
  }
  return relu(add(f, shortcut));
}

struct ClassifierConfig {
  std::vector<std::string> genres;
  std::size_t stem = 8;
  std::size_t widths[3] = {8, 16, 32};
};

inline nlohmann::json to_json(const ClassifierConfig& c) {
  return {{"genres", c.genres}, {"stem", c.stem}, {"widths", {c.widths[0], c.widths[1], c.widths[2]}}};
}

inline ClassifierConfig classifier_config_from_json(const nlohmann::json& j) {
  ClassifierConfig c;
  c.genres = j.at("genres").get<std::vector<std::string>>();
  c.stem = j.at("stem");
  for (std::size_t i = 0; i < 3; ++i) c.widths[i] = j.at("widths").at(i);
  return c;
}

inline ParamSet init_classifier(const ClassifierConfig& cfg, Rng& rng) {
  require(cfg.genres.size() >= 2, "classifier needs at least two genres");
  ParamSet p;
  add_conv(p, rng, "stem", 3, 3, cfg.stem);
  std::size_t cin = cfg.stem;
  for (std::size_t s = 0; s < 3; ++s) {
    add_residual_block(p, "s" + std::to_string(s), init_residual_block(rng, cin, cfg.widths[s], s > 0 || cin != cfg.widths[s]));
    cin = cfg.widths[s];
  }
  add_linear(p, rng, "fc", cin, cfg.genres.size());
  return p;
}

// image: kInputSize x kInputSize x 3 in [0, 1] -> logits [K].
inline ad::Var classifier_logits(const Binding& p, ad::Var image) {
  using namespace ad;
  Var x = relu(conv(p, "stem", image, 2));
  x = residual_block(p, "s0", x, 1);
  x = residual_block(p, "s1", x, 2);
  x = residual_block(p, "s2", x, 2);
  return dense(p, "fc", spatial_mean(x));
}

inline Tensor softmax(const Tensor& logits) {
  const double m = *std::max_element(logits.storage().begin(), logits.storage().end());
  Tensor out = logits;
  double s = 0.0;
  for (double& v : out.values()) s += (v = std::exp(v - m));
  for (double& v : out.values()) v /= s;
  return out;
}

inline Tensor prepare_input(const Tensor& image) {
  require(image.rank() == 3 && image.shape()[2] == 3, "classify: expects an H x W x 3 image", "shape_mismatch");
  if (image.shape()[0] == kInputSize && image.shape()[1] == kInputSize) return image;
  return resize_bilinear(image, kInputSize, kInputSize);
}

struct GenreDistribution {
  std::vector<std::string> genres;
  Tensor probabilities;
  std::size_t label = 0;
  std::string checkpoint_id;

  const std::string& genre() const { return genres.at(label); }

  nlohmann::json to_json() const {
    nlohmann::json probs = nlohmann::json::object();
    for (std::size_t i = 0; i < genres.size(); ++i) probs[genres[i]] = probabilities[i];
    return {{"genre", genre()}, {"probabilities", probs}, {"checkpoint_id", checkpoint_id}};
  }
};

inline GenreDistribution distribution_from_logits(const std::vector<std::string>& genres, const Tensor& logits) {
  GenreDistribution d{genres, softmax(logits), 0, {}};
  d.label = static_cast<std::size_t>(
      std::max_element(d.probabilities.storage().begin(), d.probabilities.storage().end()) -
      d.probabilities.storage().begin());
  return d;
}

class GenreClassifier {
 public:
  GenreClassifier(ClassifierConfig cfg, ParamSet params) : cfg_(std::move(cfg)), params_(std::move(params)) {
    Rng probe(0);
    require_compatible(init_classifier(cfg_, probe), params_, "genre classifier");
  }

  static GenreClassifier initialize(const std::vector<std::string>& genres, std::uint64_t seed) {
    ClassifierConfig cfg;
    cfg.genres = genres;
    Rng rng(seed);
    return GenreClassifier(cfg, init_classifier(cfg, rng));
  }

  const ClassifierConfig& config() const noexcept { return cfg_; }
  const std::vector<std::string>& genres() const noexcept { return cfg_.genres; }
  const ParamSet& params() const noexcept { return params_; }

  Tensor logits(const Tensor& image) const {
    ad::Tape tape;
    Binding b(tape, params_, false);
    return classifier_logits(b, tape.constant(prepare_input(image))).value();
  }

  GenreDistribution classify(const Tensor& image) const {
    GenreDistribution d = distribution_from_logits(cfg_.genres, logits(image));
    d.checkpoint_id = checkpoint_id(to_checkpoint());
    return d;
  }

  Checkpoint to_checkpoint() const { return {"genre_classifier", {{"model", to_json(cfg_)}}, params_}; }

  static GenreClassifier from_checkpoint(const Checkpoint& ck) {
    if (ck.kind != "genre_classifier")
      throw Error("incompatible_checkpoint", "expected a genre_classifier checkpoint, got " + ck.kind);
    return GenreClassifier(classifier_config_from_json(ck.config.at("model")), ck.params);
  }

 private:
  ClassifierConfig cfg_;
  ParamSet params_;
};

// ---------------------------------------------------------------------------
// Fine-tuning

struct LabeledImage {
  Tensor image;  // any size, [0, 1]
  std::string genre;
  corpus::Split split = corpus::Split::train;
};

inline std::vector<LabeledImage> labeled_images(const std::vector<corpus::PaintingRecord>& records) {
  std::vector<LabeledImage> out;
  for (const auto& r : records) out.push_back({read_png(r.image_path), r.genre, r.split});
  return out;
}

struct FinetuneConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  double learning_rate = 3e-3;
  bool all_layers = false;  // default trains the last residual stage and the head
  std::uint64_t seed = 0;
};

struct EpochAccuracy {
  std::size_t epoch = 0;  // 1-based
  double train_acc = 0.0;
  double test_acc = 0.0;

  nlohmann::json to_json() const { return {{"epoch", epoch}, {"train_acc", train_acc}, {"test_acc", test_acc}}; }
};

struct FinetuneResult {
  GenreClassifier model;  // best epoch by held-out accuracy (base if epochs == 0)
  std::vector<EpochAccuracy> trace;
  std::size_t best_epoch = 0;
};

inline bool is_final_layer(const std::string& name) { return name.starts_with("s2.") || name.starts_with("fc."); }

inline double accuracy(const GenreClassifier& m, const std::vector<Tensor>& images, const std::vector<std::size_t>& labels) {
  if (images.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Tensor l = m.logits(images[i]);
    const auto arg = static_cast<std::size_t>(std::max_element(l.storage().begin(), l.storage().end()) - l.storage().begin());
    hit += arg == labels[i];
  }
  return static_cast<double>(hit) / static_cast<double>(images.size());
}

inline FinetuneResult finetune(const std::vector<LabeledImage>& data, const GenreClassifier& base,
                               const FinetuneConfig& cfg) {
  const auto& genres = base.genres();
  std::vector<Tensor> train_x, test_x;
  std::vector<std::size_t> train_y, test_y;
  std::vector<bool> seen(genres.size(), false);
  for (const auto& d : data) {
    const auto it = std::find(genres.begin(), genres.end(), d.genre);
    if (it == genres.end()) throw Error("invalid_argument", "finetune: genre '" + d.genre + "' is not a classifier label");
    const auto y = static_cast<std::size_t>(it - genres.begin());
    seen[y] = true;
    (d.split == corpus::Split::train ? train_x : test_x).push_back(prepare_input(d.image));
    (d.split == corpus::Split::train ? train_y : test_y).push_back(y);
  }
  if (std::count(seen.begin(), seen.end(), true) < 2)
    throw Error("invalid_argument", "finetune: corpus must contain at least two genres");
  require(!train_x.empty(), "finetune: no training split records");

  FinetuneResult result{base, {}, 0};
  if (cfg.epochs == 0) return result;

  ParamSet params = base.params();
  auto trains = [&](const std::string& name) { return cfg.all_layers || is_final_layer(name); };
  Adam opt(cfg.learning_rate);
  Rng rng(mix_seed(cfg.seed, 0x6E));
  std::vector<std::size_t> order(train_x.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  double best = -1.0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      ad::Tape tape;
      Binding b(tape, params, trains);
      std::vector<std::size_t> labels;
      std::vector<ad::Var> rows;
      for (std::size_t k = start; k < end; ++k) {
        rows.push_back(classifier_logits(b, tape.constant(train_x[order[k]])));
        labels.push_back(train_y[order[k]]);
      }
      ad::Var loss = ad::scale(ad::mean(ad::pick(ad::log_softmax_rows(ad::stack_rows(rows)), labels)), -1.0);
      if (!std::isfinite(loss.item())) throw Error("diverged", "finetune: non-finite cross-entropy");
      tape.backward(loss);
      opt.step(params, b.gradients());
    }
    GenreClassifier current(base.config(), params);
    EpochAccuracy acc{epoch, accuracy(current, train_x, train_y), accuracy(current, test_x, test_y)};
    result.trace.push_back(acc);
    const double score = test_x.empty() ? acc.train_acc : acc.test_acc;
    if (score > best) {
      best = score;
      result.model = current;
      result.best_epoch = epoch;
    }
  }
  return result;
}

}  // namespace atelier::genre
