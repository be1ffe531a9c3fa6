// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "atelier/core/image.hpp"
#include "atelier/core/optim.hpp"
#include "atelier/text/encoder.hpp"

namespace atelier::text {

struct CaptionedImage {
  Tensor image;  // H x W x 3 in [0, 1]
  std::string caption;
};

struct DamsmTrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  double learning_rate = 2e-3;
  std::uint64_t seed = 0;
};

struct DamsmTrainResult {
  DamsmModel model;
  std::vector<double> epoch_loss;  // mean batch loss per epoch
};

// Joint training of both encoders on the global matching loss. Batches are
// drawn from a seeded shuffle; a trailing batch of size 1 is dropped since it
// has no negatives.
inline DamsmTrainResult train_damsm(const DamsmModel& init, const std::vector<CaptionedImage>& data,
                                    const DamsmTrainConfig& cfg) {
  require(data.size() >= 2, "train_damsm: need at least two captioned images");
  require(cfg.batch_size >= 2, "train_damsm: batch size must be >= 2");
  const DamsmConfig& mc = init.config();
  std::vector<Tensor> images;
  std::vector<std::vector<std::size_t>> ids;
  for (const auto& d : data) {
    images.push_back(resize_bilinear(d.image, mc.image_size, mc.image_size));
    auto t = init.vocabulary().encode(d.caption);
    if (t.empty()) t.push_back(corpus::Vocabulary::kUnk);
    ids.push_back(std::move(t));
  }
  ParamSet params = init.params();
  Adam opt(cfg.learning_rate);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<double> trace;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start + 2 <= order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      ad::Tape tape;
      Binding b(tape, params);
      std::vector<ad::Var> sentences, globals;
      for (std::size_t k = start; k < end; ++k) {
        sentences.push_back(encode_text(b, mc.text, ids[order[k]]).sentence);
        globals.push_back(encode_image_regions(b, tape.constant(images[order[k]])).global);
      }
      ad::Var loss = damsm_loss(sentences, globals, mc.smoothing);
      if (!std::isfinite(loss.item())) throw Error("diverged", "train_damsm: non-finite DAMSM loss");
      tape.backward(loss);
      opt.step(params, b.gradients());
      total += loss.item();
      ++batches;
    }
    trace.push_back(total / static_cast<double>(std::max<std::size_t>(batches, 1)));
  }
  return {DamsmModel(mc, std::move(params), init.vocabulary()), std::move(trace)};
}

}  // namespace atelier::text
