// SPDX-License-Identifier: Apache-2.0
#pragma once

// Adversarial training harness: one conditional discriminator per stage,
// hinge objective, alternating updates with momentum SGD.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "atelier/core/image.hpp"
#include "atelier/core/optim.hpp"
#include "atelier/dmgan/generator.hpp"

namespace atelier::dmgan {

// ---------------------------------------------------------------------------
// Discriminators

inline constexpr std::size_t kDiscGrid = 4;  // feature side before the joint head
inline constexpr std::size_t kDiscCond = 8;  // projected sentence width

inline std::size_t disc_depth(std::size_t side) {
  require(side >= 2 * kDiscGrid && (side & (side - 1)) == 0, "discriminator: image side must be a power of two >= 8");
  std::size_t n = 0;
  for (std::size_t s = side; s > kDiscGrid; s /= 2) ++n;
  return n;
}

inline std::size_t disc_width(std::size_t layer) { return layer == 0 ? 16 : 32; }

inline ParamSet init_discriminators(const GanConfig& cfg, Rng& rng) {
  ParamSet p;
  for (std::size_t st = 0; st < cfg.stages; ++st) {
    const std::string pre = "d" + std::to_string(st) + ".";
    std::size_t cin = 3;
    const std::size_t depth = disc_depth(cfg.image_side(st));
    for (std::size_t l = 0; l < depth; ++l) {
      add_conv(p, rng, pre + "c" + std::to_string(l), 3, cin, disc_width(l));
      cin = disc_width(l);
    }
    add_linear(p, rng, pre + "cond", cfg.word_dim, kDiscCond);
    add_conv(p, rng, pre + "joint", 1, cin + kDiscCond, 16);
    add_linear(p, rng, pre + "out", 16, 1);
  }
  return p;
}

// Real-valued critic score for an image at the given stage, conditioned by
// tiling a projection of the sentence feature over the 4x4 feature map.
inline ad::Var discriminate(const Binding& p, std::size_t stage, ad::Var image, ad::Var sentence) {
  using namespace ad;
  const std::string pre = "d" + std::to_string(stage) + ".";
  const std::size_t depth = disc_depth(image.shape()[0]);
  Var x = image;
  for (std::size_t l = 0; l < depth; ++l) x = leaky_relu(conv(p, pre + "c" + std::to_string(l), x, 2));
  Var cond = broadcast_spatial(dense(p, pre + "cond", sentence), kDiscGrid, kDiscGrid);
  const Shape& s = x.shape();
  Var joint = concat_last({reshape(x, {s[0] * s[1], s[2]}), reshape(cond, {s[0] * s[1], kDiscCond})});
  joint = leaky_relu(conv(p, pre + "joint", reshape(joint, {s[0], s[1], s[2] + kDiscCond})));
  return reshape(dense(p, pre + "out", spatial_mean(joint)), {1});
}

// Hinge objective. With a critic at chance (score 0) the generator term is 0
// and the discriminator term is 2.
inline ad::Var hinge_d_loss(const std::vector<ad::Var>& real, const std::vector<ad::Var>& fake) {
  using namespace ad;
  std::vector<Var> terms;
  for (const auto& r : real) terms.push_back(relu(one_minus(r)));
  Var lr = mean(concat_last(terms));
  terms.clear();
  for (const auto& f : fake) terms.push_back(relu(add_scalar(f, 1.0)));
  return add(lr, mean(concat_last(terms)));
}

inline ad::Var hinge_g_loss(const std::vector<ad::Var>& fake) {
  return ad::scale(ad::mean(ad::concat_last(fake)), -1.0);
}

// ---------------------------------------------------------------------------
// Training

struct GanTrainConfig {
  std::size_t stages = 2;  // stages trained (<= model stages)
  std::size_t batch_size = 4;
  double lr_g = 2e-3;
  double lr_d = 2e-3;
  double momentum = 0.9;
  double lambda_adv = 1.0;
  double lambda_ca = 1.0;
  double lambda_damsm = 1.0;
  double lambda_rec = 0.0;  // pixel reconstruction against the real pyramid
  double grad_clip = 5.0;
  bool train_discriminator = true;
  bool fixed_noise = false;  // reuse noise seed `seed` for every sample and step
  std::uint64_t seed = 0;
};

struct GanLosses {
  double generator = 0.0;
  double discriminator = 0.0;
  double ca = 0.0;
  double damsm = 0.0;
  double reconstruction = 0.0;
  std::vector<double> stage_generator;      // adversarial term per stage
  std::vector<double> stage_discriminator;  // hinge loss per stage
};

struct GanExample {
  Tensor image;  // H x W x 3 in [0, 1], H = W = power of two >= final stage side
  std::string caption;
};

inline Tensor pyramid_level(const Tensor& image, std::size_t side) {
  const std::size_t h = image.shape()[0];
  Tensor out = (h % side == 0 && image.shape()[1] == h) ? downsample(image, h / side) : resize_bilinear(image, side, side);
  return to_signed_range(out);
}

class GanTrainer {
 public:
  GanTrainer(text::DamsmModel damsm, DmGanModel init, GanTrainConfig cfg)
      : damsm_(std::move(damsm)),
        gan_cfg_(init.config()),
        gen_(init.params()),
        cfg_(cfg),
        opt_g_(cfg.lr_g, cfg.momentum),
        opt_d_(cfg.lr_d, cfg.momentum) {
    require_pairing(damsm_, init);
    require(cfg_.stages >= 1 && cfg_.stages <= gan_cfg_.stages, "train_gan: stages out of range");
    Rng rng(mix_seed(cfg.seed, 0xD1));
    disc_ = init_discriminators(gan_cfg_, rng);
  }

  DmGanModel model() const { return DmGanModel(gan_cfg_, gen_); }
  ParamSet& discriminator_params() { return disc_; }
  const text::DamsmModel& damsm() const { return damsm_; }
  std::size_t steps_taken() const noexcept { return step_; }

  GanLosses train_step(const std::vector<GanExample>& batch) {
    require(!batch.empty(), "train_step: empty batch");
    using namespace ad;
    const std::size_t n_stages = cfg_.stages;
    const std::size_t bsz = batch.size();
    GanLosses out;
    out.stage_generator.assign(n_stages, 0.0);
    out.stage_discriminator.assign(n_stages, 0.0);

    // Generator pass. The critic is bound frozen here.
    Tape tape;
    Binding g(tape, gen_);
    Binding d_frozen(tape, disc_, false);
    Binding damsm_frozen(tape, damsm_.params(), false);
    std::vector<std::vector<Tensor>> fakes(n_stages);
    std::vector<Tensor> sentences;
    std::vector<std::vector<Var>> fake_scores_per_stage(n_stages);
    std::vector<Var> ca_terms, rec_terms, damsm_sent, damsm_glob;
    for (std::size_t b = 0; b < bsz; ++b) {
      const auto [words, sentence] = damsm_.encode_text(batch[b].caption);
      sentences.push_back(sentence.features);
      Var sent = tape.constant(sentence.features);
      const std::uint64_t noise_seed = cfg_.fixed_noise ? cfg_.seed : mix_seed(cfg_.seed, step_ * 1000003ULL + b);
      ForwardPass fp = run_generator(g, gan_cfg_, n_stages, tape.constant(words.features), words.mask, sent, noise_seed);
      ca_terms.push_back(reshape(fp.condition.kl, {1}));
      for (std::size_t st = 0; st < n_stages; ++st) {
        Var img = fp.stages[st].image;
        fakes[st].push_back(img.value());
        fake_scores_per_stage[st].push_back(discriminate(d_frozen, st, img, sent));
        if (cfg_.lambda_rec != 0.0) {
          Var target = tape.constant(pyramid_level(batch[b].image, gan_cfg_.image_side(st)));
          rec_terms.push_back(reshape(mean(square(sub(img, target))), {1}));
        }
      }
      if (cfg_.lambda_damsm != 0.0 && bsz >= 2) {
        Var unit = scale(add_scalar(fp.stages.back().image, 1.0), 0.5);
        while (unit.shape()[0] < damsm_.config().image_size) unit = upsample_nearest2(unit);
        damsm_sent.push_back(sent);
        damsm_glob.push_back(text::encode_image_regions(damsm_frozen, unit).global);
      }
    }
    Var adv = tape.constant(Tensor::scalar(0.0));
    for (std::size_t st = 0; st < n_stages; ++st) {
      Var term = hinge_g_loss(fake_scores_per_stage[st]);
      out.stage_generator[st] = term.item();
      adv = add(adv, term);
    }
    Var ca = mean(concat_last(ca_terms));
    Var total = add(scale(adv, cfg_.lambda_adv), scale(ca, cfg_.lambda_ca));
    out.ca = ca.item();
    if (!damsm_sent.empty()) {
      Var dl = text::damsm_loss(damsm_sent, damsm_glob, damsm_.config().smoothing);
      out.damsm = dl.item();
      total = add(total, scale(dl, cfg_.lambda_damsm));
    }
    if (!rec_terms.empty()) {
      Var rec = mean(concat_last(rec_terms));
      out.reconstruction = rec.item();
      total = add(total, scale(rec, cfg_.lambda_rec));
    }
    out.generator = total.item();
    check_finite("adversarial (generator)", adv.item());
    check_finite("conditioning augmentation", out.ca);
    check_finite("DAMSM", out.damsm);
    check_finite("reconstruction", out.reconstruction);
    tape.backward(total);
    Gradients gg = g.gradients();
    if (!all_finite(gg)) throw Error("diverged", "non-finite generator gradient at step " + std::to_string(step_));
    clip_global_norm(gg, cfg_.grad_clip);

    // Critic pass on real images and the (pre-update) fakes.
    {
      Tape dt;
      Binding d(dt, disc_, cfg_.train_discriminator);
      Var dtotal = dt.constant(Tensor::scalar(0.0));
      for (std::size_t st = 0; st < n_stages; ++st) {
        std::vector<Var> real, fake;
        for (std::size_t b = 0; b < bsz; ++b) {
          Var sent = dt.constant(sentences[b]);
          real.push_back(
              discriminate(d, st, dt.constant(pyramid_level(batch[b].image, gan_cfg_.image_side(st))), sent));
          fake.push_back(discriminate(d, st, dt.constant(fakes[st][b]), sent));
        }
        Var term = hinge_d_loss(real, fake);
        out.stage_discriminator[st] = term.item();
        dtotal = add(dtotal, term);
      }
      out.discriminator = dtotal.item();
      check_finite("adversarial (discriminator)", out.discriminator);
      if (cfg_.train_discriminator) {
        dt.backward(dtotal);
        Gradients gd = d.gradients();
        if (!all_finite(gd)) throw Error("diverged", "non-finite discriminator gradient at step " + std::to_string(step_));
        clip_global_norm(gd, cfg_.grad_clip);
        opt_d_.step(disc_, gd);
      }
    }
    opt_g_.step(gen_, gg);
    ++step_;
    return out;
  }

 private:
  void check_finite(const char* term, double v) const {
    if (!std::isfinite(v))
      throw Error("diverged", std::string("non-finite ") + term + " loss at step " + std::to_string(step_));
  }

  text::DamsmModel damsm_;
  GanConfig gan_cfg_;
  ParamSet gen_;
  ParamSet disc_;
  GanTrainConfig cfg_;
  SgdMomentum opt_g_, opt_d_;
  std::size_t step_ = 0;
};

struct GanTrainResult {
  DmGanModel model;
  std::vector<GanLosses> trace;
};

// Runs `steps` updates on batches drawn by a seeded shuffle of `data`.
inline GanTrainResult train_gan(const text::DamsmModel& damsm, const DmGanModel& init,
                                const std::vector<GanExample>& data, std::size_t steps, const GanTrainConfig& cfg,
                                const std::function<void(std::size_t, const GanLosses&)>& on_step = {}) {
  require(!data.empty(), "train_gan: empty dataset");
  GanTrainer trainer(damsm, init, cfg);
  Rng rng(mix_seed(cfg.seed, 0xBA));
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();
  std::vector<GanLosses> trace;
  for (std::size_t s = 0; s < steps; ++s) {
    std::vector<GanExample> batch;
    while (batch.size() < std::min(cfg.batch_size, data.size())) {
      if (cursor == order.size()) {
        rng.shuffle(order.begin(), order.end());
        cursor = 0;
      }
      batch.push_back(data[order[cursor++]]);
    }
    trace.push_back(trainer.train_step(batch));
    if (on_step) on_step(s, trace.back());
  }
  return {trainer.model(), std::move(trace)};
}

}  // namespace atelier::dmgan
