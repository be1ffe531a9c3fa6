// SPDX-License-Identifier: Apache-2.0
#pragma once

// Two-stage-and-up text-to-image generator. Stage 0 maps (noise, condition)
// to a coarse feature grid; every later stage refines the previous grid with
// a key-value memory over the caption's word features and doubles its side.
//
// Tensors are H x W x C. Images leave the renderer in [-1, 1].

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "atelier/core/checkpoint.hpp"
#include "atelier/text/encoder.hpp"

namespace atelier::dmgan {

struct GanConfig {
  std::size_t z_dim = 16;
  std::size_t cond_dim = 16;
  std::size_t channels = 32;   // C, also the memory value width
  std::size_t key_dim = 16;
  std::size_t word_dim = 32;   // must equal the text encoder feature width
  std::size_t init_size = 8;
  std::size_t stages = 3;      // including the initial stage
  std::size_t residual_blocks = 1;

  std::size_t image_side(std::size_t stage) const { return init_size << stage; }
};

inline nlohmann::json to_json(const GanConfig& c) {
  return {{"z_dim", c.z_dim},       {"cond_dim", c.cond_dim}, {"channels", c.channels},
          {"key_dim", c.key_dim},   {"word_dim", c.word_dim}, {"init_size", c.init_size},
          {"stages", c.stages},     {"residual_blocks", c.residual_blocks}};
}

inline GanConfig gan_config_from_json(const nlohmann::json& j) {
  GanConfig c;
  c.z_dim = j.at("z_dim");
  c.cond_dim = j.at("cond_dim");
  c.channels = j.at("channels");
  c.key_dim = j.at("key_dim");
  c.word_dim = j.at("word_dim");
  c.init_size = j.at("init_size");
  c.stages = j.at("stages");
  c.residual_blocks = j.at("residual_blocks");
  return c;
}

inline std::string stage_prefix(std::size_t stage) { return "g" + std::to_string(stage) + "."; }

// ---------------------------------------------------------------------------
// Parameters

inline void init_refine_stage(ParamSet& p, Rng& rng, const GanConfig& cfg, std::size_t stage) {
  const std::string pre = stage_prefix(stage);
  const std::size_t c = cfg.channels, d = cfg.word_dim, k = cfg.key_dim;
  add_linear(p, rng, pre + "mw.gate_w", d, 1);
  add_linear(p, rng, pre + "mw.gate_r", c, 1);
  p.set(pre + "mw.key.w", init::xavier(rng, d, k));  // no bias: it would cancel in the softmax
  add_linear(p, rng, pre + "mw.val_w", d, c);
  add_linear(p, rng, pre + "mw.val_r", c, c);
  add_linear(p, rng, pre + "ka.query", c, k);
  add_linear(p, rng, pre + "rs.proj", c, c);
  add_linear(p, rng, pre + "rs.gate_o", c, c);
  add_linear(p, rng, pre + "rs.gate_r", c, c);
  for (std::size_t r = 0; r < cfg.residual_blocks; ++r) {
    const std::string res = pre + "res" + std::to_string(r);
    add_conv(p, rng, res + ".c1", 3, c, c);
    add_conv(p, rng, res + ".c2", 3, c, c, 0.5);
  }
  add_conv(p, rng, pre + "up", 3, c, c);
  add_conv(p, rng, pre + "render", 3, c, 3, 0.5);
}

inline ParamSet init_generator(const GanConfig& cfg, Rng& rng) {
  require(cfg.stages >= 1, "generator needs at least one stage");
  ParamSet p = text::init_condition_augment(cfg.word_dim, cfg.cond_dim, rng);
  const std::size_t s = cfg.init_size, c = cfg.channels;
  add_linear(p, rng, "g0.fc", cfg.z_dim + cfg.cond_dim, s * s * c);
  add_conv(p, rng, "g0.conv", 3, c, c);
  add_conv(p, rng, "g0.render", 3, c, 3, 0.5);
  for (std::size_t i = 1; i < cfg.stages; ++i) init_refine_stage(p, rng, cfg, i);
  return p;
}

// ---------------------------------------------------------------------------
// Stage 0

struct StageImage {
  ad::Var feature;  // R_i, [h, w, C]
  ad::Var image;    // x_i, [2^k h, 2^k w, 3] in [-1, 1]
};

inline ad::Var render(const Binding& p, const std::string& name, ad::Var feature) {
  return ad::tanh(conv(p, name, feature));
}

inline StageImage initial_stage(const Binding& p, const GanConfig& cfg, ad::Var z, ad::Var c) {
  using namespace ad;
  if (z.size() != cfg.z_dim || c.size() != cfg.cond_dim)
    throw Error("shape_mismatch", "initial_stage: expected noise width " + std::to_string(cfg.z_dim) +
                                      " and condition width " + std::to_string(cfg.cond_dim) + ", got " +
                                      std::to_string(z.size()) + " and " + std::to_string(c.size()));
  const std::size_t s = cfg.init_size;
  Var x = relu(dense(p, "g0.fc", concat_last({z, c})));
  x = relu(conv(p, "g0.conv", reshape(x, {s, s, cfg.channels})));
  return {x, render(p, "g0.render", x)};
}

// ---------------------------------------------------------------------------
// Memory steps

struct Memory {
  ad::Var keys;    // [T, Dk]
  ad::Var values;  // [T, C]
  ad::Var gates;   // [T], write gate per word
  std::vector<bool> mask;
};

// gate_i = logistic(a . w_i + b . mean(R) + bias)
// value_i = gate_i * V_w w_i + (1 - gate_i) * V_r mean(R)
// key_i = M_k w_i
inline Memory memory_write(const Binding& p, const std::string& pre, ad::Var words, const std::vector<bool>& mask,
                           ad::Var feature) {
  using namespace ad;
  require(words.value().rank() == 2 && feature.value().rank() == 3, "memory_write: expects [T, D] words and HWC feature",
          "shape_mismatch");
  const std::size_t t_len = words.shape()[0];
  require(mask.size() == t_len, "memory_write: mask length");
  Var rbar = spatial_mean(feature);
  Var gate_logit = add(dense(p, pre + "mw.gate_w", words), broadcast_rows(dense(p, pre + "mw.gate_r", rbar), t_len));
  Var gates = reshape(sigmoid(gate_logit), {t_len});
  Var from_words = dense(p, pre + "mw.val_w", words);
  Var from_image = broadcast_rows(dense(p, pre + "mw.val_r", rbar), t_len);
  Var values = add(mul_rows(from_words, gates), mul_rows(from_image, one_minus(gates)));
  return {matmul(words, p[pre + "mw.key.w"]), values, gates, mask};
}

// Softmax over slots of query(r_p) . key_t for every location p -> [h*w, T].
inline ad::Var key_address(const Binding& p, const std::string& pre, const Memory& mem, ad::Var feature) {
  using namespace ad;
  const Shape& s = feature.shape();
  Var q = dense(p, pre + "ka.query", reshape(feature, {s[0] * s[1], s[2]}));
  return softmax_rows(matmul(q, transpose(mem.keys)), mem.mask);
}

// Per location, the address-weighted sum of slot values -> [h, w, C].
inline ad::Var value_read(const Memory& mem, ad::Var weights, std::size_t h, std::size_t w) {
  using namespace ad;
  require(weights.shape().size() == 2 && weights.shape()[0] == h * w && weights.shape()[1] == mem.values.shape()[0],
          "value_read: weights must be [h*w, T]", "shape_mismatch");
  return reshape(matmul(weights, mem.values), {h, w, mem.values.shape()[1]});
}

struct Response {
  ad::Var feature;    // new R
  ad::Var gate;       // [h*w, C]
  ad::Var projected;  // o' = P o, [h*w, C]
};

// o' = P o + b; g = logistic(G_o o' + G_r r); R_new = g * o' + (1 - g) * r
inline Response respond(const Binding& p, const std::string& pre, ad::Var response, ad::Var feature) {
  using namespace ad;
  const Shape& s = feature.shape();
  require(response.shape() == s, "respond: response and feature shapes differ", "shape_mismatch");
  const std::size_t n = s[0] * s[1];
  Var r = reshape(feature, {n, s[2]});
  Var o = dense(p, pre + "rs.proj", reshape(response, {n, s[2]}));
  Var g = sigmoid(add(dense(p, pre + "rs.gate_o", o), dense(p, pre + "rs.gate_r", r)));
  Var out = add(mul(g, o), mul(one_minus(g), r));
  return {reshape(out, s), g, o};
}

// x + conv(relu(conv(x))), no output activation.
inline ad::Var residual_block(const Binding& p, const std::string& name, ad::Var x) {
  return ad::add(x, conv(p, name + ".c2", ad::relu(conv(p, name + ".c1", x))));
}

// Nearest-neighbour doubling followed by a learned 3x3 convolution.
inline ad::Var upsample(const Binding& p, const std::string& name, ad::Var x) {
  return conv(p, name, ad::upsample_nearest2(x));
}

struct RefineOutput {
  StageImage out;
  Memory memory;
  ad::Var address;  // [h*w, T]
  Response response;
};

inline RefineOutput refine_stage(const Binding& p, const GanConfig& cfg, std::size_t stage, ad::Var prev_feature,
                                 ad::Var words, const std::vector<bool>& mask) {
  using namespace ad;
  require(stage >= 1 && stage < cfg.stages, "refine_stage: stage " + std::to_string(stage) + " not configured");
  const std::string pre = stage_prefix(stage);
  const Shape& s = prev_feature.shape();
  Memory mem = memory_write(p, pre, words, mask, prev_feature);
  Var address = key_address(p, pre, mem, prev_feature);
  Var read = value_read(mem, address, s[0], s[1]);
  Response resp = respond(p, pre, read, prev_feature);
  Var x = resp.feature;
  for (std::size_t r = 0; r < cfg.residual_blocks; ++r) x = residual_block(p, pre + "res" + std::to_string(r), x);
  x = upsample(p, pre + "up", x);
  return {{x, render(p, pre + "render", x)}, mem, address, resp};
}

// ---------------------------------------------------------------------------
// Whole generator on a tape

inline Tensor sample_noise(std::size_t dim, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x2A));
  return rng.normal_tensor({dim});
}

inline std::uint64_t condition_seed(std::uint64_t seed) { return mix_seed(seed, 0xC0); }

struct ForwardPass {
  text::ConditionSample condition;
  std::vector<StageImage> stages;
};

inline ForwardPass run_generator(const Binding& p, const GanConfig& cfg, std::size_t n_stages, ad::Var words,
                                 const std::vector<bool>& mask, ad::Var sentence, std::uint64_t seed) {
  require(n_stages >= 1 && n_stages <= cfg.stages,
          "n_stages must be in [1, " + std::to_string(cfg.stages) + "], got " + std::to_string(n_stages));
  ForwardPass fp;
  fp.condition = text::condition_augment(p, sentence, condition_seed(seed));
  ad::Var z = p.tape().constant(sample_noise(cfg.z_dim, seed));
  fp.stages.push_back(initial_stage(p, cfg, z, fp.condition.sample));
  for (std::size_t i = 1; i < n_stages; ++i)
    fp.stages.push_back(refine_stage(p, cfg, i, fp.stages.back().feature, words, mask).out);
  return fp;
}

// ---------------------------------------------------------------------------
// Immutable model and generation

struct GeneratedImage {
  Tensor image;  // [side, side, 3] in [-1, 1]
  std::size_t stage = 0;
  std::uint64_t seed = 0;
  std::string text;
  std::string checkpoint_id;        // generator
  std::string text_checkpoint_id;   // text encoder

  nlohmann::json provenance() const {
    return {{"stage", stage},  {"seed", seed}, {"text", text}, {"checkpoint_id", checkpoint_id},
            {"text_checkpoint_id", text_checkpoint_id}, {"side", image.shape()[0]}};
  }
};

class DmGanModel {
 public:
  DmGanModel(GanConfig cfg, ParamSet params) : cfg_(cfg), params_(std::move(params)) {
    Rng probe(0);
    require_compatible(init_generator(cfg_, probe), params_, "dmgan");
  }

  static DmGanModel initialize(const GanConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    return DmGanModel(cfg, init_generator(cfg, rng));
  }

  const GanConfig& config() const noexcept { return cfg_; }
  const ParamSet& params() const noexcept { return params_; }

  Checkpoint to_checkpoint() const { return {"dmgan", {{"model", to_json(cfg_)}}, params_}; }

  static DmGanModel from_checkpoint(const Checkpoint& ck) {
    if (ck.kind != "dmgan") throw Error("incompatible_checkpoint", "expected a dmgan checkpoint, got " + ck.kind);
    return DmGanModel(gan_config_from_json(ck.config.at("model")), ck.params);
  }

 private:
  GanConfig cfg_;
  ParamSet params_;
};

inline void require_pairing(const text::DamsmModel& damsm, const DmGanModel& gan) {
  if (damsm.config().text.feature_dim != gan.config().word_dim)
    throw Error("incompatible_checkpoint", "generator expects word features of width " +
                                               std::to_string(gan.config().word_dim) + " but the text encoder produces " +
                                               std::to_string(damsm.config().text.feature_dim));
}

// One image per stage; stage i has side init_size * 2^i. Words missing from
// the vocabulary encode as UNK.
inline std::vector<GeneratedImage> generate(const std::string& caption, std::uint64_t seed, std::size_t n_stages,
                                            const text::DamsmModel& damsm, const DmGanModel& gan) {
  require_pairing(damsm, gan);
  const auto [words, sentence] = damsm.encode_text(caption);
  ad::Tape tape;
  Binding b(tape, gan.params(), false);
  const ForwardPass fp = run_generator(b, gan.config(), n_stages, tape.constant(words.features), words.mask,
                                       tape.constant(sentence.features), seed);
  const std::string gid = checkpoint_id(gan.to_checkpoint());
  const std::string tid = checkpoint_id(damsm.to_checkpoint());
  std::vector<GeneratedImage> out;
  for (std::size_t i = 0; i < fp.stages.size(); ++i)
    out.push_back({fp.stages[i].image.value(), i, seed, caption, gid, tid});
  return out;
}

}  // namespace atelier::dmgan
