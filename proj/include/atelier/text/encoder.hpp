// SPDX-License-Identifier: Apache-2.0
#pragma once

// Text/image encoder pair with word-region attention, global image-text
// similarity, and Gaussian conditioning augmentation.
//
// Parameter names:
//   text.embed [V, E]
//   text.{fwd,bwd}.{wx [E, 4H], wh [H, 4H], b [4H]}   LSTM, gate order i f g o
//   text.sent.{w [D, D], b [D]}                       sentence projection
//   image.c1 / image.c2 / image.c3                    stride-2 3x3 convs
//   ca.mu / ca.lv                                     linear D -> Dc

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "atelier/core/checkpoint.hpp"
#include "atelier/core/params.hpp"
#include "atelier/corpus/vocabulary.hpp"

namespace atelier::text {

inline constexpr double kCosineEps = 1e-8;

struct TextEncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 16;
  std::size_t feature_dim = 32;  // D; each LSTM direction has D / 2 units

  std::size_t hidden() const { return feature_dim / 2; }
};

struct ImageEncoderConfig {
  std::size_t feature_dim = 32;
  std::size_t c1 = 8;
  std::size_t c2 = 16;
  static constexpr std::size_t kStride = 8;
};

inline nlohmann::json to_json(const TextEncoderConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"embed_dim", c.embed_dim}, {"feature_dim", c.feature_dim}};
}
inline TextEncoderConfig text_config_from_json(const nlohmann::json& j) {
  TextEncoderConfig c;
  c.vocab_size = j.at("vocab_size");
  c.embed_dim = j.at("embed_dim");
  c.feature_dim = j.at("feature_dim");
  return c;
}
inline nlohmann::json to_json(const ImageEncoderConfig& c) {
  return {{"feature_dim", c.feature_dim}, {"c1", c.c1}, {"c2", c.c2}};
}
inline ImageEncoderConfig image_config_from_json(const nlohmann::json& j) {
  ImageEncoderConfig c;
  c.feature_dim = j.at("feature_dim");
  c.c1 = j.at("c1");
  c.c2 = j.at("c2");
  return c;
}

// ---------------------------------------------------------------------------
// Initialization

inline ParamSet init_text_encoder(const TextEncoderConfig& cfg, Rng& rng) {
  require(cfg.feature_dim % 2 == 0, "text encoder feature_dim must be even");
  require(cfg.vocab_size > 0, "text encoder needs a vocabulary");
  const std::size_t e = cfg.embed_dim, h = cfg.hidden(), d = cfg.feature_dim;
  ParamSet p;
  p.set("text.embed", rng.normal_tensor({cfg.vocab_size, e}, 0.5));
  for (const char* dir : {"fwd", "bwd"}) {
    const std::string pre = std::string("text.") + dir;
    p.set(pre + ".wx", init::xavier(rng, e, 4 * h));
    p.set(pre + ".wh", init::xavier(rng, h, 4 * h));
    Tensor b({4 * h}, 0.0);
    for (std::size_t i = h; i < 2 * h; ++i) b[i] = 1.0;  // forget gate bias
    p.set(pre + ".b", std::move(b));
  }
  add_linear(p, rng, "text.sent", d, d);
  return p;
}

inline ParamSet init_image_encoder(const ImageEncoderConfig& cfg, Rng& rng) {
  ParamSet p;
  add_conv(p, rng, "image.c1", 3, 3, cfg.c1);
  add_conv(p, rng, "image.c2", 3, cfg.c1, cfg.c2);
  add_conv(p, rng, "image.c3", 3, cfg.c2, cfg.feature_dim);
  return p;
}

inline ParamSet init_condition_augment(std::size_t feature_dim, std::size_t cond_dim, Rng& rng) {
  ParamSet p;
  add_linear(p, rng, "ca.mu", feature_dim, cond_dim, 0.5);
  add_linear(p, rng, "ca.lv", feature_dim, cond_dim, 0.1);
  return p;
}

// ---------------------------------------------------------------------------
// Text encoder

struct TextEncoding {
  ad::Var words;            // [T, D]
  ad::Var sentence;         // [D]
  std::vector<bool> mask;   // true for real tokens, false for PAD
};

namespace detail {

struct LstmState {
  ad::Var h;  // [1, H]
  ad::Var c;  // [1, H]
};

inline LstmState lstm_step(const Binding& p, const std::string& pre, ad::Var x, const LstmState& s, std::size_t hid) {
  using namespace ad;
  Var z = add_bias(add(matmul(x, p[pre + ".wx"]), matmul(s.h, p[pre + ".wh"])), p[pre + ".b"]);
  Var i = sigmoid(slice_last(z, 0, hid));
  Var f = sigmoid(slice_last(z, hid, hid));
  Var g = tanh(slice_last(z, 2 * hid, hid));
  Var o = sigmoid(slice_last(z, 3 * hid, hid));
  Var c = add(mul(f, s.c), mul(i, g));
  return {mul(o, tanh(c)), c};
}

}  // namespace detail

inline TextEncoding encode_text(const Binding& p, const TextEncoderConfig& cfg, const std::vector<std::size_t>& ids) {
  using namespace ad;
  require(!ids.empty(), "encode_text: empty token sequence");
  for (std::size_t id : ids)
    if (id >= cfg.vocab_size)
      throw Error("invalid_argument", "encode_text: token id " + std::to_string(id) + " out of range for vocabulary of " +
                                          std::to_string(cfg.vocab_size));
  Tape& tape = p.tape();
  const std::size_t t_len = ids.size(), hid = cfg.hidden(), e = cfg.embed_dim;
  Var emb = gather_rows(p["text.embed"], ids);
  std::vector<Var> xs;
  for (std::size_t t = 0; t < t_len; ++t) xs.push_back(reshape(row(emb, t), {1, e}));

  const detail::LstmState zero{tape.constant(Tensor({1, hid}, 0.0)), tape.constant(Tensor({1, hid}, 0.0))};
  std::vector<Var> fwd(t_len), bwd(t_len);
  detail::LstmState s = zero;
  for (std::size_t t = 0; t < t_len; ++t) {
    s = detail::lstm_step(p, "text.fwd", xs[t], s, hid);
    fwd[t] = reshape(s.h, {hid});
  }
  s = zero;
  for (std::size_t t = t_len; t-- > 0;) {
    s = detail::lstm_step(p, "text.bwd", xs[t], s, hid);
    bwd[t] = reshape(s.h, {hid});
  }
  TextEncoding out;
  out.words = concat_last({stack_rows(fwd), stack_rows(bwd)});
  out.sentence = dense(p, "text.sent", concat_last({fwd.back(), bwd.front()}));
  for (std::size_t id : ids) out.mask.push_back(id != corpus::Vocabulary::kPad);
  return out;
}

// ---------------------------------------------------------------------------
// Image encoder

struct RegionEncoding {
  ad::Var regions;  // [H/8, W/8, D]
  ad::Var global;   // [D], spatial mean of regions
};

// image: H x W x 3 in [0, 1], H and W multiples of 8.
inline RegionEncoding encode_image_regions(const Binding& p, ad::Var image) {
  using namespace ad;
  const Shape& s = image.shape();
  if (s.size() != 3 || s[2] != 3 || s[0] % ImageEncoderConfig::kStride != 0 || s[1] % ImageEncoderConfig::kStride != 0 ||
      s[0] == 0 || s[1] == 0)
    throw Error("shape_mismatch", "image encoder expects H x W x 3 with H, W multiples of 8, got " + shape_str(s));
  Var x = relu(conv(p, "image.c1", image, 2));
  x = relu(conv(p, "image.c2", x, 2));
  x = conv(p, "image.c3", x, 2);
  return {x, spatial_mean(x)};
}

// ---------------------------------------------------------------------------
// Word-region attention

struct WordRegionAttention {
  ad::Var weights;  // [T, h*w], rows are distributions over regions
  ad::Var context;  // [T, D], attention-weighted region features
};

// Rows for masked (PAD) words are uniform and carry no gradient.
inline WordRegionAttention word_region_attention(ad::Var words, const std::vector<bool>& mask, ad::Var regions) {
  using namespace ad;
  const Shape& rs = regions.shape();
  require(rs.size() == 3 && words.shape().size() == 2 && words.shape()[1] == rs[2],
          "word_region_attention: feature widths disagree");
  Var flat = reshape(regions, {rs[0] * rs[1], rs[2]});
  Var scores = matmul(words, transpose(flat));
  Var attn = softmax_rows(scores, {}, mask);
  return {attn, matmul(attn, flat)};
}

// ---------------------------------------------------------------------------
// Similarity and matching loss

// Cosine similarity matrix S[i][j] = <a_i, b_j> / max(|a_i| |b_j|, eps).
inline ad::Var cosine_matrix(ad::Var a, ad::Var b, double eps = kCosineEps) {
  using namespace ad;
  Var dots = matmul(a, transpose(b));
  Var denom = clamp_min(outer(row_norms(a), row_norms(b)), eps);
  return div(dots, denom);
}

// Global image-text relevance: cosine between the sentence feature and the
// global image feature.
inline ad::Var damsm_similarity(ad::Var sentence, ad::Var global, double eps = kCosineEps) {
  using namespace ad;
  return reshape(cosine_matrix(reshape(sentence, {1, sentence.size()}), reshape(global, {1, global.size()}), eps), {1});
}

// Symmetric cross-entropy over the B x B similarity matrix: the mean
// negative log-posterior of the matching caption for each image plus that of
// the matching image for each caption.
inline ad::Var damsm_loss_from_similarity(ad::Var similarity, double smoothing = 1.0) {
  using namespace ad;
  const Shape& s = similarity.shape();
  require(s.size() == 2 && s[0] == s[1], "damsm_loss: similarity must be square");
  if (s[0] < 2) throw Error("invalid_argument", "damsm_loss: batch size must be >= 2 (no negatives)");
  std::vector<std::size_t> diag(s[0]);
  for (std::size_t i = 0; i < diag.size(); ++i) diag[i] = i;
  Var logits = scale(similarity, smoothing);
  Var text_to_image = mean(pick(log_softmax_rows(logits), diag));
  Var image_to_text = mean(pick(log_softmax_rows(transpose(logits)), diag));
  return scale(add(text_to_image, image_to_text), -1.0);
}

// sentences and globals: B matched pairs of [D] features.
inline ad::Var damsm_loss(const std::vector<ad::Var>& sentences, const std::vector<ad::Var>& globals,
                          double smoothing = 1.0) {
  require(sentences.size() == globals.size(), "damsm_loss: unmatched batch");
  if (sentences.size() < 2) throw Error("invalid_argument", "damsm_loss: batch size must be >= 2 (no negatives)");
  return damsm_loss_from_similarity(cosine_matrix(ad::stack_rows(sentences), ad::stack_rows(globals)), smoothing);
}

// ---------------------------------------------------------------------------
// Conditioning augmentation

// KL(N(mu, diag(exp(log_var))) || N(0, I)) = 0.5 * sum(mu^2 + sigma^2 - 1 - log sigma^2).
inline double kl_gauss_std(const Tensor& mu, const Tensor& log_var) {
  require(mu.size() == log_var.size(), "kl_gauss_std: width mismatch");
  double s = 0.0;
  for (std::size_t d = 0; d < mu.size(); ++d) s += mu[d] * mu[d] + std::exp(log_var[d]) - 1.0 - log_var[d];
  return 0.5 * s;
}

inline ad::Var kl_gauss_std(ad::Var mu, ad::Var log_var) {
  using namespace ad;
  require(mu.shape() == log_var.shape(), "kl_gauss_std: width mismatch");
  Var terms = sub(add(square(mu), exp(log_var)), add_scalar(log_var, 1.0));
  return scale(sum(terms), 0.5);
}

struct ConditionSample {
  ad::Var mu;
  ad::Var log_var;
  ad::Var sample;  // mu + exp(log_var / 2) * eps
  ad::Var kl;      // conditioning-augmentation loss
  Tensor eps;
  std::uint64_t noise_seed = 0;
};

inline Tensor condition_noise(std::size_t dim, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0xCA));
  return rng.normal_tensor({dim});
}

inline ConditionSample condition_augment(const Binding& p, ad::Var sentence, std::uint64_t seed) {
  using namespace ad;
  ConditionSample out;
  out.mu = dense(p, "ca.mu", sentence);
  out.log_var = dense(p, "ca.lv", sentence);
  out.noise_seed = seed;
  out.eps = condition_noise(out.mu.size(), seed);
  Var eps = p.tape().constant(out.eps);
  out.sample = add(out.mu, mul(exp(scale(out.log_var, 0.5)), eps));
  out.kl = kl_gauss_std(out.mu, out.log_var);
  return out;
}

// ---------------------------------------------------------------------------
// Value-level wrappers over an immutable trained encoder pair.

struct WordFeatures {
  Tensor features;  // [T, D]
  std::vector<bool> mask;
};

struct SentenceFeature {
  Tensor features;  // [D]
};

struct RegionFeatures {
  Tensor grid;    // [h, w, D]
  Tensor global;  // [D]
};

struct GaussianCondition {
  Tensor mu;
  Tensor log_var;
  Tensor sample;
  std::uint64_t noise_seed = 0;
};

struct DamsmConfig {
  TextEncoderConfig text;
  ImageEncoderConfig image;
  double smoothing = 1.0;  // logit scale for the matching loss
  std::size_t image_size = 32;
};

inline nlohmann::json to_json(const DamsmConfig& c) {
  return {{"text", to_json(c.text)}, {"image", to_json(c.image)}, {"smoothing", c.smoothing}, {"image_size", c.image_size}};
}
inline DamsmConfig damsm_config_from_json(const nlohmann::json& j) {
  DamsmConfig c;
  c.text = text_config_from_json(j.at("text"));
  c.image = image_config_from_json(j.at("image"));
  c.smoothing = j.at("smoothing");
  c.image_size = j.at("image_size");
  return c;
}

class DamsmModel {
 public:
  DamsmModel(DamsmConfig cfg, ParamSet params, corpus::Vocabulary vocab)
      : cfg_(std::move(cfg)), params_(std::move(params)), vocab_(std::move(vocab)) {
    require(cfg_.text.vocab_size == vocab_.size(), "DAMSM vocabulary size does not match text encoder");
    Rng probe(0);
    ParamSet expected = init_text_encoder(cfg_.text, probe);
    expected.merge(init_image_encoder(cfg_.image, probe));
    require_compatible(expected, params_, "damsm");
  }

  static DamsmModel initialize(const DamsmConfig& cfg, const corpus::Vocabulary& vocab, std::uint64_t seed) {
    DamsmConfig c = cfg;
    c.text.vocab_size = vocab.size();
    c.image.feature_dim = c.text.feature_dim;
    Rng rng(seed);
    ParamSet p = init_text_encoder(c.text, rng);
    p.merge(init_image_encoder(c.image, rng));
    return DamsmModel(c, std::move(p), vocab);
  }

  const DamsmConfig& config() const noexcept { return cfg_; }
  const ParamSet& params() const noexcept { return params_; }
  const corpus::Vocabulary& vocabulary() const noexcept { return vocab_; }

  std::pair<WordFeatures, SentenceFeature> encode_text(const std::vector<std::size_t>& ids) const {
    ad::Tape tape;
    Binding b(tape, params_, false);
    auto enc = text::encode_text(b, cfg_.text, ids);
    return {WordFeatures{enc.words.value(), enc.mask}, SentenceFeature{enc.sentence.value()}};
  }

  std::pair<WordFeatures, SentenceFeature> encode_text(const std::string& caption) const {
    auto ids = vocab_.encode(caption);
    if (ids.empty()) ids.push_back(corpus::Vocabulary::kUnk);
    return encode_text(ids);
  }

  RegionFeatures encode_image(const Tensor& image) const {
    ad::Tape tape;
    Binding b(tape, params_, false);
    auto enc = encode_image_regions(b, tape.constant(image));
    return {enc.regions.value(), enc.global.value()};
  }

  Checkpoint to_checkpoint() const {
    return {"damsm", {{"model", to_json(cfg_)}, {"vocabulary", vocab_.to_json()}}, params_};
  }

  static DamsmModel from_checkpoint(const Checkpoint& ck) {
    if (ck.kind != "damsm") throw Error("incompatible_checkpoint", "expected a damsm checkpoint, got " + ck.kind);
    return DamsmModel(damsm_config_from_json(ck.config.at("model")), ck.params,
                      corpus::Vocabulary::from_json(ck.config.at("vocabulary")));
  }

 private:
  DamsmConfig cfg_;
  ParamSet params_;
  corpus::Vocabulary vocab_;
};

// Image-text relevance score for already-encoded features (cosine of the
// sentence and global image features; word features do not contribute).
inline double damsm_similarity(const WordFeatures&, const SentenceFeature& s, const RegionFeatures& r) {
  ad::Tape tape;
  return damsm_similarity(tape.constant(s.features), tape.constant(r.global)).item();
}

inline double damsm_similarity(const SentenceFeature& s, const RegionFeatures& r) {
  return damsm_similarity(WordFeatures{}, s, r);
}

}  // namespace atelier::text
