// SPDX-License-Identifier: Apache-2.0
#pragma once

// Style prediction network, CIN transfer network, optimization-based
// stylizer and chaining.
//
// Transfer net (every conv but the last is followed by CIN):
//   enc1 3x3 3->w1, relu | enc2 3x3 w1->w2 stride 2, relu
//   res{r}: c1 relu, c2, add | upsample x2 | dec1 3x3 w2->w1, relu
//   out 3x3 w1->3, sigmoid
// The style vector holds [gamma..., beta...] for each normalized layer in
// that order.

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "atelier/core/checkpoint.hpp"
#include "atelier/core/hash.hpp"
#include "atelier/core/image.hpp"
#include "atelier/core/optim.hpp"
#include "atelier/styler/features.hpp"

namespace atelier::styler {

struct StylerConfig {
  std::size_t w1 = 8, w2 = 16;
  std::size_t residual_blocks = 1;
  std::size_t predictor_hidden = 32;
  std::size_t predictor_input = 32;  // style images are resized to this square
};

inline nlohmann::json to_json(const StylerConfig& c) {
  return {{"w1", c.w1}, {"w2", c.w2}, {"residual_blocks", c.residual_blocks},
          {"predictor_hidden", c.predictor_hidden}, {"predictor_input", c.predictor_input}};
}

inline StylerConfig styler_config_from_json(const nlohmann::json& j) {
  StylerConfig c;
  c.w1 = j.at("w1");
  c.w2 = j.at("w2");
  c.residual_blocks = j.at("residual_blocks");
  c.predictor_hidden = j.at("predictor_hidden");
  c.predictor_input = j.at("predictor_input");
  return c;
}

struct NormLayer {
  std::string name;
  std::size_t cin, cout;
};

inline std::vector<NormLayer> normalized_layers(const StylerConfig& c) {
  std::vector<NormLayer> out = {{"enc1", 3, c.w1}, {"enc2", c.w1, c.w2}};
  for (std::size_t r = 0; r < c.residual_blocks; ++r) {
    out.push_back({"res" + std::to_string(r) + ".c1", c.w2, c.w2});
    out.push_back({"res" + std::to_string(r) + ".c2", c.w2, c.w2});
  }
  out.push_back({"dec1", c.w2, c.w1});
  return out;
}

inline std::size_t normalized_channels(const StylerConfig& c) {
  std::size_t n = 0;
  for (const auto& l : normalized_layers(c)) n += l.cout;
  return n;
}

inline std::size_t style_vector_length(const StylerConfig& c) { return 2 * normalized_channels(c); }

// Normalized convs carry no bias: instance norm would cancel it.
inline ParamSet init_transfer(const StylerConfig& c, Rng& rng) {
  ParamSet p;
  for (const auto& l : normalized_layers(c)) p.set("t." + l.name + ".k", init::he_conv(rng, 3, l.cin, l.cout));
  add_conv(p, rng, "t.out", 3, c.w1, 3, 0.5);
  return p;
}

inline ParamSet init_predictor(const StylerConfig& c, Rng& rng) {
  ParamSet p;
  add_conv(p, rng, "p.c1", 3, 3, 8);
  add_conv(p, rng, "p.c2", 3, 8, 16);
  add_linear(p, rng, "p.fc1", 16, c.predictor_hidden);
  add_linear(p, rng, "p.fc2", c.predictor_hidden, style_vector_length(c), 0.1);
  // Start from the identity affine: gamma = 1, beta = 0.
  Tensor& b = p.at("p.fc2.b");
  std::size_t off = 0;
  for (const auto& l : normalized_layers(c)) {
    for (std::size_t k = 0; k < l.cout; ++k) b[off + k] = 1.0;
    off += 2 * l.cout;
  }
  return p;
}

inline ad::Var predictor_forward(const Binding& p, ad::Var style_image) {
  using namespace ad;
  Var x = relu(conv(p, "p.c1", style_image, 2));
  x = relu(conv(p, "p.c2", x, 2));
  return dense(p, "p.fc2", relu(dense(p, "p.fc1", spatial_mean(x))));
}

inline ad::Var cin_conv(const Binding& p, const std::string& name, ad::Var x, ad::Var vec, std::size_t& offset,
                        std::size_t stride = 1) {
  using namespace ad;
  const Var k = p["t." + name + ".k"];
  const std::size_t c = k.shape()[3];
  Var f = conv2d(x, k, p.tape().constant(Tensor({c}, 0.0)), stride, 1);
  Var y = conditional_instance_norm(f, slice_last(vec, offset, c), slice_last(vec, offset + c, c));
  offset += 2 * c;
  return y;
}

// content: H x W x 3 with even H, W.
inline ad::Var transfer_forward(const Binding& p, const StylerConfig& c, ad::Var content, ad::Var vec) {
  using namespace ad;
  require(vec.size() == style_vector_length(c),
          "style vector has length " + std::to_string(vec.size()) + ", transfer net expects " +
              std::to_string(style_vector_length(c)),
          "shape_mismatch");
  std::size_t off = 0;
  Var x = relu(cin_conv(p, "enc1", content, vec, off));
  x = relu(cin_conv(p, "enc2", x, vec, off, 2));
  for (std::size_t r = 0; r < c.residual_blocks; ++r) {
    const std::string n = "res" + std::to_string(r);
    Var h = relu(cin_conv(p, n + ".c1", x, vec, off));
    x = add(x, cin_conv(p, n + ".c2", h, vec, off));
  }
  x = relu(cin_conv(p, "dec1", upsample_nearest2(x), vec, off));
  return sigmoid(conv(p, "t.out", x));
}

inline Tensor predictor_input(const Tensor& image, const StylerConfig& c) {
  require(image.rank() == 3 && image.shape()[2] == 3, "style image must be H x W x 3", "bad_image");
  return resize_bilinear(image, c.predictor_input, c.predictor_input);
}

struct StyleVector {
  Tensor values;
  std::string source;  // provenance of the style image (path or content hash)

  nlohmann::json to_json() const { return {{"source", source}, {"length", values.size()}}; }
};

class StylePredictor {
 public:
  StylePredictor(StylerConfig cfg, ParamSet params) : cfg_(cfg), params_(std::move(params)) {
    Rng probe(0);
    require_compatible(init_predictor(cfg_, probe), params_, "style predictor");
  }

  static StylePredictor initialize(const StylerConfig& cfg, std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0x9E));
    return StylePredictor(cfg, init_predictor(cfg, rng));
  }

  const StylerConfig& config() const noexcept { return cfg_; }
  const ParamSet& params() const noexcept { return params_; }

  StyleVector predict(const Tensor& style_image, std::string source = {}) const {
    ad::Tape tape;
    Binding b(tape, params_, false);
    const Tensor in = predictor_input(style_image, cfg_);
    if (source.empty()) source = "sha256:" + sha256_hex(encode_png(style_image));
    return {predictor_forward(b, tape.constant(in)).value(), std::move(source)};
  }

  Checkpoint to_checkpoint() const { return {"style_predictor", {{"model", to_json(cfg_)}}, params_}; }

  static StylePredictor from_checkpoint(const Checkpoint& ck) {
    if (ck.kind != "style_predictor")
      throw Error("incompatible_checkpoint", "expected a style_predictor checkpoint, got " + ck.kind);
    return StylePredictor(styler_config_from_json(ck.config.at("model")), ck.params);
  }

 private:
  StylerConfig cfg_;
  ParamSet params_;
};

class TransferNet {
 public:
  TransferNet(StylerConfig cfg, ParamSet params) : cfg_(cfg), params_(std::move(params)) {
    Rng probe(0);
    require_compatible(init_transfer(cfg_, probe), params_, "style transfer network");
  }

  static TransferNet initialize(const StylerConfig& cfg, std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0x7F));
    return TransferNet(cfg, init_transfer(cfg, rng));
  }

  const StylerConfig& config() const noexcept { return cfg_; }
  const ParamSet& params() const noexcept { return params_; }

  Checkpoint to_checkpoint() const { return {"style_transfer", {{"model", to_json(cfg_)}}, params_}; }

  static TransferNet from_checkpoint(const Checkpoint& ck) {
    if (ck.kind != "style_transfer")
      throw Error("incompatible_checkpoint", "expected a style_transfer checkpoint, got " + ck.kind);
    return TransferNet(styler_config_from_json(ck.config.at("model")), ck.params);
  }

 private:
  StylerConfig cfg_;
  ParamSet params_;
};

// Odd sizes are resized up to even for the network and back afterwards.
inline Tensor stylize_feedforward(const Tensor& content, const StyleVector& s, const TransferNet& net) {
  require(content.rank() == 3 && content.shape()[2] == 3 && content.shape()[0] >= 4 && content.shape()[1] >= 4,
          "content image must be H x W x 3 with H, W >= 4", "bad_image");
  const std::size_t h = content.shape()[0], w = content.shape()[1];
  const std::size_t he = h + h % 2, we = w + w % 2;
  const Tensor in = (he == h && we == w) ? content : resize_bilinear(content, he, we);
  ad::Tape tape;
  Binding b(tape, net.params(), false);
  Tensor out = transfer_forward(b, net.config(), tape.constant(in), tape.constant(s.values)).value();
  return (he == h && we == w) ? out : resize_bilinear(out, h, w);
}

// ---------------------------------------------------------------------------
// Optimization-based stylization

struct LossWeights {
  double content = 1.0;
  double style = 1e-2;

  void validate() const {
    require(content >= 0.0 && style >= 0.0 && (content > 0.0 || style > 0.0),
            "loss weights must be non-negative and not both zero");
  }
};

struct OptimizeConfig {
  LossWeights weights;
  std::size_t iterations = 200;
  double step = 20.0;  // fixed pixel step, pinned for the 16x16 toy extractor at default weights
  std::vector<std::string> content_layers = default_content_layers();
  std::vector<std::string> style_layers = default_style_layers();
};

struct OptimizeResult {
  Tensor image;                 // best iterate
  std::vector<double> trace;    // total loss of iterate 0 (the content) .. iterations
  std::vector<double> best_so_far;
  std::size_t best_iteration = 0;
  double initial_style_loss = 0.0;
  double best_style_loss = 0.0;
};

struct StyleLossTerms {
  double content = 0.0, style = 0.0, total = 0.0;
};

inline StyleLossTerms evaluate_losses(const FeatureExtractor& fx, const Tensor& x, const Tensor& content,
                                      const Tensor& style, const OptimizeConfig& cfg) {
  const double lc = content_loss(fx.extract(x, cfg.content_layers), fx.extract(content, cfg.content_layers));
  const double ls = style_loss(fx.extract(x, cfg.style_layers), fx.extract(style, cfg.style_layers));
  return {lc, ls, cfg.weights.content * lc + cfg.weights.style * ls};
}

// Gradient descent on the pixels of x, starting at the content image, with
// pixels clamped to [0, 1] after each step.
inline OptimizeResult stylize_optimize(const Tensor& content, const Tensor& style, const OptimizeConfig& cfg,
                                       const FeatureExtractor& fx = FeatureExtractor()) {
  require(cfg.iterations >= 1, "stylize_optimize: iterations must be >= 1");
  cfg.weights.validate();
  check_tags(cfg.content_layers);
  check_tags(cfg.style_layers);
  const FeatureMaps content_t = fx.extract(content, cfg.content_layers);
  const FeatureMaps style_t = fx.extract(style, cfg.style_layers);

  OptimizeResult r;
  Tensor x = content;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t it = 0; it <= cfg.iterations; ++it) {
    ad::Tape tape;
    Binding b(tape, fx.params(), false);
    ad::Var xv = tape.variable(x);
    ad::Var ls = style_loss(extract_features(b, xv, cfg.style_layers), as_constants(tape, style_t));
    ad::Var lc = content_loss(extract_features(b, xv, cfg.content_layers), as_constants(tape, content_t));
    ad::Var total = ad::add(ad::scale(lc, cfg.weights.content), ad::scale(ls, cfg.weights.style));
    const double loss = total.item();
    if (!std::isfinite(loss)) {
      std::string tail;
      for (std::size_t k = r.trace.size() > 3 ? r.trace.size() - 3 : 0; k < r.trace.size(); ++k)
        tail += (tail.empty() ? "" : ", ") + std::to_string(r.trace[k]);
      throw Error("diverged", "stylize_optimize: non-finite loss at iteration " + std::to_string(it) +
                                  " (trace tail: " + tail + ")");
    }
    r.trace.push_back(loss);
    if (it == 0) r.initial_style_loss = ls.item();
    if (loss < best) {
      best = loss;
      r.image = x;
      r.best_iteration = it;
      r.best_style_loss = ls.item();
    }
    r.best_so_far.push_back(best);
    if (it == cfg.iterations || loss == 0.0) {
      // A zero loss is a global minimum; later iterates cannot improve on it.
      if (loss == 0.0)
        while (r.best_so_far.size() <= cfg.iterations) {
          r.trace.push_back(loss);
          r.best_so_far.push_back(best);
        }
      break;
    }
    tape.backward(total);
    const Tensor& g = tape.grad(xv);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x[i] - cfg.step * g[i], 0.0, 1.0);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Chaining

enum class StylizeMode { feedforward, optimize };

inline const char* mode_name(StylizeMode m) { return m == StylizeMode::feedforward ? "feedforward" : "optimize"; }

inline StylizeMode parse_mode(const std::string& s) {
  if (s == "feedforward") return StylizeMode::feedforward;
  if (s == "optimize") return StylizeMode::optimize;
  throw Error("invalid_argument", "unknown stylization mode '" + s + "'");
}

struct StyleSource {
  Tensor image;
  std::string id;  // style id or painting path recorded in provenance
};

struct Stylizer {
  std::optional<StylePredictor> predictor;
  std::optional<TransferNet> transfer;
  OptimizeConfig optimize;
  FeatureExtractor extractor;

  Tensor stylize(const Tensor& content, const StyleSource& style, StylizeMode mode) const {
    if (mode == StylizeMode::optimize) return stylize_optimize(content, style.image, optimize, extractor).image;
    require(predictor && transfer, "feedforward stylization needs predictor and transfer checkpoints",
            "missing_parameter");
    return stylize_feedforward(content, predictor->predict(style.image, style.id), *transfer);
  }
};

struct ChainStep {
  std::string style;
  std::string mode;
  std::string input_hash;   // sha256 of the PNG fed into this step
  std::string output_hash;  // sha256 of the PNG produced
  Tensor image;

  nlohmann::json to_json() const {
    return {{"style", style}, {"mode", mode}, {"input", input_hash}, {"output", output_hash}};
  }
};

struct ChainResult {
  Tensor image;
  std::vector<ChainStep> steps;

  nlohmann::json provenance() const {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& s : steps) a.push_back(s.to_json());
    return a;
  }
};

inline ChainResult chain_styles(const Tensor& content, const std::vector<StyleSource>& styles, StylizeMode mode,
                                const Stylizer& stylizer) {
  require(!styles.empty(), "chain_styles: style list is empty");
  ChainResult r{content, {}};
  for (const auto& s : styles) {
    ChainStep step{s.id, mode_name(mode), sha256_hex(encode_png(r.image)), {}, {}};
    step.image = stylizer.stylize(r.image, s, mode);
    step.output_hash = sha256_hex(encode_png(step.image));
    r.image = step.image;
    r.steps.push_back(std::move(step));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Joint training

struct TransferTrainConfig {
  StylerConfig model;
  LossWeights weights;
  std::size_t epochs = 20;
  std::size_t steps_per_epoch = 0;  // 0: one step per content image
  double learning_rate = 1e-2;
  std::size_t image_size = 16;      // training crops are resized to this square
  std::uint64_t seed = 0;
  std::vector<std::string> content_layers = default_content_layers();
  std::vector<std::string> style_layers = default_style_layers();
};

struct TransferEpoch {
  std::size_t epoch = 0;  // 1-based
  double total = 0.0, content = 0.0, style = 0.0;

  nlohmann::json to_json() const { return {{"epoch", epoch}, {"total", total}, {"content", content}, {"style", style}}; }
};

struct TransferTrainResult {
  StylePredictor predictor;
  TransferNet transfer;
  std::vector<TransferEpoch> trace;
};

inline TransferTrainResult train_transfer(const std::vector<Tensor>& styles, const std::vector<Tensor>& contents,
                                          const TransferTrainConfig& cfg,
                                          const FeatureExtractor& fx = FeatureExtractor(),
                                          const std::function<void(const TransferEpoch&)>& on_epoch = {}) {
  require(!styles.empty(), "train_transfer: style corpus is empty");
  require(!contents.empty(), "train_transfer: content corpus is empty");
  cfg.weights.validate();
  require(cfg.image_size >= 4 && cfg.image_size % 2 == 0, "train_transfer: image_size must be even and >= 4");
  TransferTrainResult result{StylePredictor::initialize(cfg.model, cfg.seed), TransferNet::initialize(cfg.model, cfg.seed), {}};
  if (cfg.epochs == 0) return result;

  const std::size_t n = cfg.image_size;
  auto fit = [&](const Tensor& t) {
    require(t.rank() == 3 && t.shape()[2] == 3, "train_transfer: images must be H x W x 3", "bad_image");
    return (t.shape()[0] == n && t.shape()[1] == n) ? t : resize_bilinear(t, n, n);
  };
  std::vector<Tensor> content_in, style_pred_in;
  std::vector<FeatureMaps> content_t, style_t;
  for (const auto& c : contents) {
    content_in.push_back(fit(c));
    content_t.push_back(fx.extract(content_in.back(), cfg.content_layers));
  }
  for (const auto& s : styles) {
    style_pred_in.push_back(predictor_input(s, cfg.model));
    style_t.push_back(fx.extract(fit(s), cfg.style_layers));
  }

  ParamSet params = result.predictor.params();
  params.merge(result.transfer.params());
  Adam opt(cfg.learning_rate);
  Rng rng(mix_seed(cfg.seed, 0x57));
  const std::size_t steps = cfg.steps_per_epoch ? cfg.steps_per_epoch : contents.size();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    TransferEpoch e{epoch, 0, 0, 0};
    for (std::size_t s = 0; s < steps; ++s) {
      const std::size_t ci = rng.index(contents.size()), si = rng.index(styles.size());
      ad::Tape tape;
      Binding b(tape, params);
      Binding frozen(tape, fx.params(), false);
      ad::Var vec = predictor_forward(b, tape.constant(style_pred_in[si]));
      ad::Var out = transfer_forward(b, cfg.model, tape.constant(content_in[ci]), vec);
      ad::Var lc = content_loss(extract_features(frozen, out, cfg.content_layers), as_constants(tape, content_t[ci]));
      ad::Var ls = style_loss(extract_features(frozen, out, cfg.style_layers), as_constants(tape, style_t[si]));
      ad::Var total = ad::add(ad::scale(lc, cfg.weights.content), ad::scale(ls, cfg.weights.style));
      if (!std::isfinite(total.item()))
        throw Error("diverged", "train_transfer: non-finite loss at epoch " + std::to_string(epoch));
      e.total += total.item();
      e.content += lc.item();
      e.style += ls.item();
      tape.backward(total);
      opt.step(params, b.gradients());
    }
    const double inv = 1.0 / static_cast<double>(steps);
    e.total *= inv;
    e.content *= inv;
    e.style *= inv;
    result.trace.push_back(e);
    if (on_epoch) on_epoch(e);
  }
  result.predictor = StylePredictor(cfg.model, params.with_prefix("p."));
  result.transfer = TransferNet(cfg.model, params.with_prefix("t."));
  return result;
}

}  // namespace atelier::styler
