// SPDX-License-Identifier: Apache-2.0
#pragma once

// Frozen feature extractor, Gram matrices and the content / style losses.
//
//   content(x, c) = sum_{j in C} (1/n_j) |f_j(x) - f_j(c)|^2
//   style(x, s)   = sum_{i in S} (1/n_i) |G(f_i(x)) - G(f_i(s))|_F^2
//
// with n_l = h_l * w_l * c_l and G the unnormalized Gram matrix.

#include <map>
#include <string>
#include <vector>

#include "atelier/core/params.hpp"

namespace atelier::styler {

inline constexpr std::uint64_t kExtractorSeed = 0x5717E;

struct ExtractorLayer {
  std::string tag;
  std::size_t cin, cout, stride;
};

// conv1 keeps resolution; conv2 and conv3 halve it. ReLU after each.
inline const std::vector<ExtractorLayer>& extractor_layers() {
  static const std::vector<ExtractorLayer> layers = {{"conv1", 3, 8, 1}, {"conv2", 8, 16, 2}, {"conv3", 16, 32, 2}};
  return layers;
}

inline const std::vector<std::string>& default_content_layers() {
  static const std::vector<std::string> c = {"conv2"};
  return c;
}

inline const std::vector<std::string>& default_style_layers() {
  static const std::vector<std::string> s = {"conv1", "conv2", "conv3"};
  return s;
}

inline ParamSet init_extractor(std::uint64_t seed = kExtractorSeed) {
  Rng rng(seed);
  ParamSet p;
  for (const auto& l : extractor_layers()) add_conv(p, rng, "fx." + l.tag, 3, l.cin, l.cout);
  return p;
}

using FeatureVars = std::map<std::string, ad::Var>;

inline void check_tags(const std::vector<std::string>& tags) {
  require(!tags.empty(), "feature extraction needs at least one layer tag");
  for (const auto& t : tags) {
    bool known = false;
    for (const auto& l : extractor_layers()) known = known || l.tag == t;
    if (!known) throw Error("invalid_argument", "undeclared extractor layer '" + t + "'");
  }
}

inline FeatureVars extract_features(const Binding& extractor, ad::Var image, const std::vector<std::string>& tags) {
  check_tags(tags);
  require(image.value().rank() == 3 && image.shape()[2] == 3 && image.shape()[0] >= 4 && image.shape()[1] >= 4,
          "extract_features: expects an H x W x 3 image with H, W >= 4", "shape_mismatch");
  FeatureVars out;
  ad::Var x = image;
  for (const auto& l : extractor_layers()) {
    x = ad::relu(conv(extractor, "fx." + l.tag, x, l.stride));
    if (std::find(tags.begin(), tags.end(), l.tag) != tags.end()) out.emplace(l.tag, x);
  }
  return out;
}

// Value-level maps for a fixed extractor.
struct FeatureMaps {
  std::map<std::string, Tensor> layers;
};

class FeatureExtractor {
 public:
  FeatureExtractor() : FeatureExtractor(kExtractorSeed) {}
  explicit FeatureExtractor(std::uint64_t seed) : params_(init_extractor(seed)) {}
  explicit FeatureExtractor(ParamSet params) : params_(std::move(params)) {
    require_compatible(init_extractor(), params_, "feature extractor");
  }

  const ParamSet& params() const noexcept { return params_; }

  FeatureMaps extract(const Tensor& image, const std::vector<std::string>& tags) const {
    ad::Tape tape;
    Binding b(tape, params_, false);
    FeatureMaps out;
    for (const auto& [tag, v] : extract_features(b, tape.constant(image), tags)) out.layers.emplace(tag, v.value());
    return out;
  }

 private:
  ParamSet params_;
};

// Unnormalized Gram matrix of one layer (c x c); the 1/n factor lives in
// style_loss.
inline Tensor gram(const Tensor& f) { return ad::gram_values(f); }

// ---------------------------------------------------------------------------
// Losses

inline ad::Var content_loss(const FeatureVars& x, const FeatureVars& c) {
  using namespace ad;
  require(!x.empty() && x.size() == c.size(), "content_loss: mismatched layer sets");
  Var total;
  bool first = true;
  for (const auto& [tag, fx] : x) {
    auto it = c.find(tag);
    if (it == c.end()) throw Error("invalid_argument", "content_loss: layer '" + tag + "' missing from target");
    require(fx.shape() == it->second.shape(), "content_loss: shape mismatch at layer " + tag, "shape_mismatch");
    Var term = scale(sum_squares(sub(fx, it->second)), 1.0 / static_cast<double>(fx.size()));
    total = first ? term : add(total, term);
    first = false;
  }
  return total;
}

inline ad::Var style_loss(const FeatureVars& x, const FeatureVars& s) {
  using namespace ad;
  require(!x.empty() && x.size() == s.size(), "style_loss: mismatched layer sets");
  Var total;
  bool first = true;
  for (const auto& [tag, fx] : x) {
    auto it = s.find(tag);
    if (it == s.end()) throw Error("invalid_argument", "style_loss: layer '" + tag + "' missing from target");
    require(fx.shape()[2] == it->second.shape()[2], "style_loss: channel mismatch at layer " + tag, "shape_mismatch");
    Var term = scale(sum_squares(sub(gram(fx), gram(it->second))), 1.0 / static_cast<double>(fx.size()));
    total = first ? term : add(total, term);
    first = false;
  }
  return total;
}

inline FeatureVars as_constants(ad::Tape& tape, const FeatureMaps& m) {
  FeatureVars out;
  for (const auto& [tag, t] : m.layers) out.emplace(tag, tape.constant(t));
  return out;
}

inline double content_loss(const FeatureMaps& x, const FeatureMaps& c) {
  ad::Tape t;
  return content_loss(as_constants(t, x), as_constants(t, c)).item();
}

inline double style_loss(const FeatureMaps& x, const FeatureMaps& s) {
  ad::Tape t;
  return style_loss(as_constants(t, x), as_constants(t, s)).item();
}

// ---------------------------------------------------------------------------
// Conditional instance normalization

// Per-channel spatial standardization (eps = 1e-5) followed by gamma, beta.
inline ad::Var conditional_instance_norm(ad::Var f, ad::Var gamma, ad::Var beta) {
  require(gamma.size() == f.shape()[2] && beta.size() == f.shape()[2],
          "conditional_instance_norm: gamma/beta width must equal channel count", "shape_mismatch");
  return ad::add_bias(ad::mul_channels(ad::instance_norm(f), gamma), beta);
}

}  // namespace atelier::styler
