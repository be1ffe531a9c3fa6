// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <concepts>
#include <map>
#include <string>
#include <vector>

#include "atelier/core/autodiff.hpp"

namespace atelier {

// Named parameter arrays, ordered by name so iteration (and therefore
// serialization and optimizer updates) is deterministic.
class ParamSet {
 public:
  using Map = std::map<std::string, Tensor>;

  void set(const std::string& name, Tensor t) { tensors_[name] = std::move(t); }

  const Tensor& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw Error("missing_parameter", "parameter not found: " + name);
    return it->second;
  }
  Tensor& at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw Error("missing_parameter", "parameter not found: " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  std::size_t count() const noexcept { return tensors_.size(); }
  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors_) n += t.size();
    return n;
  }

  // Copies every entry of other (names must not collide unless overwrite).
  void merge(const ParamSet& other, bool overwrite = false) {
    for (const auto& [name, t] : other.tensors_) {
      require(overwrite || !contains(name), "duplicate parameter " + name);
      tensors_[name] = t;
    }
  }

  ParamSet with_prefix(const std::string& prefix) const {
    ParamSet out;
    for (const auto& [name, t] : tensors_)
      if (name.rfind(prefix, 0) == 0) out.tensors_[name] = t;
    return out;
  }

  Map::iterator begin() { return tensors_.begin(); }
  Map::iterator end() { return tensors_.end(); }
  Map::const_iterator begin() const { return tensors_.begin(); }
  Map::const_iterator end() const { return tensors_.end(); }

  friend bool operator==(const ParamSet& a, const ParamSet& b) { return a.tensors_ == b.tensors_; }

 private:
  Map tensors_;
};

using Gradients = std::map<std::string, Tensor>;

// Parameters placed on a tape. Trainable entries become gradient leaves;
// frozen entries are constants.
class Binding {
 public:
  Binding(ad::Tape& tape, const ParamSet& params, bool trainable = true) : tape_(&tape) {
    for (const auto& [name, t] : params) vars_.emplace(name, trainable ? tape.variable(t) : tape.constant(t));
  }

  // Only entries accepted by `trainable` become gradient leaves.
  template <class Pred>
    requires std::predicate<Pred, const std::string&>
  Binding(ad::Tape& tape, const ParamSet& params, Pred trainable) : tape_(&tape) {
    for (const auto& [name, t] : params) vars_.emplace(name, trainable(name) ? tape.variable(t) : tape.constant(t));
  }

  ad::Var operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw Error("missing_parameter", "parameter not bound: " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }

  ad::Tape& tape() const { return *tape_; }

  Gradients gradients() const {
    Gradients g;
    for (const auto& [name, v] : vars_)
      if (tape_->needs_grad(v)) g.emplace(name, tape_->grad(v));
    return g;
  }

 private:
  ad::Tape* tape_;
  std::map<std::string, ad::Var> vars_;
};

namespace init {

inline Tensor he_conv(Rng& rng, std::size_t k, std::size_t cin, std::size_t cout, double gain = 1.0) {
  return rng.normal_tensor({k, k, cin, cout}, gain * std::sqrt(2.0 / static_cast<double>(k * k * cin)));
}

inline Tensor xavier(Rng& rng, std::size_t in, std::size_t out, double gain = 1.0) {
  return rng.normal_tensor({in, out}, gain * std::sqrt(2.0 / static_cast<double>(in + out)));
}

inline Tensor zeros(Shape s) { return Tensor(std::move(s), 0.0); }

}  // namespace init

inline void add_conv(ParamSet& p, Rng& rng, const std::string& name, std::size_t k, std::size_t cin,
                     std::size_t cout, double gain = 1.0) {
  p.set(name + ".k", init::he_conv(rng, k, cin, cout, gain));
  p.set(name + ".b", init::zeros({cout}));
}

inline void add_linear(ParamSet& p, Rng& rng, const std::string& name, std::size_t in, std::size_t out,
                       double gain = 1.0) {
  p.set(name + ".w", init::xavier(rng, in, out, gain));
  p.set(name + ".b", init::zeros({out}));
}

inline ad::Var conv(const Binding& b, const std::string& name, ad::Var x, std::size_t stride = 1) {
  const ad::Var k = b[name + ".k"];
  const std::size_t pad = k.shape()[0] / 2;
  return ad::conv2d(x, k, b[name + ".b"], stride, pad);
}

inline ad::Var dense(const Binding& b, const std::string& name, ad::Var x) {
  return ad::linear(x, b[name + ".w"], b[name + ".b"]);
}

// Checks that two parameter sets agree in names and shapes.
inline void require_compatible(const ParamSet& expected, const ParamSet& actual, const std::string& what) {
  for (const auto& [name, t] : expected) {
    if (!actual.contains(name))
      throw Error("incompatible_checkpoint", what + ": checkpoint lacks parameter " + name);
    if (actual.at(name).shape() != t.shape())
      throw Error("incompatible_checkpoint", what + ": parameter " + name + " has shape " +
                                                 shape_str(actual.at(name).shape()) + ", expected " +
                                                 shape_str(t.shape()));
  }
}

}  // namespace atelier
