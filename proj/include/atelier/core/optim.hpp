// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <map>
#include <string>

#include "atelier/core/params.hpp"

namespace atelier {

// Stochastic gradient descent with heavy-ball momentum.
class SgdMomentum {
 public:
  SgdMomentum(double lr, double momentum = 0.9) : lr_(lr), momentum_(momentum) {}

  void step(ParamSet& params, const Gradients& grads) {
    for (const auto& [name, g] : grads) {
      Tensor& p = params.at(name);
      Tensor& v = velocity_.try_emplace(name, Tensor(p.shape(), 0.0)).first->second;
      for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = momentum_ * v[i] + g[i];
        p[i] -= lr_ * v[i];
      }
    }
  }

  double learning_rate() const noexcept { return lr_; }

 private:
  double lr_;
  double momentum_;
  std::map<std::string, Tensor> velocity_;
};

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamSet& params, const Gradients& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
      Tensor& p = params.at(name);
      Tensor& m = m_.try_emplace(name, Tensor(p.shape(), 0.0)).first->second;
      Tensor& v = v_.try_emplace(name, Tensor(p.shape(), 0.0)).first->second;
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
        p[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

// Scales gradients so their global L2 norm is at most max_norm.
inline void clip_global_norm(Gradients& grads, double max_norm) {
  double total = 0.0;
  for (const auto& [_, g] : grads) total += squared_norm(g);
  total = std::sqrt(total);
  if (total <= max_norm || total == 0.0) return;
  const double s = max_norm / total;
  for (auto& [_, g] : grads)
    for (double& v : g.values()) v *= s;
}

inline bool all_finite(const Gradients& grads) {
  for (const auto& [_, g] : grads)
    if (!g.all_finite()) return false;
  return true;
}

}  // namespace atelier
