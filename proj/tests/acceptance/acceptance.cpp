// SPDX-License-Identifier: Apache-2.0
// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//
//   acceptance <path-to-atelier-cli> [criterion-name ...]

#include <unistd.h>

#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include "atelier/corpus/manifest.hpp"
#include "atelier/corpus/synth.hpp"
#include "atelier/dmgan/train.hpp"
#include "atelier/genre/classifier.hpp"
#include "atelier/metrics/scores.hpp"
#include "atelier/metrics/style_eval.hpp"
#include "atelier/pipeline/service.hpp"
#include "atelier/styler/transfer.hpp"
#include "atelier/text/train.hpp"
#include "support/gradcheck.hpp"

using namespace atelier;
namespace fs = std::filesystem;

namespace {

// Collects failed expectations; the first few end up in the detail column.
class Tally {
 public:
  void expect(bool ok, const std::string& what) {
    ++checks_;
    if (!ok) failures_.push_back(what);
  }
  void note(const std::string& s) { notes_.push_back(s); }
  bool ok() const { return failures_.empty(); }

  std::string detail() const {
    std::ostringstream os;
    if (!failures_.empty()) {
      os << failures_.size() << "/" << checks_ << " checks failed: ";
      for (std::size_t i = 0; i < std::min<std::size_t>(3, failures_.size()); ++i) os << (i ? "; " : "") << failures_[i];
    } else {
      os << checks_ << " checks";
    }
    for (const auto& n : notes_) os << ", " << n;
    return os.str();
  }

 private:
  std::size_t checks_ = 0;
  std::vector<std::string> failures_, notes_;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("atelier-acceptance-" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ad::Var readout(ad::Var y, std::uint64_t seed = 77) {
  Rng rng(seed);
  return ad::sum(ad::mul(y, y.tape->constant(rng.normal_tensor(y.shape()))));
}

// ---------------------------------------------------------------------------
// KL of the conditioning Gaussian against N(0, I)

void kl_oracle(Tally& t) {
  using text::kl_gauss_std;
  t.expect(kl_gauss_std(Tensor({5}, 0.0), Tensor({5}, 0.0)) == 0.0, "kl(0, 0) != 0");
  t.expect(std::abs(kl_gauss_std(Tensor::vector({1.0}), Tensor::vector({0.0})) - 0.5) <= 1e-10, "kl(1, 0) != 0.5");
  t.expect(std::abs(kl_gauss_std(Tensor::vector({0.0, 0.0}), Tensor::vector({1.0, 1.0})) - (std::numbers::e - 2.0)) <= 1e-10,
           "kl(0, 1) != e - 2");

  // E_q[log q(x) - log p(x)] over 1e5 draws, antithetic in eps.
  Rng rng(2024);
  double worst = 0.0;
  for (int c = 0; c < 20; ++c) {
    const std::size_t dim = 1 + rng.index(4);
    const Tensor mu = rng.uniform_tensor({dim}, -1.5, 1.5), lv = rng.uniform_tensor({dim}, -1.0, 1.0);
    const std::size_t n = 100000;
    double acc = 0.0;
    for (std::size_t s = 0; s < n / 2; ++s)
      for (std::size_t d = 0; d < dim; ++d) {
        const double e = rng.normal();
        for (double eps : {e, -e}) {
          const double x = mu[d] + std::exp(0.5 * lv[d]) * eps;
          acc += -0.5 * (lv[d] + eps * eps) + 0.5 * x * x;
        }
      }
    const double mc = acc / static_cast<double>(n), exact = kl_gauss_std(mu, lv);
    const double rel = std::abs(mc - exact) / exact;
    worst = std::max(worst, rel);
    t.expect(rel <= 0.02, "case " + std::to_string(c) + " rel err " + fmt("%.4f", rel));
  }
  t.note("worst MC rel err " + fmt("%.4f", worst));
}

// ---------------------------------------------------------------------------
// Content and style losses, Gram matrix

std::vector<std::vector<double>> brute_gram(const Tensor& f) {
  const std::size_t h = f.dim(0), w = f.dim(1), c = f.dim(2);
  std::vector<std::vector<double>> g(c, std::vector<double>(c, 0.0));
  for (std::size_t a = 0; a < c; ++a)
    for (std::size_t b = 0; b < c; ++b)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) g[a][b] += f.at(y, x, a) * f.at(y, x, b);
  return g;
}

double brute_content(const Tensor& x, const Tensor& c) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - c[i]) * (x[i] - c[i]);
  return s / static_cast<double>(x.size());
}

double brute_style(const Tensor& x, const Tensor& s) {
  const auto gx = brute_gram(x), gs = brute_gram(s);
  double f = 0.0;
  for (std::size_t a = 0; a < gx.size(); ++a)
    for (std::size_t b = 0; b < gx.size(); ++b) f += (gx[a][b] - gs[a][b]) * (gx[a][b] - gs[a][b]);
  return f / static_cast<double>(x.size());
}

styler::FeatureMaps single(const Tensor& t) { return {{{"conv1", t}}}; }

Tensor permute_positions(const Tensor& f, Rng& rng) {
  const std::size_t n = f.dim(0) * f.dim(1), c = f.dim(2);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm.begin(), perm.end());
  Tensor out(f.shape());
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t k = 0; k < c; ++k) out[p * c + k] = f[perm[p] * c + k];
  return out;
}

void loss_oracles(Tally& t) {
  using styler::content_loss;
  using styler::style_loss;
  Rng rng(31);
  double worst_c = 0.0, worst_s = 0.0;
  for (int i = 0; i < 50; ++i) {
    const Tensor x = rng.normal_tensor({4, 4, 3}), c = rng.normal_tensor({4, 4, 3}), s = rng.normal_tensor({4, 4, 3});
    const double dc = std::abs(content_loss(single(x), single(c)) - brute_content(x, c));
    const double bs = brute_style(x, s);
    const double ds = std::abs(style_loss(single(x), single(s)) - bs) / std::max(1.0, bs);
    worst_c = std::max(worst_c, dc);
    worst_s = std::max(worst_s, ds);
    t.expect(dc <= 1e-10, "content vs brute force " + fmt("%.2e", dc));
    t.expect(ds <= 1e-10, "style vs brute force " + fmt("%.2e", ds));
    t.expect(content_loss(single(c), single(c)) == 0.0, "content(c, c) != 0");
    t.expect(style_loss(single(s), single(s)) == 0.0, "style(s, s) != 0");
    const double base = style_loss(single(x), single(s));
    const double moved = style_loss(single(permute_positions(x, rng)), single(s));
    t.expect(std::abs(moved - base) <= 1e-10 * std::max(1.0, base), "style loss not permutation invariant");
  }
  t.note("max content err " + fmt("%.1e", worst_c) + ", max style rel err " + fmt("%.1e", worst_s));
}

void gram_properties(Tally& t) {
  Rng rng(32);
  double sym = 0.0, brute = 0.0, min_eig = 1e300;
  for (int i = 0; i < 100; ++i) {
    const std::size_t c = 2 + i % 4;  // includes rank-deficient maps (fewer positions than channels)
    const Tensor f = rng.normal_tensor({static_cast<std::size_t>(1 + i % 3), static_cast<std::size_t>(1 + i % 2), c}, 1.0 + i % 5);
    const Tensor g = styler::gram(f);
    const auto b = brute_gram(f);
    Eigen::MatrixXd m(c, c);
    for (std::size_t a = 0; a < c; ++a)
      for (std::size_t k = 0; k < c; ++k) {
        sym = std::max(sym, std::abs(g[a * c + k] - g[k * c + a]));
        brute = std::max(brute, std::abs(g[a * c + k] - b[a][k]));
        m(a, k) = g[a * c + k];
      }
    min_eig = std::min(min_eig, Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(m).eigenvalues().minCoeff());
  }
  t.expect(sym <= 1e-12, "asymmetry " + fmt("%.2e", sym));
  t.expect(brute <= 1e-12, "brute-force gap " + fmt("%.2e", brute));
  t.expect(min_eig >= -1e-10, "min eigenvalue " + fmt("%.2e", min_eig));
  t.note("min eigenvalue " + fmt("%.2e", min_eig));
}

// ---------------------------------------------------------------------------
// Finite-difference gradient suite

dmgan::GanConfig tiny_gan() {
  dmgan::GanConfig c;
  c.z_dim = 3;
  c.cond_dim = 2;
  c.channels = 4;
  c.key_dim = 3;
  c.word_dim = 5;
  c.init_size = 4;
  c.stages = 2;
  return c;
}

ParamSet stage_with_inputs(const dmgan::GanConfig& cfg, std::uint64_t seed, std::size_t t_len = 3, std::size_t side = 4) {
  Rng rng(seed);
  ParamSet p;
  dmgan::init_refine_stage(p, rng, cfg, 1);
  for (auto& [name, v] : p)
    if (name.ends_with(".b")) v = rng.normal_tensor(v.shape(), 0.3);
  p.set("in.words", rng.normal_tensor({t_len, cfg.word_dim}));
  p.set("in.feature", rng.normal_tensor({side, side, cfg.channels}));
  return p;
}

double worst_of(const atelier::testing::GradCheckResult& r, const std::function<bool(const std::string&)>& keep) {
  double w = 0.0;
  for (const auto& [name, err] : r.rel_err)
    if (keep(name)) w = std::max(w, err);
  return w;
}

void gradient_suite(Tally& t) {
  using atelier::testing::check_gradients;
  using atelier::testing::GradCheckOptions;
  std::vector<std::pair<std::string, double>> ops;
  auto per_op = [&](const std::string& name, double err) {
    ops.emplace_back(name, err);
    t.expect(err < 1e-4, name + " rel err " + fmt("%.2e", err));
  };

  {
    text::TextEncoderConfig cfg;
    cfg.vocab_size = 7;
    cfg.embed_dim = 4;
    cfg.feature_dim = 6;
    Rng rng(4);
    auto r = check_gradients(text::init_text_encoder(cfg, rng), [&](const Binding& b) {
      auto enc = text::encode_text(b, cfg, {4, 6, 5});
      return ad::add(readout(enc.words, 9), readout(enc.sentence, 10));
    });
    per_op("text_encoder", r.worst);
  }
  {
    Rng rng(18);
    const ParamSet p = text::init_condition_augment(6, 4, rng);
    const Tensor s = rng.normal_tensor({6});
    auto r = check_gradients(p, [&](const Binding& b) {
      auto c = text::condition_augment(b, b.tape().constant(s), 5);
      return ad::add(c.kl, readout(c.sample));
    });
    per_op("condition_augment", r.worst);
  }

  const auto cfg = tiny_gan();
  const std::vector<bool> mask{true, true, true};
  {
    auto r = check_gradients(stage_with_inputs(cfg, 5), [&](const Binding& b) {
      auto mem = dmgan::memory_write(b, "g1.", b["in.words"], mask, b["in.feature"]);
      return ad::add(ad::add(readout(mem.values), readout(mem.keys, 3)), readout(mem.gates, 4));
    });
    per_op("memory_write", worst_of(r, [](const std::string& n) { return n.find("mw.") != std::string::npos || n.starts_with("in."); }));
  }
  {
    auto r = check_gradients(stage_with_inputs(cfg, 7), [&](const Binding& b) {
      auto mem = dmgan::memory_write(b, "g1.", b["in.words"], mask, b["in.feature"]);
      return readout(dmgan::key_address(b, "g1.", mem, b["in.feature"]));
    });
    per_op("key_address", worst_of(r, [](const std::string& n) {
             return n.find("mw.key") != std::string::npos || n.find("ka.") != std::string::npos || n.starts_with("in.");
           }));
  }
  {
    Rng rng(9);
    ParamSet p;
    p.set("values", rng.normal_tensor({3, 4}));
    p.set("logits", rng.normal_tensor({6, 3}));
    auto r = check_gradients(p, [](const Binding& b) {
      dmgan::Memory mem{b.tape().constant(Tensor({3, 1}, 0.0)), b["values"], b.tape().constant(Tensor({3}, 1.0)),
                        {true, true, true}};
      return readout(dmgan::value_read(mem, ad::softmax_rows(b["logits"]), 2, 3));
    });
    per_op("value_read", r.worst);
  }
  {
    ParamSet p = stage_with_inputs(cfg, 13);
    Rng rng(14);
    p.set("in.response", rng.normal_tensor({4, 4, cfg.channels}));
    auto r = check_gradients(p, [&](const Binding& b) {
      return readout(dmgan::respond(b, "g1.", b["in.response"], b["in.feature"]).feature);
    });
    per_op("respond", worst_of(r, [](const std::string& n) { return n.find("rs.") != std::string::npos || n.starts_with("in."); }));
  }
  {
    Rng rng(15);
    ParamSet p;
    add_conv(p, rng, "res.c1", 3, 3, 3);
    add_conv(p, rng, "res.c2", 3, 3, 3);
    p.at("res.c1.b") = rng.normal_tensor({3}, 0.3);
    p.set("x", rng.normal_tensor({4, 4, 3}));
    per_op("generator residual_block",
           check_gradients(p, [](const Binding& b) { return readout(dmgan::residual_block(b, "res", b["x"])); }).worst);
  }
  for (bool project : {false, true}) {
    Rng rng(5);
    ParamSet p;
    auto blk = genre::init_residual_block(rng, 3, project ? 5 : 3, project);
    blk.b1 = rng.normal_tensor(blk.b1.shape(), 0.2);
    blk.b2 = rng.normal_tensor(blk.b2.shape(), 0.2);
    genre::add_residual_block(p, "blk", blk);
    p.set("x", rng.normal_tensor({5, 4, 3}));
    auto r = check_gradients(p, [&](const Binding& b) { return readout(genre::residual_block(b, "blk", b["x"], project ? 2 : 1)); });
    per_op(project ? "classifier residual_block (projected)" : "classifier residual_block", r.worst);
  }
  {
    Rng rng(7);
    ParamSet p;
    p.set("f", rng.normal_tensor({4, 3, 3}));
    p.set("g", rng.normal_tensor({3}));
    p.set("b", rng.normal_tensor({3}));
    auto r = check_gradients(p, [](const Binding& b) { return readout(styler::conditional_instance_norm(b["f"], b["g"], b["b"])); });
    per_op("instance_norm", r.worst);
  }
  {
    Rng rng(5);
    ParamSet p;
    p.set("x1", rng.normal_tensor({3, 3, 2}));
    p.set("x2", rng.normal_tensor({2, 2, 3}));
    const Tensor t1 = rng.normal_tensor({3, 3, 2}), t2 = rng.normal_tensor({2, 2, 3});
    auto vars = [&](const Binding& b) {
      auto& tp = b.tape();
      return std::make_pair(styler::FeatureVars{{"a", b["x1"]}, {"b", b["x2"]}},
                            styler::FeatureVars{{"a", tp.constant(t1)}, {"b", tp.constant(t2)}});
    };
    per_op("content_loss", check_gradients(p, [&](const Binding& b) {
                             auto [x, c] = vars(b);
                             return styler::content_loss(x, c);
                           }).worst);
    per_op("style_loss", check_gradients(p, [&](const Binding& b) {
                           auto [x, s] = vars(b);
                           return styler::style_loss(x, s);
                         }).worst);
  }
  {
    Rng rng(17);
    ParamSet p = dmgan::init_generator(cfg, rng);
    for (auto& [name, v] : p)
      if (name.ends_with(".b")) v = rng.normal_tensor(v.shape(), 0.2);
    p.set("in.words", rng.normal_tensor({3, cfg.word_dim}));
    p.set("in.feature", rng.normal_tensor({4, 4, cfg.channels}));
    const Tensor target = rng.uniform_tensor({8, 8, 3}, -1, 1);
    GradCheckOptions opt;
    opt.max_entries = 20;
    auto r = check_gradients(
        p,
        [&](const Binding& b) {
          auto out = dmgan::refine_stage(b, cfg, 1, b["in.feature"], b["in.words"], mask);
          return ad::sum_squares(ad::sub(out.out.image, b.tape().constant(target)));
        },
        opt);
    const double err = worst_of(r, [](const std::string& n) { return n.starts_with("g1.") || n.starts_with("in."); });
    ops.emplace_back("refine_stage", err);
    t.expect(err < 1e-3, "refine_stage rel err " + fmt("%.2e", err));
  }
  double worst = 0.0;
  std::string worst_name;
  for (const auto& [n, e] : ops)
    if (e >= worst) worst = e, worst_name = n;
  t.note(std::to_string(ops.size()) + " ops, worst " + worst_name + " " + fmt("%.1e", worst));
}

// ---------------------------------------------------------------------------
// Memory mechanism

void memory_mechanism(Tally& t) {
  const auto cfg = tiny_gan();
  double worst_row = 0.0;
  for (std::uint64_t seed = 10; seed < 30; ++seed) {
    const ParamSet p = stage_with_inputs(cfg, seed, 2 + seed % 4, 2 + seed % 3);
    ad::Tape tp;
    Binding b(tp, p, false);
    std::vector<bool> mask(p.at("in.words").dim(0), true);
    mask.back() = seed % 2;
    auto mem = dmgan::memory_write(b, "g1.", b["in.words"], mask, b["in.feature"]);
    const Tensor a = dmgan::key_address(b, "g1.", mem, b["in.feature"]).value();
    for (std::size_t i = 0; i < a.dim(0); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < a.dim(1); ++j) s += a.at(i, j);
      worst_row = std::max(worst_row, std::abs(s - 1.0));
    }
  }
  t.expect(worst_row <= 1e-6, "address row sum off by " + fmt("%.2e", worst_row));

  Rng rng(8);
  const std::size_t t_len = 4, c = 5, h = 2, w = 3;
  const Tensor values = rng.normal_tensor({t_len, c});
  double worst_read = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    ad::Tape tp;
    dmgan::Memory mem{tp.constant(Tensor({t_len, 1}, 0.0)), tp.constant(values), tp.constant(Tensor({t_len}, 1.0)),
                      std::vector<bool>(t_len, true)};
    Tensor wts = rng.uniform_tensor({h * w, t_len}, 0.0, 1.0);
    for (std::size_t p = 0; p < h * w; ++p) {
      double s = 0.0;
      for (std::size_t j = 0; j < t_len; ++j) s += wts.at(p, j);
      for (std::size_t j = 0; j < t_len; ++j) wts.at(p, j) /= s;
    }
    const Tensor r = dmgan::value_read(mem, tp.constant(wts), h, w).value();
    for (std::size_t p = 0; p < h * w; ++p)
      for (std::size_t k = 0; k < c; ++k) {
        double brute = 0.0;
        for (std::size_t s = 0; s < t_len; ++s) brute += wts.at(p, s) * values.at(s, k);
        worst_read = std::max(worst_read, std::abs(r[p * c + k] - brute));
      }
  }
  t.expect(worst_read <= 1e-12, "value read vs brute force " + fmt("%.2e", worst_read));

  // Write gate saturated: slots hold only the word values (g=1) or only the image value (g=0).
  {
    ParamSet p = stage_with_inputs(cfg, 4);
    auto write = [&] {
      ad::Tape tp;
      Binding b(tp, p, false);
      auto mem = dmgan::memory_write(b, "g1.", b["in.words"], {true, true, true}, b["in.feature"]);
      auto vw = dense(b, "g1.mw.val_w", b["in.words"]);
      auto vr = dense(b, "g1.mw.val_r", ad::spatial_mean(b["in.feature"]));
      return std::make_tuple(mem.values.value(), vw.value(), vr.value());
    };
    p.at("g1.mw.gate_w.b")[0] = 1e3;
    auto [values1, vw, vr1] = write();
    t.expect(values1 == vw, "write gate 1 is not the word passthrough");
    p.at("g1.mw.gate_w.b")[0] = -1e3;
    auto [values0, vw0, vr] = write();
    bool image_only = true;
    for (std::size_t s = 0; s < 3; ++s)
      for (std::size_t k = 0; k < cfg.channels; ++k) image_only = image_only && values0.at(s, k) == vr[k];
    t.expect(image_only, "write gate 0 is not the image passthrough");
  }
  // Response gate saturated: output is the memory projection (g=1) or the input feature (g=0).
  {
    ParamSet p = stage_with_inputs(cfg, 11);
    Rng r2(12);
    p.set("in.response", r2.normal_tensor({4, 4, cfg.channels}));
    p.at("g1.rs.gate_o.w").fill(0.0);
    p.at("g1.rs.gate_r.w").fill(0.0);
    p.at("g1.rs.gate_r.b").fill(0.0);
    auto run = [&] {
      ad::Tape tp;
      Binding b(tp, p, false);
      auto r = dmgan::respond(b, "g1.", b["in.response"], b["in.feature"]);
      return std::make_pair(r.feature.value(), r.projected.value());
    };
    p.at("g1.rs.gate_o.b").fill(1e3);
    auto [out1, proj] = run();
    t.expect(out1.storage() == proj.storage(), "response gate 1 is not the memory passthrough");
    p.at("g1.rs.gate_o.b").fill(-1e3);
    t.expect(run().first == p.at("in.feature"), "response gate 0 is not the feature passthrough");
  }
  t.note("row err " + fmt("%.1e", worst_row) + ", read err " + fmt("%.1e", worst_read));
}

// ---------------------------------------------------------------------------
// Metric oracles

void metric_oracles(Tally& t) {
  using namespace metrics;
  Rng rng(41);
  Tensor same({7, 5});
  {
    std::vector<double> row(5);
    double s = 0.0;
    for (double& v : row) s += (v = rng.uniform(0.01, 1.0));
    for (std::size_t i = 0; i < 7; ++i)
      for (std::size_t j = 0; j < 5; ++j) same[i * 5 + j] = row[j] / s;
  }
  t.expect(std::abs(inception_score(same) - 1.0) <= 1e-12, "IS of marginal-equal rows != 1");
  for (std::size_t k : {2u, 5u, 10u}) {
    Tensor eye({k, k}, 0.0);
    for (std::size_t i = 0; i < k; ++i) eye[i * k + i] = 1.0;
    t.expect(std::abs(inception_score(eye) - static_cast<double>(k)) <= 1e-9, "IS of one-hot rows != K");
  }

  auto random_gaussian = [&](std::size_t d) {
    Eigen::MatrixXd a(d, d);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) a(i, j) = rng.normal();
    GaussianSummary g;
    g.mean = Eigen::VectorXd(d);
    for (std::size_t i = 0; i < d; ++i) g.mean(i) = rng.normal();
    g.cov = a * a.transpose() / static_cast<double>(d);
    return g;
  };
  double self = 0.0, asym = 0.0;
  for (int i = 0; i < 20; ++i) {
    const auto a = random_gaussian(4), b = random_gaussian(4);
    self = std::max(self, std::abs(fid(a, a)));
    const double ab = fid(a, b), ba = fid(b, a);
    asym = std::max(asym, std::abs(ab - ba) / std::max(1.0, ab));
  }
  t.expect(self <= 1e-10, "FID(a, a) = " + fmt("%.2e", self));
  t.expect(asym <= 1e-8, "FID asymmetry " + fmt("%.2e", asym));
  auto one_d = [](double mu, double var) {
    return GaussianSummary{Eigen::VectorXd::Constant(1, mu), Eigen::MatrixXd::Constant(1, 1, var)};
  };
  double closed = 0.0;
  for (int i = 0; i < 20; ++i) {
    const double m1 = rng.normal(), m2 = rng.normal(), v1 = rng.uniform(0.1, 4), v2 = rng.uniform(0.1, 4);
    const double expect = (m1 - m2) * (m1 - m2) + std::pow(std::sqrt(v1) - std::sqrt(v2), 2);
    closed = std::max(closed, std::abs(fid(one_d(m1, v1), one_d(m2, v2)) - expect));
  }
  t.expect(closed <= 1e-8, "1-D FID closed form off by " + fmt("%.2e", closed));

  std::vector<RQuery<std::string>> qs;
  for (int i = 0; i < 10; ++i) {
    RQuery<std::string> q{"img" + std::to_string(i), "cap" + std::to_string(i), {}};
    for (int j = 0; j < 10; ++j)
      if (j != i) q.distractors.push_back("cap" + std::to_string(j));
    qs.push_back(q);
  }
  const std::function<double(const std::string&, const std::string&)> perfect =
      [](const std::string& img, const std::string& cap) { return img.substr(3) == cap.substr(3) ? 1.0 : 0.0; };
  t.expect(r_precision(qs, perfect).mean == 1.0, "perfect-oracle R-precision != 1");
}

// ---------------------------------------------------------------------------
// Toy DM-GAN training

void dmgan_training(Tally& t) {
  const fs::path dir = scratch("shapes");
  corpus::synth_shapes_dataset(dir, 1, 64, 64);
  const auto records = corpus::load_caption_manifest(dir / "captions.jsonl");
  t.expect(records.size() == 64, "expected 64 caption records");
  std::vector<text::CaptionedImage> captioned;
  std::vector<dmgan::GanExample> data;
  for (const auto& r : records) {
    const Tensor img = read_png(r.image_path);
    data.push_back({img, r.captions[0]});
    for (const auto& c : r.captions) captioned.push_back({img, c});
  }
  const auto damsm =
      text::train_damsm(text::DamsmModel::initialize({}, corpus::build_vocabulary(records), 1), captioned, {}).model;

  dmgan::GanTrainConfig tc;
  tc.stages = 2;
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t finite = 0;
  const auto run = dmgan::train_gan(damsm, dmgan::DmGanModel::initialize({}, 1), data, 300, tc);
  for (const auto& l : run.trace) {
    bool ok = std::isfinite(l.generator) && std::isfinite(l.discriminator) && std::isfinite(l.ca) &&
              std::isfinite(l.damsm) && std::isfinite(l.reconstruction);
    for (double v : l.stage_generator) ok = ok && std::isfinite(v);
    for (double v : l.stage_discriminator) ok = ok && std::isfinite(v);
    finite += ok;
  }
  const double train_s = seconds_since(t0);
  t.expect(run.trace.size() == 300 && finite == 300, std::to_string(finite) + "/300 steps finite");
  t.expect(train_s <= 600.0, "300 steps took " + fmt("%.0f s", train_s));

  // Single-sample overfit: pixel L2 of the first refined image against the target.
  dmgan::GanTrainConfig oc;
  oc.stages = 2;
  oc.batch_size = 1;
  oc.lambda_rec = 10;
  oc.lambda_damsm = 0;
  oc.fixed_noise = true;
  const auto target = dmgan::pyramid_level(data[0].image, 16);
  auto dist = [&](const dmgan::DmGanModel& m) {
    ad::Tape tp;
    Binding b(tp, m.params(), false);
    const auto [w, s] = damsm.encode_text(data[0].caption);
    auto fp = dmgan::run_generator(b, m.config(), 2, tp.constant(w.features), w.mask, tp.constant(s.features), oc.seed);
    return l2_distance(fp.stages[1].image.value(), target);
  };
  const auto init = dmgan::DmGanModel::initialize({}, 1);
  const double d0 = dist(init);
  const double d1 = dist(dmgan::train_gan(damsm, init, {data[0]}, 200, oc).model);
  const double reduction = 1.0 - d1 / d0;
  t.expect(reduction >= 0.8, "overfit L2 reduction " + fmt("%.3f", reduction));
  t.note("300 steps " + fmt("%.1f s", train_s) + ", overfit L2 " + fmt("%.2f", d0) + " -> " + fmt("%.2f", d1) + " (" +
         fmt("%.0f%%", 100 * reduction) + ")");
}

// ---------------------------------------------------------------------------
// Genre classifier

void genre_classifier(Tally& t) {
  corpus::PaintingCorpusConfig pc;
  t.expect(pc.genres.size() == 10, "corpus is not 10-class");
  std::vector<genre::LabeledImage> data;
  for (const auto& s : corpus::synth_paintings(1, pc)) data.push_back({s.image, s.genre, s.split});
  genre::FinetuneConfig fc;
  t.expect(fc.epochs <= 10, "more than 10 epochs configured");
  const auto r = genre::finetune(data, genre::GenreClassifier::initialize(pc.genres, 1), fc);
  double best = 0.0;
  std::size_t first = 0;
  for (const auto& e : r.trace) {
    if (first == 0 && e.test_acc >= 0.95) first = e.epoch;
    best = std::max(best, e.test_acc);
  }
  t.expect(best >= 0.95, "best held-out accuracy " + fmt("%.3f", best));

  Rng rng(1);
  ParamSet p;
  genre::add_residual_block(p, "blk", genre::init_residual_block(rng, 4, 4, false));
  for (const char* n : {"blk.c1.k", "blk.c1.b", "blk.c2.k", "blk.c2.b"}) p.at(n).fill(0.0);
  const Tensor x = rng.uniform_tensor({5, 5, 4}, 0.0, 2.0);
  ad::Tape tp;
  Binding b(tp, p, false);
  t.expect(genre::residual_block(b, "blk", tp.constant(x)).value() == x, "zero residual path is not the identity");
  t.note("held-out acc " + fmt("%.3f", best) + (first ? ", >= 0.95 at epoch " + std::to_string(first) : std::string()));
}

// ---------------------------------------------------------------------------
// Style transfer end to end

double l2(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

void style_transfer(Tally& t) {
  using namespace styler;
  Rng rng(1);
  const Tensor content = corpus::render_shape(0, 1, 8, 8, 5, 16);
  double worst_ratio = 0.0;
  for (auto pattern : {corpus::Pattern::stripes, corpus::Pattern::dots, corpus::Pattern::checker}) {
    const Tensor style = corpus::render_painting(pattern, corpus::hue_color(200), rng, 16);
    OptimizeConfig oc;
    t.expect(oc.iterations <= 200, "optimizer runs more than 200 iterations");
    const auto r = stylize_optimize(content, style, oc);
    const double ratio = r.best_style_loss / r.initial_style_loss;
    worst_ratio = std::max(worst_ratio, ratio);
    t.expect(ratio <= 0.1, "optimize style loss ratio " + fmt("%.3f", ratio));
  }

  Rng srng(1);
  std::vector<Tensor> styles, held_out, contents;
  const corpus::Pattern pats[2] = {corpus::Pattern::stripes, corpus::Pattern::dots};
  const double hues[2] = {200, 30};
  for (int s = 0; s < 2; ++s) {
    styles.push_back(corpus::render_painting(pats[s], corpus::hue_color(hues[s]), srng, 32));
    held_out.push_back(corpus::render_painting(pats[s], corpus::hue_color(hues[s]), srng, 32));
  }
  for (auto& s : corpus::synth_shapes(3, 8, 16)) contents.push_back(s.image);
  TransferTrainConfig tc;
  t.expect(tc.epochs == 20, "toy training is not 20 epochs");
  const auto t0 = std::chrono::steady_clock::now();
  const auto trained = train_transfer(styles, contents, tc);
  const double train_s = seconds_since(t0);
  t.expect(train_s <= 300.0, "toy training took " + fmt("%.0f s", train_s));

  const FeatureExtractor fx;
  const auto& layers = default_style_layers();
  for (std::size_t s = 0; s < 2; ++s) {
    const auto v = trained.predictor.predict(styles[s]);
    const auto target = fx.extract(resize_bilinear(styles[s], 16, 16), layers);
    const Tensor& c = contents[s];
    const double out = style_loss(fx.extract(stylize_feedforward(c, v, trained.transfer), layers), target);
    const double in = style_loss(fx.extract(c, layers), target);
    t.expect(out < in, "style " + std::to_string(s) + ": output style loss " + fmt("%.3g", out) + " >= content " +
                           fmt("%.3g", in));
  }
  const Tensor p0 = trained.predictor.predict(styles[0]).values, p1 = trained.predictor.predict(styles[1]).values;
  std::size_t hits = 0;
  for (std::size_t s = 0; s < 2; ++s) {
    const Tensor q = trained.predictor.predict(held_out[s]).values;
    hits += (l2(q, p0) < l2(q, p1) ? 0u : 1u) == s;
  }
  t.expect(hits == 2, "retrieval " + std::to_string(hits) + "/2");
  t.note("optimize worst ratio " + fmt("%.3f", worst_ratio) + ", training " + fmt("%.1f s", train_s) + ", retrieval " +
         std::to_string(hits) + "/2");
}

// ---------------------------------------------------------------------------
// Pipeline

nlohmann::json run_cli(Tally& t, const std::string& cli, const fs::path& root) {
  const fs::path out = root.parent_path() / (root.filename().string() + ".out");
  const std::string cmd = "'" + cli + "' --data-dir '" + root.string() +
                          "' -q pipeline 'a red square' --auto --seed 1 > '" + out.string() + "' 2>&1";
  const int rc = std::system(cmd.c_str());
  t.expect(rc == 0, "cli exited with " + std::to_string(rc) + ": " + slurp(out));
  std::istringstream lines(slurp(out));
  std::string line, last;
  while (std::getline(lines, line))
    if (!line.empty() && line.front() == '{' && line.find("final_artifact") != std::string::npos) last = line;
  if (last.empty()) return nlohmann::json::object();
  return nlohmann::json::parse(last);
}

void pipeline_checks(Tally& t, const std::string& cli) {
  using namespace pipeline;
  const fs::path a = scratch("cli-a"), b = scratch("cli-b");
  const auto ra = run_cli(t, cli, a), rb = run_cli(t, cli, b);
  std::string bytes_a, bytes_b;
  if (ra.contains("path") && rb.contains("path")) {
    bytes_a = slurp(ra["path"].get<std::string>());
    bytes_b = slurp(rb["path"].get<std::string>());
  }
  t.expect(!bytes_a.empty() && bytes_a == bytes_b, "final artifacts differ between runs");
  t.expect(ra.value("final_artifact", "") == rb.value("final_artifact", "x"), "final artifact hashes differ");

  const DataLayout layout{a};
  const auto replay = replay_log(layout.jobs() / "jobs.log");
  t.expect(!replay.jobs.empty(), "job log is empty");
  t.expect(index_text(replay.jobs, replay.seq) == slurp(layout.jobs() / "index.json"), "replay does not reproduce index.json");

  ServiceConfig cfg;
  cfg.data_dir = a;
  std::string style;
  std::string id;
  {
    PipelineService svc(cfg);
    const auto parked = svc.run_to_park(svc.create_job("a red square", 1).id);
    id = parked.id;
    const auto rec = parked.recommended_styles();
    style = rec.at(0);
    std::string outsider;
    for (const auto& s : corpus::default_styles())
      if (std::find(rec.begin(), rec.end(), s) == rec.end()) outsider = s;
    bool rejected = false;
    try {
      svc.choose_style(id, outsider);
    } catch (const Error& e) {
      rejected = e.code() == "invalid_argument";
    }
    t.expect(rejected, "non-recommended style '" + outsider + "' was accepted");
    t.expect(svc.get_job(id).state == JobState::awaiting_style_choice, "rejected choice changed the job");
  }
  // Keep one painting of the chosen style, then reshuffle.
  auto m = corpus::load_painting_manifest(layout.paintings());
  bool kept = false;
  std::erase_if(m.records, [&](const corpus::PaintingRecord& r) {
    if (r.style != style) return false;
    if (!kept) return !(kept = true);
    return true;
  });
  corpus::write_painting_manifest(layout.paintings(), m);
  PipelineService svc(cfg);
  const auto chosen = svc.choose_style(id, style);
  const auto shuffled = svc.reshuffle(id);
  t.expect(chosen.state == JobState::done && shuffled.state == JobState::done, "job did not finish");
  t.expect(shuffled.choices.size() == chosen.choices.size(), "reshuffle appended a choice");
  t.expect(shuffled.choices.back().painting == chosen.choices.back().painting &&
               shuffled.choices.back().artifact == chosen.choices.back().artifact,
           "single-candidate reshuffle changed the result");
  t.note("artifact " + ra.value("final_artifact", std::string("?")).substr(0, 12) + ", style " + style);
}

// ---------------------------------------------------------------------------
// Observed/unobserved loss report

void style_eval_shape(Tally& t) {
  Rng rng(5);
  std::vector<metrics::StyledImage> paintings;
  for (const std::string s : {"cubism", "op-art", "pointillism", "impressionism", "minimalism"})
    for (int i = 0; i < 2; ++i)
      paintings.push_back({corpus::render_painting(corpus::pattern_for_style(s), corpus::hue_color(40.0 * i), rng, 16), s});
  std::vector<Tensor> contents;
  for (auto& s : corpus::synth_shapes(6, 3, 16)) contents.push_back(s.image);
  const auto r = metrics::eval_style_transfer(styler::StylePredictor::initialize({}, 1),
                                              styler::TransferNet::initialize({}, 1), paintings, contents, {});
  const std::string table = r.table();
  t.expect(std::count(table.begin(), table.end(), '\n') == 5, "table is not a header plus four rows");
  for (const char* cell : {"Observed    Style loss", "            Content loss", "Unobserved  Style loss"})
    t.expect(table.find(cell) != std::string::npos, std::string("missing row '") + cell + "'");
  const auto j = r.to_json();
  for (const char* split : {"observed", "unobserved"})
    for (const char* key : {"style_loss", "content_loss", "samples", "styles"})
      t.expect(j.contains(split) && j[split].contains(key), std::string("json lacks ") + split + "." + key);
  for (const auto* s : {&r.observed, &r.unobserved}) {
    t.expect(s->style >= 0.0 && s->content >= 0.0 && std::isfinite(s->style) && std::isfinite(s->content),
             "negative or non-finite loss");
    t.expect(s->samples >= 1, "empty split");
  }
  t.note(std::to_string(r.observed.samples) + " observed / " + std::to_string(r.unobserved.samples) + " unobserved pairs");
}

struct Criterion {
  std::string name;
  double budget_s;  // 0: no runtime bound
  std::function<void(Tally&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: acceptance <atelier-cli> [criterion ...]\n";
    return 2;
  }
  const std::string cli = argv[1];
  const std::set<std::string> only(argv + 2, argv + argc);

  const std::vector<Criterion> criteria = {
      {"kl-divergence", 10.0, kl_oracle},
      {"content-style-losses", 0.0, loss_oracles},
      {"gram-properties", 0.0, gram_properties},
      {"gradient-suite", 120.0, gradient_suite},
      {"memory-mechanism", 0.0, memory_mechanism},
      {"metric-oracles", 0.0, metric_oracles},
      {"dmgan-training", 0.0, dmgan_training},
      {"genre-classifier", 0.0, genre_classifier},
      {"style-transfer", 0.0, style_transfer},
      {"pipeline", 0.0, [&](Tally& t) { pipeline_checks(t, cli); }},
      {"style-eval-report", 0.0, style_eval_shape},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.name)) continue;
    Tally t;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.run(t);
    } catch (const std::exception& e) {
      t.expect(false, std::string("threw: ") + e.what());
    }
    const double secs = seconds_since(t0);
    if (c.budget_s > 0) t.expect(secs < c.budget_s, "runtime " + fmt("%.1f s", secs) + " over " + fmt("%.0f s", c.budget_s));
    failed += !t.ok();
    std::cout << (t.ok() ? "PASS " : "FAIL ") << c.name << " (" << t.detail() << ", " << fmt("%.2f s", secs) << ")"
              << std::endl;
  }
  fs::remove_all(fs::temp_directory_path() / ("atelier-acceptance-" + std::to_string(::getpid())));
  return failed ? 1 : 0;
}
