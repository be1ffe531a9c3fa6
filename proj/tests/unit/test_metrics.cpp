// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "atelier/corpus/synth.hpp"
#include "atelier/metrics/scores.hpp"
#include "atelier/metrics/style_eval.hpp"

using namespace atelier;
using namespace atelier::metrics;

namespace {

Tensor random_rows(Rng& rng, std::size_t n, std::size_t k) {
  Tensor p({n, k});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += (p[i * k + j] = rng.uniform(0.01, 1.0));
    for (std::size_t j = 0; j < k; ++j) p[i * k + j] /= s;
  }
  return p;
}

GaussianSummary random_gaussian(Rng& rng, std::size_t d) {
  Eigen::MatrixXd a(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) a(i, j) = rng.normal();
  GaussianSummary g;
  g.mean = Eigen::VectorXd(d);
  for (std::size_t i = 0; i < d; ++i) g.mean(i) = rng.normal();
  g.cov = a * a.transpose() / static_cast<double>(d);
  return g;
}

GaussianSummary one_d(double mu, double var) {
  GaussianSummary g;
  g.mean = Eigen::VectorXd::Constant(1, mu);
  g.cov = Eigen::MatrixXd::Constant(1, 1, var);
  return g;
}

}  // namespace

TEST(InceptionScore, MarginalRowsGiveOneAndOneHotGivesK) {
  Rng rng(1);
  Tensor row = random_rows(rng, 1, 5);
  Tensor same({7, 5});
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 5; ++j) same[i * 5 + j] = row[j];
  EXPECT_NEAR(inception_score(same), 1.0, 1e-12);
  for (std::size_t k : {2u, 5u, 10u}) {
    Tensor eye({k, k}, 0.0);
    for (std::size_t i = 0; i < k; ++i) eye[i * k + i] = 1.0;
    EXPECT_NEAR(inception_score(eye), static_cast<double>(k), 1e-9);
  }
}

TEST(InceptionScore, RangeAndRowOrderInvariance) {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const Tensor p = random_rows(rng, 12, 4);
    const double is = inception_score(p);
    EXPECT_GE(is, 1.0);
    EXPECT_LE(is, 4.0);
    Tensor rev({12, 4});
    for (std::size_t i = 0; i < 12; ++i)
      for (std::size_t j = 0; j < 4; ++j) rev[i * 4 + j] = p[(11 - i) * 4 + j];
    EXPECT_NEAR(inception_score(rev), is, 1e-12);
  }
  const auto split = inception_score_splits(random_rows(rng, 20, 3), 4);
  EXPECT_GE(split.mean, 1.0);
  EXPECT_GT(split.std_err, 0.0);
}

TEST(InceptionScore, RejectsInvalidRows) {
  EXPECT_THROW(inception_score(Tensor({2, 2}, 0.3)), Error);
  Tensor neg({1, 2});
  neg[0] = 1.5;
  neg[1] = -0.5;
  EXPECT_THROW(inception_score(neg), Error);
  EXPECT_THROW(inception_score(Tensor({4}, 0.25)), Error);
}

TEST(Fid, IdentityClosedFormsAndSymmetry) {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    const auto a = random_gaussian(rng, 4), b = random_gaussian(rng, 4);
    EXPECT_LE(fid(a, a), 1e-10);
    const double ab = fid(a, b), ba = fid(b, a);
    EXPECT_NEAR(ab, ba, 1e-8 * std::max(1.0, ab));
    EXPECT_GE(ab, 0.0);
  }
  for (int t = 0; t < 20; ++t) {
    const double m1 = rng.normal(), m2 = rng.normal(), v1 = rng.uniform(0.1, 4), v2 = rng.uniform(0.1, 4);
    const double expect = (m1 - m2) * (m1 - m2) + std::pow(std::sqrt(v1) - std::sqrt(v2), 2);
    EXPECT_NEAR(fid(one_d(m1, v1), one_d(m2, v2)), expect, 1e-8);
  }
  GaussianSummary i1{Eigen::VectorXd::Zero(3), Eigen::MatrixXd::Identity(3, 3)};
  GaussianSummary i2{Eigen::Vector3d(1.0, -2.0, 0.5), Eigen::MatrixXd::Identity(3, 3)};
  EXPECT_NEAR(fid(i1, i2), 5.25, 1e-12);
}

TEST(Fid, RejectsNonPsdAndMismatchedDimensions) {
  GaussianSummary bad{Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2)};
  bad.cov(1, 1) = -1.0;
  GaussianSummary ok{Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2)};
  EXPECT_THROW(fid(bad, ok), Error);
  bad.cov = Eigen::MatrixXd::Identity(2, 2);
  bad.cov(0, 1) = 0.3;
  EXPECT_THROW(fid(bad, ok), Error);
  EXPECT_THROW(fid(ok, one_d(0, 1)), Error);
}

TEST(Fid, SameDistributionMonteCarlo) {
  Rng rng(4);
  const std::size_t n = 100000, d = 4;
  Eigen::MatrixXd mix(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) mix(i, j) = rng.normal() * 0.5 + (i == j ? 1.0 : 0.0);
  auto draw = [&] {
    Tensor s({n, d});
    for (std::size_t r = 0; r < n; ++r) {
      Eigen::VectorXd z(d);
      for (std::size_t i = 0; i < d; ++i) z(i) = rng.normal();
      const Eigen::VectorXd x = mix * z;
      for (std::size_t i = 0; i < d; ++i) s[r * d + i] = x(i) + 1.0;
    }
    return s;
  };
  const auto a = fit_gaussian(draw()), b = fit_gaussian(draw());
  EXPECT_LT(fid(a, b), 0.05);
}

TEST(RPrecision, PerfectOracleTiesAndDuplicates) {
  std::vector<RQuery<std::string>> qs;
  for (int i = 0; i < 10; ++i) {
    RQuery<std::string> q{"img" + std::to_string(i), "cap" + std::to_string(i), {}};
    for (int j = 0; j < 10; ++j)
      if (j != i) q.distractors.push_back("cap" + std::to_string(j));
    qs.push_back(q);
  }
  const std::function<double(const std::string&, const std::string&)> perfect =
      [](const std::string& img, const std::string& cap) { return img.substr(3) == cap.substr(3) ? 1.0 : 0.0; };
  EXPECT_EQ(r_precision(qs, perfect).mean, 1.0);
  const std::function<double(const std::string&, const std::string&)> flat = [](const auto&, const auto&) { return 0.5; };
  EXPECT_EQ(r_precision(qs, flat).mean, 0.0);
  const auto batched = r_precision(qs, perfect, 5);
  EXPECT_EQ(batched.mean, 1.0);
  EXPECT_EQ(batched.std_err, 0.0);
  EXPECT_THROW(r_precision_hit(std::string("img0"), "cap0", {"cap1", "cap1"}, perfect), Error);
  EXPECT_THROW(r_precision_hit(std::string("img0"), "cap0", {"cap0"}, perfect), Error);
  EXPECT_THROW(r_precision_hit(std::string("img0"), "cap0", {}, perfect), Error);
}

TEST(StyleEval, SplitRule) {
  const auto [obs, unobs] = StyleSplitRule{}.split({"b", "e", "a", "d", "c", "a"});
  EXPECT_EQ(obs, (std::vector<std::string>{"a", "b", "c", "d"}));
  EXPECT_EQ(unobs, (std::vector<std::string>{"e"}));
  const auto [all, none] = StyleSplitRule{1.0}.split({"x", "y"});
  EXPECT_EQ(all.size(), 2u);
  EXPECT_TRUE(none.empty());
}

class StyleEvalFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    Rng rng(5);
    for (const std::string s : {"cubism", "op-art", "pointillism"})
      for (int i = 0; i < 2; ++i)
        paintings.push_back({corpus::render_painting(corpus::pattern_for_style(s), corpus::hue_color(40.0 * i), rng, 16), s});
    for (auto& s : corpus::synth_shapes(6, 3, 16)) contents.push_back(s.image);
  }
  std::vector<StyledImage> paintings;
  std::vector<Tensor> contents;
  styler::StylePredictor predictor = styler::StylePredictor::initialize({}, 1);
  styler::TransferNet transfer = styler::TransferNet::initialize({}, 1);
};

TEST_F(StyleEvalFixture, FourCellReportIsDeterministic) {
  StyleEvalConfig cfg;
  cfg.split.observed_fraction = 0.67;
  const auto a = eval_style_transfer(predictor, transfer, paintings, contents, cfg);
  const auto b = eval_style_transfer(predictor, transfer, paintings, contents, cfg);
  EXPECT_EQ(a.to_json(), b.to_json());
  EXPECT_EQ(a.observed.samples, 4u);
  EXPECT_EQ(a.unobserved.samples, 2u);
  EXPECT_EQ(a.unobserved.styles, (std::vector<std::string>{"pointillism"}));
  for (const auto* s : {&a.observed, &a.unobserved}) {
    EXPECT_GE(s->style, 0.0);
    EXPECT_GE(s->content, 0.0);
  }
  const std::string t = a.table();
  for (const char* cell : {"Observed    Style loss", "Content loss", "Unobserved  Style loss"})
    EXPECT_NE(t.find(cell), std::string::npos) << t;
  EXPECT_EQ(std::count(t.begin(), t.end(), '\n'), 5);
  EXPECT_EQ(a.model_id.size(), 16u);
}

TEST_F(StyleEvalFixture, EmptySplitIsNamed) {
  StyleEvalConfig cfg;
  cfg.split.observed_fraction = 1.0;
  try {
    eval_style_transfer(predictor, transfer, paintings, contents, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("unobserved"), std::string::npos);
  }
  cfg.split.observed_fraction = 0.0;
  try {
    eval_style_transfer(predictor, transfer, paintings, contents, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("observed split"), std::string::npos);
  }
  EXPECT_THROW(eval_style_transfer(predictor, transfer, paintings, {}, StyleEvalConfig{}), Error);
}

TEST(Reference, PublishedConstants) {
  EXPECT_EQ(reference::kCoco.is_mean, 32.43);
  EXPECT_EQ(reference::kCoco.r_precision_pct, 92.23);
  EXPECT_EQ(reference::kCoco.fid, 24.24);
  EXPECT_EQ(reference::kModelA.observed_style, 7.48e5);
  EXPECT_EQ(reference::kModelB.observed_style, 2.08e4);
  EXPECT_EQ(reference::kModelA.unobserved_style, 1.07e6);
  EXPECT_EQ(reference::kModelB.unobserved_style, 9.95e5);
  EXPECT_EQ(reference::kModelB.unobserved_content, 7.54e4);
}
