// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <map>

#include "atelier/corpus/synth.hpp"
#include "atelier/genre/classifier.hpp"
#include "atelier/genre/recommend.hpp"
#include "support/gradcheck.hpp"

using namespace atelier;
using namespace atelier::genre;
using atelier::testing::check_gradients;

namespace {

ParamSet block_params(std::size_t cin, std::size_t cout, bool project, std::uint64_t seed) {
  Rng rng(seed);
  ParamSet p;
  auto b = init_residual_block(rng, cin, cout, project);
  b.b1 = rng.normal_tensor(b.b1.shape(), 0.2);
  b.b2 = rng.normal_tensor(b.b2.shape(), 0.2);
  add_residual_block(p, "blk", b);
  return p;
}

std::vector<corpus::PaintingRecord> records(std::initializer_list<std::tuple<const char*, const char*, int>> spec) {
  std::vector<corpus::PaintingRecord> out;
  for (const auto& [genre, style, n] : spec)
    for (int i = 0; i < n; ++i) out.push_back({"p" + std::to_string(out.size()), style, genre});
  return out;
}

}  // namespace

TEST(ResidualBlock, ZeroResidualPathIsIdentityOnNonNegativeInput) {
  ParamSet p = block_params(4, 4, false, 1);
  for (const char* n : {"blk.c1.k", "blk.c1.b", "blk.c2.k", "blk.c2.b"}) p.at(n).fill(0.0);
  Rng rng(2);
  const Tensor x = rng.uniform_tensor({5, 5, 4}, 0.0, 2.0);
  ad::Tape t;
  Binding b(t, p, false);
  EXPECT_EQ(residual_block(b, "blk", t.constant(x)).value(), x);
}

TEST(ResidualBlock, ProjectionShapeAndMissingProjection) {
  const ParamSet p = block_params(16, 32, true, 3);
  ad::Tape t;
  Binding b(t, p, false);
  EXPECT_EQ(residual_block(b, "blk", t.constant(Tensor({8, 8, 16}, 0.1))).shape(), (Shape{8, 8, 32}));
  EXPECT_EQ(residual_block(b, "blk", t.constant(Tensor({8, 8, 16}, 0.1)), 2).shape(), (Shape{4, 4, 32}));
  const ParamSet q = block_params(4, 4, false, 4);
  Binding bq(t, q, false);
  try {
    residual_block(bq, "blk", t.constant(Tensor({8, 8, 4}, 0.1)), 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "shape_mismatch");
  }
}

TEST(ResidualBlock, GradientsMatchFiniteDifferences) {
  for (bool project : {false, true}) {
    ParamSet p = block_params(3, project ? 5 : 3, project, 5);
    Rng rng(6);
    p.set("x", rng.normal_tensor({5, 4, 3}));
    auto r = check_gradients(p, [&](const Binding& b) {
      Rng w(8);
      auto y = residual_block(b, "blk", b["x"], project ? 2 : 1);
      return ad::sum(ad::mul(y, b.tape().constant(w.normal_tensor(y.shape()))));
    });
    EXPECT_LT(r.worst, 1e-4) << r.report();
  }
}

TEST(Classify, ProbabilitiesAreDistributions) {
  const auto model = GenreClassifier::initialize(corpus::default_genres(), 1);
  Rng rng(7);
  for (int i = 0; i < 5; ++i) {
    const auto d = model.classify(rng.uniform_tensor({40, 48, 3}, 0, 1));
    EXPECT_NEAR(sum(d.probabilities), 1.0, 1e-6);
    for (double v : d.probabilities.values()) EXPECT_GE(v, 0.0);
    EXPECT_EQ(d.probabilities.size(), 10u);
  }
  const Tensor img = rng.uniform_tensor({64, 64, 3}, 0, 1);
  EXPECT_EQ(model.classify(img).probabilities, model.classify(img).probabilities);
}

TEST(Classify, DominantLogitAndShiftInvariance) {
  const std::vector<std::string> g = {"a", "b", "c", "d"};
  const auto d = distribution_from_logits(g, Tensor::vector({0.0, 50.0, 0.0, 0.0}));
  EXPECT_GT(d.probabilities[1], 1.0 - 1e-9);
  EXPECT_EQ(d.genre(), "b");
  Rng rng(8);
  for (int i = 0; i < 20; ++i) {
    Tensor l = rng.normal_tensor({4}, 3.0);
    Tensor shifted = l;
    for (double& v : shifted.values()) v += 17.5;
    EXPECT_EQ(distribution_from_logits(g, l).label, distribution_from_logits(g, shifted).label);
  }
}

TEST(Classify, CheckpointRoundTripAndKindCheck) {
  const auto model = GenreClassifier::initialize({"x", "y"}, 2);
  const auto back = GenreClassifier::from_checkpoint(deserialize_checkpoint(serialize_checkpoint(model.to_checkpoint())));
  EXPECT_EQ(back.params(), model.params());
  EXPECT_EQ(back.genres(), model.genres());
  Checkpoint other = model.to_checkpoint();
  other.kind = "dmgan";
  EXPECT_THROW(GenreClassifier::from_checkpoint(other), Error);
}

TEST(Finetune, ZeroEpochsReturnsBaseAndSingleGenreRejected) {
  const auto base = GenreClassifier::initialize({"red", "blue"}, 3);
  std::vector<LabeledImage> data = {{Tensor({16, 16, 3}, 0.1), "red"}, {Tensor({16, 16, 3}, 0.9), "blue"}};
  FinetuneConfig cfg;
  cfg.epochs = 0;
  const auto r = finetune(data, base, cfg);
  EXPECT_EQ(r.model.params(), base.params());
  EXPECT_TRUE(r.trace.empty());
  data.pop_back();
  EXPECT_THROW(finetune(data, base, cfg), Error);
}

TEST(Finetune, LearnsColorDeterminedGenres) {
  corpus::PaintingCorpusConfig pc;
  pc.genres = {"g0", "g1", "g2", "g3"};
  pc.paintings_per_genre = 10;
  std::vector<LabeledImage> data;
  for (const auto& s : corpus::synth_paintings(4, pc)) data.push_back({s.image, s.genre, s.split});
  FinetuneConfig cfg;
  cfg.epochs = 4;
  const auto r = finetune(data, GenreClassifier::initialize(pc.genres, 5), cfg);
  ASSERT_EQ(r.trace.size(), 4u);
  for (const auto& e : r.trace) {
    EXPECT_GE(e.train_acc, 0.0);
    EXPECT_LE(e.test_acc, 1.0);
  }
  EXPECT_GE(r.trace[r.best_epoch - 1].test_acc, 0.75);
  EXPECT_EQ(accuracy(r.model, {}, {}), 0.0);
}

TEST(Recommend, CountsTiesAndLimits) {
  const auto stats = corpus::style_frequency_table(
      records({{"landscape", "impressionism", 10}, {"landscape", "cubism", 2}, {"portrait", "op-art", 3},
               {"portrait", "cubism", 3}, {"portrait", "baroque", 5}}));
  const auto one = recommend_styles("landscape", stats, 1);
  ASSERT_EQ(one.styles.size(), 1u);
  EXPECT_EQ(one.styles[0].first, "impressionism");
  EXPECT_EQ(one.styles[0].second, 10u);
  EXPECT_EQ(recommend_styles("landscape", stats, 10).styles.size(), 2u);
  const auto p = recommend_styles("portrait", stats, 3);
  EXPECT_EQ(p.styles[0].first, "baroque");
  EXPECT_EQ(p.styles[1].first, "cubism");
  EXPECT_EQ(p.styles[2].first, "op-art");
  EXPECT_TRUE(recommend_styles("marina", stats, 3).styles.empty());
  EXPECT_THROW(recommend_styles("landscape", stats, 0), Error);
  EXPECT_THROW(recommend_styles("landscape", stats, -2), Error);
}

TEST(PickPainting, SingleCandidateFixedSeedAndAbsentStyle) {
  const auto corpus = records({{"landscape", "impressionism", 1}, {"landscape", "cubism", 4}});
  for (std::uint64_t s = 0; s < 10; ++s) EXPECT_EQ(pick_painting("impressionism", corpus, s).image_path, "p0");
  EXPECT_EQ(pick_painting("cubism", corpus, 42), pick_painting("cubism", corpus, 42));
  EXPECT_THROW(pick_painting("fauvism", corpus, 1), Error);
  std::set<std::string> visited;
  for (std::uint64_t s = 9; s < 13; ++s) visited.insert(pick_painting("cubism", corpus, s).image_path.string());
  EXPECT_EQ(visited.size(), 4u);
}

TEST(PickPainting, UniformOverSeeds) {
  const auto corpus = records({{"g", "s", 4}});
  std::map<std::string, int> counts;
  const int n = 10000;
  Rng rng(11);
  for (int i = 0; i < n; ++i) ++counts[pick_painting("s", corpus, rng.engine()()).image_path.string()];
  const double expect = n / 4.0, sd = std::sqrt(n * 0.25 * 0.75);
  ASSERT_EQ(counts.size(), 4u);
  for (const auto& [_, c] : counts) EXPECT_LE(std::abs(c - expect), 3.0 * sd);
}
