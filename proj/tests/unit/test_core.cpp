// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>

#include "atelier/core/autodiff.hpp"
#include "atelier/core/checkpoint.hpp"
#include "atelier/core/image.hpp"
#include "atelier/core/optim.hpp"
#include "support/gradcheck.hpp"

using namespace atelier;
using atelier::testing::check_gradients;

namespace {

ParamSet random_params(std::initializer_list<std::pair<std::string, Shape>> spec, std::uint64_t seed) {
  Rng rng(seed);
  ParamSet p;
  for (const auto& [name, shape] : spec) p.set(name, rng.normal_tensor(shape));
  return p;
}

// Weighted sum with fixed random weights so every output entry matters.
ad::Var readout(ad::Var y, std::uint64_t seed = 99) {
  Rng rng(seed);
  ad::Var w = y.tape->constant(rng.normal_tensor(y.shape()));
  return ad::sum(ad::mul(y, w));
}

}  // namespace

TEST(Autodiff, ElementwiseAndMatmulGradients) {
  auto p = random_params({{"a", {3, 4}}, {"b", {3, 4}}, {"m", {4, 2}}}, 1);
  for (double& v : p.at("b").values()) v = 1.5 + std::abs(v);  // keep divisor away from 0
  auto r = check_gradients(p, [](const Binding& b) {
    using namespace ad;
    Var x = add(mul(b["a"], b["b"]), div(b["a"], b["b"]));
    x = sub(tanh(x), sigmoid(scale(b["b"], 0.3)));
    return readout(matmul(x, b["m"]));
  });
  EXPECT_LT(r.worst, 1e-6) << r.report();
}

TEST(Autodiff, ReductionsSlicingAndBroadcasts) {
  auto p = random_params({{"x", {4, 6}}, {"v", {6}}, {"s", {4}}}, 2);
  auto r = check_gradients(p, [](const Binding& b) {
    using namespace ad;
    Var y = add_bias(b["x"], b["v"]);
    y = mul_rows(y, b["s"]);
    Var parts = concat_last({slice_last(y, 0, 2), slice_last(y, 3, 3), broadcast_rows(b["v"], 4)});
    Var t = transpose(parts);
    Var rows = stack_rows({row(t, 0), row(t, 2), row(t, 4)});
    return add(readout(rows), add(mean(exp(scale(b["v"], 0.1))), sum_squares(row_norms(b["x"]))));
  });
  EXPECT_LT(r.worst, 1e-6) << r.report();
}

TEST(Autodiff, SoftmaxFamilyGradients) {
  auto p = random_params({{"x", {3, 5}}}, 3);
  auto r = check_gradients(p, [](const Binding& b) {
    using namespace ad;
    Var sm = softmax_rows(b["x"], {true, false, true, true, true});
    Var ls = log_softmax_rows(b["x"]);
    return add(readout(sm), add(readout(ls, 5), sum(pick(ls, {0, 4, 2}))));
  });
  EXPECT_LT(r.worst, 1e-6) << r.report();
}

TEST(Autodiff, SoftmaxRowsAreDistributions) {
  ad::Tape t;
  Rng rng(4);
  auto x = t.constant(rng.normal_tensor({6, 7}, 5.0));
  const Tensor p = ad::softmax_rows(x).value();
  for (std::size_t i = 0; i < 6; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 7; ++j) {
      EXPECT_GE(p.at(i, j), 0.0);
      s += p.at(i, j);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Autodiff, SoftmaxMaskedRowIsUniformOverLiveColumns) {
  ad::Tape t;
  auto x = t.constant(Tensor({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6}));
  const Tensor p = ad::softmax_rows(x, {true, true, false}, {true, false}).value();
  EXPECT_EQ(p.at(1, 0), 0.5);
  EXPECT_EQ(p.at(1, 1), 0.5);
  EXPECT_EQ(p.at(1, 2), 0.0);
  EXPECT_EQ(p.at(0, 2), 0.0);
}

TEST(Autodiff, SpatialOpGradients) {
  auto p = random_params({{"x", {6, 5, 3}}, {"k", {3, 3, 3, 4}}, {"bias", {4}}, {"g", {4}}}, 5);
  auto r = check_gradients(p, [](const Binding& b) {
    using namespace ad;
    Var y = conv2d(b["x"], b["k"], b["bias"], 2, 1);
    Var z = instance_norm(upsample_nearest2(y));
    z = mul_channels(z, b["g"]);
    Var pooled = spatial_mean(leaky_relu(z));
    Var tiled = broadcast_spatial(pooled, 2, 2);
    return add(add(readout(gram(z)), readout(tiled, 7)), readout(y, 13));
  });
  EXPECT_LT(r.worst, 1e-6) << r.report();
}

TEST(Autodiff, ConvShapeArithmetic) {
  ad::Tape t;
  auto x = t.constant(Tensor({64, 64, 3}, 0.1));
  auto k = t.constant(Tensor({3, 3, 3, 8}, 0.0));
  auto b = t.constant(Tensor({8}, 0.0));
  auto y = ad::conv2d(x, k, b, 2, 1);
  EXPECT_EQ(y.shape(), (Shape{32, 32, 8}));
  EXPECT_EQ(ad::conv2d(x, k, b, 1, 1).shape(), (Shape{64, 64, 8}));
}

TEST(Autodiff, ReusedNodesAccumulateGradient) {
  ad::Tape t;
  auto x = t.variable(Tensor::scalar(3.0));
  auto y = ad::add(ad::mul(x, x), x);  // x^2 + x
  t.backward(y);
  EXPECT_DOUBLE_EQ(t.grad(x)[0], 7.0);
}

TEST(Checkpoint, RoundTripPreservesArraysAndConfig) {
  Checkpoint ck;
  ck.kind = "unit";
  ck.config = {{"width", 3}};
  Rng rng(8);
  ck.params.set("a.w", rng.normal_tensor({2, 3}));
  ck.params.set("b", rng.normal_tensor({4}));
  const auto dir = std::filesystem::temp_directory_path() / "atelier_ckpt_test";
  save_checkpoint(dir / "x.ckpt", ck);
  const Checkpoint back = load_checkpoint(dir / "x.ckpt", "unit");
  EXPECT_EQ(back.params, ck.params);
  EXPECT_EQ(back.config, ck.config);
  EXPECT_FALSE(std::filesystem::exists(dir / "x.ckpt.tmp"));
  EXPECT_THROW(load_checkpoint(dir / "x.ckpt", "other"), Error);
}

TEST(Checkpoint, RejectsBadMagicAndVersion) {
  Checkpoint ck{"unit", {}, {}};
  auto bytes = serialize_checkpoint(ck);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad), Error);
  bad = bytes;
  bad[8] = 9;  // version field
  try {
    deserialize_checkpoint(bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "incompatible_checkpoint");
  }
}

TEST(Image, PngRoundTripIsQuantizationExact) {
  Rng rng(3);
  Tensor img = rng.uniform_tensor({9, 11, 3}, 0.0, 1.0);
  for (double& v : img.values()) v = std::round(v * 255.0) / 255.0;
  const auto bytes = encode_png(img);
  EXPECT_EQ(bytes, encode_png(img));
  const Tensor back = decode_png(bytes);
  EXPECT_LT(max_abs_diff(back, img), 1e-12);
}

TEST(Image, ResizeOfConstantIsConstant) {
  Tensor img({10, 6, 3}, 0.25);
  const Tensor out = resize_bilinear(img, 64, 64);
  for (double v : out.values()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(Optim, AdamMinimizesQuadratic) {
  ParamSet p;
  p.set("x", Tensor::vector({3.0, -2.0}));
  Adam opt(0.1);
  for (int i = 0; i < 500; ++i) {
    ad::Tape t;
    Binding b(t, p);
    auto loss = ad::sum_squares(b["x"]);
    t.backward(loss);
    opt.step(p, b.gradients());
  }
  EXPECT_LT(squared_norm(p.at("x")), 1e-4);
}
