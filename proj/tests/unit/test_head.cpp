// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "gruaunet/head/classifier.hpp"
#include "gruaunet/pipeline/gradcheck_suite.hpp"
#include "test_util.hpp"

namespace gruaunet {
namespace {

using testing::expect_gradcheck_pass;
using testing::expect_near_tensor;

ParamSet<double> cbam_params(std::size_t C, std::uint64_t seed) {
  ParamSet<double> p;
  Rng rng(seed);
  head::init_cbam_gru(p, "c.", C, suite::tiny_head(), rng);
  return p;
}

TEST(CbamGru, SaturatedMapsAreIdentity) {
  ParamSet<double> p = cbam_params(8, 1);
  for (const char* n : {"c.fc1.w", "c.fc2.w", "c.hfc.w", "c.spatial.w"}) p.get(n).fill(0.0);
  p.get("c.fc2.b").fill(30.0);
  p.get("c.spatial.b").fill(40.0);
  Rng rng(2);
  Tensor<double> x = rng.normal_tensor<double>({8, 5, 5}, 1.0);
  Graph<double> g;
  auto r = head::cbam_gru_block(g, p, "c.", g.constant(x), nullptr, 4);
  expect_near_tensor(r.out.value(), x, 1e-12);
}

TEST(CbamGru, ZeroInputGivesZeroOutput) {
  ParamSet<double> p = cbam_params(8, 3);
  Rng rng(4);
  Tensor<double> h = rng.normal_tensor<double>({4}, 1.0);
  Graph<double> g;
  Var<double> hv = g.constant(h);
  auto r = head::cbam_gru_block(g, p, "c.", g.constant(Tensor<double>(Shape{8, 4, 4})), &hv, 4);
  for (double v : r.out.value().data()) EXPECT_EQ(v, 0.0);

  // d is driven by the MLP biases alone: 2 * (fc2.w^T relu(fc1.b) + fc2.b).
  const Tensor<double>& b1 = p.get("c.fc1.b");
  const Tensor<double>& w2 = p.get("c.fc2.w");
  const Tensor<double>& b2 = p.get("c.fc2.b");
  Tensor<double> d(Shape{8});
  for (std::size_t j = 0; j < 8; ++j) {
    double acc = b2[j];
    for (std::size_t i = 0; i < 2; ++i) acc += std::max(b1[i], 0.0) * w2[i * 8 + j];
    d[j] = 2 * acc;
  }
  Graph<double> g2;
  Var<double> expect = decoder::gru_cell(g2, p, "c.gru.", g2.constant(d), g2.constant(h));
  expect_near_tensor(r.hidden.value(), expect.value(), 1e-12);
}

TEST(CbamGru, MapsBoundedAndGatingShrinks) {
  for (std::uint64_t s = 0; s < 4; ++s) {
    ParamSet<double> p = cbam_params(8, 10 + s);
    Rng rng(20 + s);
    Tensor<double> x = rng.normal_tensor<double>({8, 6, 6}, 3.0);
    Graph<double> g;
    auto r = head::cbam_gru_block(g, p, "c.", g.constant(x), nullptr, 4);
    for (double v : r.channel_map.value().data()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
    for (double v : r.spatial_map.value().data()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
    EXPECT_EQ(r.spatial_map.shape(), (Shape{1, 6, 6}));
    EXPECT_EQ(r.hidden.shape(), Shape{4});
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LE(std::abs(r.out.value()[i]), std::abs(x[i]));
  }
}

TEST(CbamGru, RejectsNonSpatialInput) {
  ParamSet<double> p = cbam_params(8, 1);
  Graph<double> g;
  EXPECT_THROW(head::cbam_gru_block(g, p, "c.", g.constant(Tensor<double>(Shape{8, 4})), nullptr, 4), ShapeError);
}

struct HeadFixture {
  head::HeadConfig cfg = suite::tiny_head();
  ParamSet<double> p;
  explicit HeadFixture(std::uint64_t seed, std::size_t in = 6) {
    Rng rng(seed);
    head::init_head(p, in, cfg, rng);
  }
};

TEST(Head, ZeroFinalLayerGivesHalf) {
  HeadFixture f(1);
  f.p.get("head.fc.w").fill(0.0);
  f.p.get("head.fc.b").fill(0.0);
  Rng rng(2);
  Graph<double> g;
  Var<double> prob = head::classify(g, f.p, g.constant(rng.normal_tensor<double>({6, 8, 8}, 1.0)), f.cfg);
  EXPECT_DOUBLE_EQ(prob.value()[0], 0.5);
  f.p.get("head.fc.b").fill(1.5);
  Graph<double> g2;
  prob = head::classify(g2, f.p, g2.constant(rng.normal_tensor<double>({6, 8, 8}, 1.0)), f.cfg);
  EXPECT_NEAR(prob.value()[0], 1.0 / (1.0 + std::exp(-1.5)), 1e-15);
}

TEST(Head, ProbabilityInOpenIntervalAndMatchesLogitSign) {
  for (std::uint64_t s = 0; s < 8; ++s) {
    HeadFixture f(30 + s);
    Rng rng(40 + s);
    Graph<double> g;
    auto out = head::head_forward(g, f.p, g.constant(rng.normal_tensor<double>({6, 8, 8}, 2.0)), f.cfg);
    const double prob = out.prob.value()[0], logit = out.logit.value()[0];
    EXPECT_GT(prob, 0.0);
    EXPECT_LT(prob, 1.0);
    EXPECT_EQ(prob >= 0.5, logit >= 0.0);
    EXPECT_EQ(out.logit.shape(), Shape{1});
  }
}

TEST(Head, EmbeddingContract) {
  HeadFixture f(5);
  Rng rng(6);
  Tensor<double> a = rng.normal_tensor<double>({6, 8, 8}, 1.0);
  Tensor<double> b = rng.normal_tensor<double>({6, 8, 8}, 1.0);
  Graph<double> g;
  Var<double> ea = head::embed(g, f.p, g.constant(a), f.cfg);
  Var<double> ea2 = head::embed(g, f.p, g.constant(a), f.cfg);
  Var<double> eb = head::embed(g, f.p, g.constant(b), f.cfg);
  EXPECT_EQ(ea.shape(), Shape{f.cfg.embedding_dim()});
  EXPECT_EQ(ea.value(), ea2.value());
  auto dist = [](const Tensor<double>& x, const Tensor<double>& y) {
    double s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
    return std::sqrt(s);
  };
  EXPECT_EQ(dist(ea.value(), ea2.value()), 0.0);
  EXPECT_NEAR(dist(ea.value(), eb.value()), dist(eb.value(), ea.value()), 1e-7);
}

TEST(Head, HiddenChainsFromFreshZeros) {
  HeadFixture f(7);
  Rng rng(8);
  Graph<double> g;
  auto out = head::head_forward(g, f.p, g.constant(rng.normal_tensor<double>({6, 8, 8}, 1.0)), f.cfg);
  ASSERT_EQ(out.blocks.size(), 2u);
  Graph<double> g2;
  Var<double> zero = g2.constant(Tensor<double>(Shape{f.cfg.hidden}));
  auto first = head::cbam_gru_block(g2, f.p, head::block_prefix(0) + "cbam.", g2.constant(out.block_inputs[0].value()),
                                    &zero, f.cfg.hidden);
  expect_near_tensor(first.hidden.value(), out.blocks[0].hidden.value(), 1e-14);
  Var<double> h1 = g2.constant(out.blocks[0].hidden.value());
  auto second = head::cbam_gru_block(g2, f.p, head::block_prefix(1) + "cbam.",
                                     g2.constant(out.block_inputs[1].value()), &h1, f.cfg.hidden);
  expect_near_tensor(second.out.value(), out.blocks[1].out.value(), 1e-14);
}

TEST(Head, ConfigValidation) {
  head::HeadConfig c;
  EXPECT_NO_THROW(c.validate());
  c.widths = {64, 30};
  EXPECT_THROW(c.validate(), ConfigError);
  c.widths = {};
  EXPECT_THROW(c.validate(), ConfigError);
  c = head::HeadConfig{};
  c.conv_kernel = 4;
  EXPECT_THROW(c.validate(), ConfigError);
}

class HeadGrad : public ::testing::TestWithParam<int> {};

TEST_P(HeadGrad, MatchesFiniteDifferences) {
  for (const auto& c : suite::cases("head")) expect_gradcheck_pass(c.run(static_cast<std::uint64_t>(GetParam())));
}

INSTANTIATE_TEST_SUITE_P(ThreePoints, HeadGrad, ::testing::Values(0, 1, 2));

}  // namespace
}  // namespace gruaunet
