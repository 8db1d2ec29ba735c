// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "gruaunet/decoder/decoder.hpp"
#include "gruaunet/pipeline/gradcheck_suite.hpp"
#include "test_util.hpp"

namespace gruaunet {
namespace {

using testing::expect_gradcheck_pass;
using testing::expect_near_tensor;

ParamSet<double> gru_params(std::size_t D, std::size_t H, std::uint64_t seed) {
  ParamSet<double> p;
  Rng rng(seed);
  decoder::init_gru(p, "g.", D, H, rng);
  return p;
}

TEST(GruCell, ZeroWeightsHalveState) {
  ParamSet<double> p = gru_params(3, 4, 1);
  for (auto& e : p.entries()) e.value.fill(0.0);
  Graph<double> g;
  Tensor<double> h = Tensor<double>::from({4}, {1, -2, 3, 0.5});
  Var<double> out = decoder::gru_cell(g, p, "g.", g.constant(Tensor<double>(Shape{3}, 0.7)), g.constant(h));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(out.value()[i], 0.5 * h[i]);
  Var<double> zero = decoder::gru_cell(g, p, "g.", g.constant(Tensor<double>(Shape{3}, 0.7)),
                                       g.constant(Tensor<double>(Shape{4})));
  for (double v : zero.value().data()) EXPECT_EQ(v, 0.0);
}

// Independent scalar evaluation of the update equations.
std::vector<double> gru_oracle(const ParamSet<double>& p, const std::vector<double>& x, const std::vector<double>& h) {
  const std::size_t H = h.size(), D = x.size();
  auto affine = [&](const char* gate, const std::vector<double>& in, std::size_t j) {
    const Tensor<double>& w = p.get(std::string("g.") + gate + ".w");
    double acc = p.get(std::string("g.") + gate + ".b")[j];
    for (std::size_t i = 0; i < H + D; ++i) acc += in[i] * w[i * H + j];
    return acc;
  };
  std::vector<double> hx(h);
  hx.insert(hx.end(), x.begin(), x.end());
  std::vector<double> z(H), r(H), out(H);
  for (std::size_t j = 0; j < H; ++j) {
    z[j] = 1.0 / (1.0 + std::exp(-affine("z", hx, j)));
    r[j] = 1.0 / (1.0 + std::exp(-affine("r", hx, j)));
  }
  std::vector<double> rhx(hx);
  for (std::size_t j = 0; j < H; ++j) rhx[j] = r[j] * h[j];
  for (std::size_t j = 0; j < H; ++j) {
    const double n = std::tanh(affine("n", rhx, j));
    out[j] = (1 - z[j]) * n + z[j] * h[j];
  }
  return out;
}

TEST(GruCell, MatchesScalarOracle) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    ParamSet<double> p = gru_params(5, 6, 10 + s);
    Rng rng(20 + s);
    Tensor<double> x = rng.normal_tensor<double>({5}, 1.0), h = rng.normal_tensor<double>({6}, 1.0);
    Graph<double> g;
    Var<double> out = decoder::gru_cell(g, p, "g.", g.constant(x), g.constant(h));
    auto ref = gru_oracle(p, {x.data().begin(), x.data().end()}, {h.data().begin(), h.data().end()});
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(out.value()[i], ref[i], 1e-6);
  }
}

TEST(GruCell, StateStaysBetweenCandidateAndPrevious) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    ParamSet<double> p = gru_params(4, 4, 30 + s);
    Rng rng(40 + s);
    Tensor<double> x = rng.normal_tensor<double>({4}, 2.0), h = rng.normal_tensor<double>({4}, 1.0);
    Graph<double> g;
    Var<double> hv = g.constant(h);
    Var<double> out = decoder::gru_cell(g, p, "g.", g.constant(x), hv);
    // candidate n recomputed by the independent oracle with z forced to 0
    ParamSet<double> q = p;
    q.get("g.z.w").fill(0.0);
    q.get("g.z.b").fill(-800.0);
    auto n = gru_oracle(q, {x.data().begin(), x.data().end()}, {h.data().begin(), h.data().end()});
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_GE(out.value()[i], std::min(n[i], h[i]) - 1e-12);
      EXPECT_LE(out.value()[i], std::max(n[i], h[i]) + 1e-12);
    }
  }
}

TEST(GruCell, RejectsDimMismatch) {
  ParamSet<double> p = gru_params(3, 4, 1);
  Graph<double> g;
  EXPECT_THROW(decoder::gru_cell(g, p, "g.", g.constant(Tensor<double>(Shape{2})), g.constant(Tensor<double>(Shape{4}))),
               ShapeError);
}

ParamSet<double> gate_params(std::size_t C, std::size_t prev, std::uint64_t seed) {
  ParamSet<double> p;
  Rng rng(seed);
  decoder::init_attention_gate(p, "a.", C, prev, decoder::DecoderConfig{}, rng);
  return p;
}

void saturate_gate(ParamSet<double>& p, const std::string& prefix, double bias) {
  for (const char* n : {"fc2.w", "hfc.w", "spatial.w"}) p.get(prefix + n).fill(0.0);
  for (const char* n : {"fc2.b", "hfc.b", "spatial.b"}) p.get(prefix + n).fill(bias);
}

TEST(AttentionGate, SaturatedGatesPassEncoderThrough) {
  ParamSet<double> p = gate_params(8, 0, 3);
  saturate_gate(p, "a.", 50.0);
  Rng rng(4);
  Tensor<double> enc = rng.normal_tensor<double>({8, 4, 4}, 1.0);
  Graph<double> g;
  auto r = decoder::attention_gate(g, p, "a.", g.constant(enc), g.constant(rng.normal_tensor<double>({8, 4, 4}, 1.0)),
                                   nullptr);
  expect_near_tensor(r.gated.value(), enc, 1e-12);
}

TEST(AttentionGate, ClosedChannelGateAnnihilates) {
  ParamSet<double> p = gate_params(8, 0, 3);
  p.get("a.fc2.w").fill(0.0);
  p.get("a.fc2.b").fill(-800.0);
  Rng rng(4);
  Graph<double> g;
  auto r = decoder::attention_gate(g, p, "a.", g.constant(rng.normal_tensor<double>({8, 4, 4}, 1.0)),
                                   g.constant(rng.normal_tensor<double>({8, 4, 4}, 1.0)), nullptr);
  for (double v : r.gated.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(AttentionGate, CoefficientsStrictlyInsideUnitInterval) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    ParamSet<double> p = gate_params(8, 6, 50 + s);
    Rng rng(60 + s);
    Graph<double> g;
    Var<double> h = g.constant(rng.normal_tensor<double>({6}, 1.0));
    auto r = decoder::attention_gate(g, p, "a.", g.constant(rng.normal_tensor<double>({8, 4, 4}, 1.0)),
                                     g.constant(rng.normal_tensor<double>({8, 4, 4}, 1.0)), &h);
    for (const auto* t : {&r.channel_gate.value(), &r.spatial_gate.value()})
      for (double v : t->data()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
      }
    EXPECT_EQ(r.hidden.shape(), Shape{8});
  }
}

TEST(AttentionGate, SpatialMismatch) {
  ParamSet<double> p = gate_params(8, 0, 3);
  Graph<double> g;
  EXPECT_THROW(decoder::attention_gate(g, p, "a.", g.constant(Tensor<double>(Shape{8, 4, 4})),
                                       g.constant(Tensor<double>(Shape{8, 2, 2})), nullptr),
               ShapeError);
}

TEST(PatchExpand, ShapeContract) {
  ParamSet<float> p;
  Rng rng(1);
  p.add("e.w", rng.normal_tensor<float>({32, 64}, 0.1));
  Graph<float> g;
  Var<float> y = decoder::patch_expand(g, p, "e.", g.constant(Tensor<float>(Shape{4, 4, 32}, 1.0f)));
  EXPECT_EQ(y.shape(), (Shape{8, 8, 16}));
  ParamSet<float> q;
  q.add("e.w", rng.normal_tensor<float>({3, 6}, 0.1));
  EXPECT_THROW(decoder::patch_expand(g, q, "e.", g.constant(Tensor<float>(Shape{2, 2, 3}))), ShapeError);
}

TEST(PatchExpand, InvertsMergeShape) {
  ParamSet<float> p;
  Rng rng(2);
  swin::init_layer_norm(p, "m.norm.", 32);
  swin::init_linear(p, "m.reduction.", 32, 16, rng, false);
  p.add("e.w", rng.normal_tensor<float>({16, 32}, 0.1));
  Graph<float> g;
  Var<float> x = g.constant(rng.normal_tensor<float>({8, 8, 8}, 1.0));
  Var<float> y = decoder::patch_expand(g, p, "e.", swin::patch_merging(g, p, "m.", x));
  EXPECT_EQ(y.shape(), x.shape());
}

TEST(PatchExpand, PixelShuffleLayout) {
  ParamSet<double> p;
  Tensor<double> eye(Shape{2, 4});
  eye[0] = 1;  // channel 0 -> out channel 0
  eye[7] = 1;  // channel 1 -> out channel 3
  p.add("e.w", eye);
  Graph<double> g;
  Var<double> y = decoder::patch_expand(g, p, "e.", g.constant(Tensor<double>::from({1, 1, 2}, {5, 7})));
  // neighbour order (0,0),(1,0),(0,1),(1,1)
  EXPECT_EQ(y.value().at({0, 0, 0}), 5.0);
  EXPECT_EQ(y.value().at({1, 1, 0}), 7.0);
  EXPECT_EQ(y.value().at({1, 0, 0}), 0.0);
}

struct ToyDecoder {
  swin::EncoderConfig enc = swin::EncoderConfig::toy();
  decoder::DecoderConfig cfg;
  ParamSet<double> params;
  std::vector<Tensor<double>> stages;
  explicit ToyDecoder(std::uint64_t seed) {
    Rng rng(seed);
    decoder::init_decoder(params, enc, cfg, rng);
    stages.push_back(rng.normal_tensor<double>({16, 16, 16}, 1.0));
    stages.push_back(rng.normal_tensor<double>({8, 8, 32}, 1.0));
  }
  decoder::DecoderOutput<double> run(Graph<double>& g, const decoder::DecoderConfig& c) const {
    std::vector<Var<double>> st{g.constant(stages[0]), g.constant(stages[1])};
    return decoder::decoder_forward(g, params, st[1], st, enc, c);
  }
};

TEST(Decoder, ToyShapes) {
  ToyDecoder d(1);
  Graph<double> g;
  auto out = d.run(g, d.cfg);
  EXPECT_EQ(out.features.shape(), (Shape{16, 16, 16}));
  ASSERT_EQ(out.hidden.size(), 1u);
  double norm = 0;
  for (double v : out.hidden[0].value().data()) norm += std::abs(v);
  EXPECT_GT(norm, 0.0);
}

TEST(Decoder, SaturatedGatesEqualBypass) {
  ToyDecoder d(2);
  saturate_gate(d.params, "dec.level0.gate.", 50.0);
  Graph<double> g1, g2;
  decoder::DecoderConfig bypass = d.cfg;
  bypass.bypass_gates = true;
  auto a = d.run(g1, d.cfg);
  auto b = d.run(g2, bypass);
  expect_near_tensor(a.features.value(), b.features.value(), 1e-9);
}

TEST(Decoder, Deterministic) {
  ToyDecoder a(5), b(5);
  Graph<double> g1, g2;
  EXPECT_EQ(a.run(g1, a.cfg).features.value(), b.run(g2, b.cfg).features.value());
}

TEST(Decoder, HiddenStateFlowsAcrossLevels) {
  swin::EncoderConfig enc = suite::tiny_encoder();
  enc.image_size = 32;
  enc.depths = {1, 1, 1};
  enc.heads = {2, 2, 4};
  decoder::DecoderConfig cfg;
  cfg.blocks_per_level = 1;
  ParamSet<double> p;
  Rng rng(9);
  decoder::init_decoder(p, enc, cfg, rng);
  Graph<double> g;
  std::vector<Var<double>> st;
  for (std::size_t s = 0; s < 3; ++s) st.push_back(g.constant(rng.normal_tensor<double>({enc.grid(s), enc.grid(s), enc.dim(s)}, 1.0)));
  auto out = decoder::decoder_forward(g, p, st[2], st, enc, cfg);
  ASSERT_EQ(out.hidden.size(), 2u);
  EXPECT_EQ(out.hidden[0].shape(), Shape{16});
  EXPECT_EQ(out.hidden[1].shape(), Shape{8});
  for (std::size_t l = 0; l < 2; ++l) EXPECT_EQ(out.levels[l].shape(), st[1 - l].shape());
  EXPECT_EQ(out.features.shape(), (Shape{8, 16, 16}));
}

TEST(Decoder, ShapeMirrorAcrossConfigs) {
  Rng pick(13);
  for (int trial = 0; trial < 4; ++trial) {
    swin::EncoderConfig enc;
    enc.window_size = 2 + 2 * pick.below(2);
    enc.patch_size = 2;
    enc.embed_dim = 4 * (1 + pick.below(2));
    enc.depths.assign(2 + pick.below(2), 1);
    enc.heads.assign(enc.depths.size(), 2);
    enc.image_size = enc.patch_size * enc.window_size * (1u << (enc.depths.size() - 1));
    enc.mlp_ratio = 1.0;
    decoder::DecoderConfig cfg;
    cfg.blocks_per_level = 1;
    cfg.gate_reduction = 2;
    ParamSet<float> p;
    Rng rng(trial);
    swin::init_encoder(p, enc, rng);
    decoder::init_decoder(p, enc, cfg, rng);
    Graph<float> g;
    auto e = swin::encoder_forward(g, p, g.constant(rng.uniform_tensor<float>({3, enc.image_size, enc.image_size}, 0, 1)), enc);
    auto d = decoder::decoder_forward(g, p, e.bottleneck, e.stages, enc, cfg);
    for (std::size_t l = 0; l < d.levels.size(); ++l) EXPECT_EQ(d.levels[l].shape(), e.stages[enc.stages() - 2 - l].shape());
  }
}

class DecoderGrad : public ::testing::TestWithParam<int> {};

TEST_P(DecoderGrad, MatchesFiniteDifferences) {
  for (const auto& c : suite::cases("decoder")) expect_gradcheck_pass(c.run(static_cast<std::uint64_t>(GetParam())));
}

INSTANTIATE_TEST_SUITE_P(ThreePoints, DecoderGrad, ::testing::Values(0, 1, 2));

}  // namespace
}  // namespace gruaunet
