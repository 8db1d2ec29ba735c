// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <iomanip>
#include <ostream>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gruaunet/decoder/decoder.hpp"
#include "gruaunet/dfn/dfn.hpp"
#include "gruaunet/head/classifier.hpp"
#include "gruaunet/loss/losses.hpp"
#include "gruaunet/swin/encoder.hpp"
#include "gruaunet/tensor/gradcheck.hpp"
#include "gruaunet/tensor/ops.hpp"

namespace gruaunet::suite {

/// One named gradient check, evaluated at a point drawn from `seed`.
struct GradCheckCase {
  std::string module;
  std::string name;
  std::function<GradCheckReport(std::uint64_t seed)> run;
};

/// sum(out * r) with fixed pseudo-random r.
inline Var<double> readout(Graph<double>& g, const Var<double>& out, std::uint64_t seed = 99) {
  Rng rng(seed);
  return sum(mul(out, g.constant(rng.normal_tensor<double>(out.shape(), 1.0))));
}

/// Sampling scales for composite check points. Central differences at
/// eps 1e-3 are third-order accurate only where every nonlinearity sees
/// inputs that are wide relative to eps, so the composite cases draw points
/// with unit temperatures, large query/key projections, small
/// pre-activations and wide layer-norm inputs.
struct PointScales {
  double weight = 0.1;
  double qkv = 20.0;
  double bias = 0.01;
  double input = 10.0;
  double filter_bank = 10.0;
};

/// Applies the scales to every entry whose name contains `scope`.
inline void condition_point(ParamSet<double>& p, Rng& rng, const PointScales& s = {}, const std::string& scope = "") {
  auto ends_with = [](const std::string& n, const char* suf) {
    const std::string t(suf);
    return n.size() >= t.size() && n.compare(n.size() - t.size(), t.size(), t) == 0;
  };
  for (auto& e : p.entries()) {
    if (e.name.find(scope) == std::string::npos) continue;
    if (e.kind == ParamKind::LogTemperature) {
      e.value.fill(0.0);
    } else if (e.kind == ParamKind::FilterBank) {
      for (auto& v : e.value.data()) v *= s.filter_bank;
    } else if (ends_with(e.name, "gamma")) {
      for (auto& v : e.value.data()) v = rng.uniform(0.5, 1.5);
    } else if (ends_with(e.name, ".b") || ends_with(e.name, "beta") || ends_with(e.name, "bias")) {
      for (auto& v : e.value.data()) v = s.bias * rng.normal();
    } else if (ends_with(e.name, "qkv.w")) {
      for (auto& v : e.value.data()) v *= s.qkv;
    } else if (ends_with(e.name, ".w") && e.kind == ParamKind::Weight) {
      for (auto& v : e.value.data()) v *= s.weight;
    }
  }
}

/// Moves an attention gate away from its channel-max kink: channel 0 of the
/// gate input dominates at every position.
inline void condition_gate(ParamSet<double>& p, const std::string& prefix, Rng& rng) {
  Tensor<double>& pb = p.get(prefix + "proj.b");
  for (auto& v : pb.data()) v = 0.01 * rng.normal();
  pb[0] += 3.0;
  for (auto& v : p.get(prefix + "spatial.w").data()) v *= 0.1;
}

/// Shifts a ReLU layer's bias so every hidden pre-activation observed at
/// the point (one tensor per use of the layer) lands at distance >= 0.5
/// from the kink, on a random side shared by all uses.
inline void clear_relu_kinks(ParamSet<double>& p, const std::string& bias, const std::vector<Tensor<double>>& zs,
                             Rng& rng) {
  Tensor<double>& b = p.get(bias);
  for (std::size_t j = 0; j < b.size(); ++j) {
    double lo = zs[0][j], hi = zs[0][j];
    for (const auto& z : zs) {
      lo = std::min(lo, z[j]);
      hi = std::max(hi, z[j]);
    }
    const double margin = 0.5 + rng.uniform();
    b[j] += rng.uniform() < 0.5 ? margin - lo : -margin - hi;
  }
}

/// Smallest gap between the largest and second-largest entry of every
/// channel (over positions) and/or of every position (over channels) of a
/// [C,H,W] map.
inline double max_tie_gap(const Tensor<double>& x, bool over_positions = true, bool over_channels = true) {
  const std::size_t C = x.shape()[0], P = x.size() / C;
  auto gap = [](std::vector<double> v) {
    if (v.size() < 2) return 1e300;
    std::partial_sort(v.begin(), v.begin() + 2, v.end(), std::greater<>());
    return v[0] - v[1];
  };
  double best = 1e300;
  std::vector<double> buf;
  for (std::size_t c = 0; over_positions && c < C; ++c) {
    buf.assign(x.ptr() + c * P, x.ptr() + (c + 1) * P);
    best = std::min(best, gap(buf));
  }
  for (std::size_t i = 0; over_channels && i < P; ++i) {
    buf.clear();
    for (std::size_t c = 0; c < C; ++c) buf.push_back(x[c * P + i]);
    best = std::min(best, gap(buf));
  }
  return best;
}

/// Keeps GRU gates away from saturation.
inline void shrink_gru(ParamSet<double>& p, const std::string& prefix) {
  for (const char* gate : {"z.w", "r.w", "n.w"}) {
    for (auto& w : p.get(prefix + gate).data()) w *= 0.1;
  }
}

/// Points closer than this to a max-pooling tie are redrawn.
inline constexpr double kTieMargin = 0.02;

inline std::vector<GradCheckCase> tensor_cases() {
  using Fn = std::function<Var<double>(Graph<double>&, const ParamSet<double>&)>;
  auto inputs = [](std::uint64_t seed) {
    Rng rng(100 + seed);
    ParamSet<double> v;
    v.add("a", rng.normal_tensor<double>({3, 4}, 1.0));
    v.add("b", rng.normal_tensor<double>({4, 2}, 1.0));
    v.add("row", rng.normal_tensor<double>({4}, 1.0));
    v.add("img", rng.normal_tensor<double>({3, 5, 4}, 1.0));
    v.add("w1", rng.normal_tensor<double>({2, 3}, 1.0));
    v.add("wk", rng.normal_tensor<double>({2, 3, 3, 3}, 0.5));
    v.add("bias", rng.normal_tensor<double>({2}, 1.0));
    v.add("gamma", rng.normal_tensor<double>({4}, 1.0));
    v.add("beta", rng.normal_tensor<double>({4}, 1.0));
    v.add("batch", rng.normal_tensor<double>({2, 3, 4}, 1.0));
    return v;
  };
  std::vector<std::pair<std::string, Fn>> ops = {
      {"matmul", [](auto& g, auto& p) { return matmul(p.bind(g, "a"), p.bind(g, "b")); }},
      {"matmul_batch", [](auto& g, auto& p) { return matmul(p.bind(g, "batch"), p.bind(g, "b")); }},
      {"add_broadcast", [](auto& g, auto& p) { return add(p.bind(g, "a"), p.bind(g, "row")); }},
      {"sub_broadcast", [](auto& g, auto& p) { return sub(p.bind(g, "row"), p.bind(g, "batch")); }},
      {"mul_broadcast", [](auto& g, auto& p) { return mul(p.bind(g, "batch"), p.bind(g, "row")); }},
      {"mul_same", [](auto& g, auto& p) { return mul(p.bind(g, "a"), p.bind(g, "a")); }},
      {"scale_shift", [](auto& g, auto& p) { return add_scalar(scale(one_minus(p.bind(g, "a")), 0.3), 2.0); }},
      {"exp", [](auto& g, auto& p) { return exp(scale(p.bind(g, "a"), 0.5)); }},
      {"sigmoid", [](auto& g, auto& p) { return sigmoid(p.bind(g, "a")); }},
      {"tanh", [](auto& g, auto& p) { return tanh(p.bind(g, "a")); }},
      {"relu", [](auto& g, auto& p) { return relu(p.bind(g, "a")); }},
      {"gelu", [](auto& g, auto& p) { return gelu(p.bind(g, "a")); }},
      {"softmax_last", [](auto& g, auto& p) { return softmax(p.bind(g, "a"), 1); }},
      {"softmax_first", [](auto& g, auto& p) { return softmax(p.bind(g, "batch"), 0); }},
      {"layer_norm", [](auto& g, auto& p) { return layer_norm(p.bind(g, "a"), p.bind(g, "gamma"), p.bind(g, "beta")); }},
      {"l2_normalize", [](auto& g, auto& p) { return l2_normalize_last(p.bind(g, "a")); }},
      {"conv1x1", [](auto& g, auto& p) { return conv1x1(p.bind(g, "img"), p.bind(g, "w1"), p.bind(g, "bias")); }},
      {"conv2d", [](auto& g, auto& p) { return conv2d(p.bind(g, "img"), p.bind(g, "wk"), p.bind(g, "bias")); }},
      {"global_avg_pool", [](auto& g, auto& p) { return global_avg_pool(p.bind(g, "img")); }},
      {"global_max_pool", [](auto& g, auto& p) { return global_max_pool(p.bind(g, "img")); }},
      {"max_axis", [](auto& g, auto& p) { return max_axis(p.bind(g, "img"), 0); }},
      {"sum_axis", [](auto& g, auto& p) { return sum_axis(p.bind(g, "batch"), 1); }},
      {"mean_axis", [](auto& g, auto& p) { return mean_axis(p.bind(g, "img"), 0); }},
      {"permute", [](auto& g, auto& p) { return permute(p.bind(g, "batch"), {2, 0, 1}); }},
      {"transpose", [](auto& g, auto& p) { return transpose_last2(p.bind(g, "a")); }},
      {"concat", [](auto& g, auto& p) { return concat<double>({reshape(p.bind(g, "a"), Shape{1, 3, 4}), p.bind(g, "batch")}, 0); }},
      {"concat_inner", [](auto& g, auto& p) { return concat<double>({p.bind(g, "a"), matmul(p.bind(g, "a"), p.bind(g, "b"))}, 1); }},
      {"slice", [](auto& g, auto& p) { return slice(p.bind(g, "batch"), 2, 1, 2); }},
      {"reshape", [](auto& g, auto& p) { return reshape(p.bind(g, "a"), Shape{2, 6}); }},
      {"linear", [](auto& g, auto& p) {
         auto bias = p.bind(g, "bias");
         return linear(p.bind(g, "batch"), p.bind(g, "b"), &bias);
       }},
      {"mean", [](auto& g, auto& p) { return mean(p.bind(g, "img")); }},
  };
  std::vector<GradCheckCase> out;
  for (auto& [name, f] : ops) {
    out.push_back({"tensor", name, [name, f, inputs](std::uint64_t seed) {
                     ParamSet<double> v = inputs(seed);
                     return gradcheck(name, v, [&](Graph<double>& g, const ParamSet<double>& p) {
                       return readout(g, f(g, p));
                     });
                   }});
  }
  return out;
}

inline std::vector<GradCheckCase> encoder_cases() {
  std::vector<GradCheckCase> out;
  out.push_back({"encoder", "scaled_cosine_attention", [](std::uint64_t seed) {
                   Rng rng(200 + seed);
                   ParamSet<double> v;
                   for (const char* n : {"q", "k", "v"}) v.add(n, rng.normal_tensor<double>({2, 2, 4, 3}, 3.0));
                   v.add("log_tau", Tensor<double>(Shape{2}), ParamKind::LogTemperature);
                   v.add("bias", rng.normal_tensor<double>({2, 4, 4}, 0.1));
                   return gradcheck("scaled_cosine_attention", v, [](Graph<double>& g, const ParamSet<double>& p) {
                     auto r = swin::scaled_cosine_attention(p.bind(g, "q"), p.bind(g, "k"), p.bind(g, "v"),
                                                            p.bind(g, "log_tau"), p.bind(g, "bias"));
                     return readout(g, r.output);
                   });
                 }});
  for (std::size_t shift : {0u, 2u}) {
    const std::string name = shift ? "swin_block_shifted" : "swin_block";
    out.push_back({"encoder", name, [name, shift](std::uint64_t seed) {
                     Rng rng(300 + seed);
                     ParamSet<double> v;
                     swin::init_swin_block(v, "blk.", 8, 2, 4, 16, rng);
                     condition_point(v, rng);
                     v.add("x", rng.normal_tensor<double>({8, 8, 8}, PointScales{}.input));
                     return gradcheck(name, v, [shift](Graph<double>& g, const ParamSet<double>& p) {
                       return readout(g, swin::swin_block(g, p, "blk.", p.bind(g, "x"), 2, 4, shift));
                     });
                   }});
  }
  out.push_back({"encoder", "patch_merging", [](std::uint64_t seed) {
                   Rng rng(400 + seed);
                   ParamSet<double> v;
                   swin::init_layer_norm(v, "m.norm.", 16);
                   swin::init_linear(v, "m.reduction.", 16, 8, rng, false);
                   condition_point(v, rng);
                   v.add("x", rng.normal_tensor<double>({4, 4, 4}, PointScales{}.input));
                   return gradcheck("patch_merging", v, [](Graph<double>& g, const ParamSet<double>& p) {
                     return readout(g, swin::patch_merging(g, p, "m.", p.bind(g, "x")));
                   });
                 }});
  out.push_back({"encoder", "patch_embed", [](std::uint64_t seed) {
                   Rng rng(500 + seed);
                   swin::EncoderConfig cfg;
                   cfg.image_size = 8;
                   cfg.patch_size = 4;
                   cfg.embed_dim = 4;
                   ParamSet<double> v;
                   swin::init_linear(v, "enc.patch_embed.", 48, 4, rng);
                   v.add("img", rng.uniform_tensor<double>({3, 8, 8}, 0.0, 1.0));
                   return gradcheck("patch_embed", v, [cfg](Graph<double>& g, const ParamSet<double>& p) {
                     return readout(g, swin::patch_embed(g, p, p.bind(g, "img"), cfg));
                   });
                 }});
  return out;
}

inline std::vector<GradCheckCase> dfn_cases() {
  auto point = [](std::uint64_t seed) {
    Rng rng(600 + seed);
    ParamSet<double> v;
    dfn::init_dfn(v, "dfn.", dfn::DfnConfig{8, 4, 4}, rng);
    condition_point(v, rng);
    v.add("x", rng.normal_tensor<double>({8, 4, 4}, 1.0));
    return v;
  };
  std::vector<GradCheckCase> out;
  out.push_back({"dfn", "channel_coefficients", [point](std::uint64_t seed) {
                   ParamSet<double> v = point(seed);
                   return gradcheck("channel_coefficients", v, [](Graph<double>& g, const ParamSet<double>& p) {
                     return readout(g, dfn::channel_coefficients(g, p, "dfn.", p.bind(g, "x")));
                   });
                 }});
  out.push_back({"dfn", "dynamic_filter_apply", [point](std::uint64_t seed) {
                   ParamSet<double> v = point(seed);
                   Rng rng(650 + seed);
                   v.add("alpha", rng.uniform_tensor<double>({4}, 0.0, 1.0));
                   return gradcheck("dynamic_filter_apply", v, [](Graph<double>& g, const ParamSet<double>& p) {
                     return readout(g, dfn::dynamic_filter_apply(g, p, "dfn.", p.bind(g, "x"), p.bind(g, "alpha")));
                   });
                 }});
  out.push_back({"dfn", "dfn_forward", [point](std::uint64_t seed) {
                   ParamSet<double> v = point(seed);
                   return gradcheck("dfn_forward", v, [](Graph<double>& g, const ParamSet<double>& p) {
                     return readout(g, dfn::dfn_forward(g, p, "dfn.", p.bind(g, "x")));
                   });
                 }});
  return out;
}

/// Two-stage geometry small enough for exhaustive coordinate checks.
inline swin::EncoderConfig tiny_encoder() {
  swin::EncoderConfig c;
  c.image_size = 16;
  c.patch_size = 2;
  c.embed_dim = 8;
  c.depths = {1, 1};
  c.heads = {2, 2};
  c.window_size = 4;
  c.mlp_ratio = 2.0;
  return c;
}

inline std::vector<GradCheckCase> decoder_cases() {
  std::vector<GradCheckCase> out;
  out.push_back({"decoder", "gru_cell", [](std::uint64_t seed) {
                   Rng rng(700 + seed);
                   ParamSet<double> v;
                   decoder::init_gru(v, "gru.", 5, 6, rng);
                   v.add("x", rng.normal_tensor<double>({5}, 1.0));
                   v.add("h", rng.normal_tensor<double>({6}, 0.5));
                   return gradcheck("gru_cell", v, [](Graph<double>& g, const ParamSet<double>& p) {
                     return readout(g, decoder::gru_cell(g, p, "gru.", p.bind(g, "x"), p.bind(g, "h")));
                   });
                 }});
  out.push_back({"decoder", "attention_gate", [](std::uint64_t seed) {
                   Rng rng(800 + seed);
                   ParamSet<double> v;
                   decoder::DecoderConfig cfg;
                   decoder::init_attention_gate(v, "gate.", 8, 6, cfg, rng);
                   condition_gate(v, "gate.", rng);
                   v.add("enc", rng.normal_tensor<double>({8, 4, 4}, 1.0));
                   v.add("dec", rng.normal_tensor<double>({8, 4, 4}, 1.0));
                   v.add("h", rng.normal_tensor<double>({6}, 0.5));
                   {
                     Graph<double> g;
                     Var<double> h = v.bind(g, "h");
                     auto r = decoder::attention_gate(g, v, "gate.", v.bind(g, "enc"), v.bind(g, "dec"), &h);
                     clear_relu_kinks(v, "gate.fc1.b", {r.mlp_preact.value()}, rng);
                   }
                   return gradcheck("attention_gate", v, [](Graph<double>& g, const ParamSet<double>& p) {
                     Var<double> h = p.bind(g, "h");
                     auto r = decoder::attention_gate(g, p, "gate.", p.bind(g, "enc"), p.bind(g, "dec"), &h);
                     return add(readout(g, r.gated, 98), readout(g, r.hidden, 97));
                   });
                 }});
  out.push_back({"decoder", "patch_expand", [](std::uint64_t seed) {
                   Rng rng(900 + seed);
                   ParamSet<double> v;
                   v.add("e.w", rng.normal_tensor<double>({8, 16}, 0.5));
                   v.add("x", rng.normal_tensor<double>({2, 3, 8}, 1.0));
                   return gradcheck("patch_expand", v, [](Graph<double>& g, const ParamSet<double>& p) {
                     return readout(g, decoder::patch_expand(g, p, "e.", p.bind(g, "x")));
                   });
                 }});
  return out;
}

inline head::HeadConfig tiny_head() {
  head::HeadConfig c;
  c.widths = {8, 8};
  c.hidden = 4;
  c.reduction = 4;
  return c;
}

inline head::HeadConfig check_head() {
  head::HeadConfig c = tiny_head();
  c.widths = {4, 4};
  c.reduction = 2;
  return c;
}

inline std::string feature_name(std::size_t i) { return detail::concat("features", i); }

/// Head parameters plus `n` [4,4,4] feature maps ("features0".."features{n-1}")
/// with ReLU pre-activations cleared of the kink and no near max-pool ties.
inline ParamSet<double> conditioned_head(const head::HeadConfig& cfg, std::size_t n, Rng& rng) {
  for (int attempt = 0; attempt <= 100; ++attempt) {
    ParamSet<double> v;
    head::init_head(v, 4, cfg, rng);
    for (std::size_t b = 0; b < cfg.widths.size(); ++b) {
      const std::string pre = head::block_prefix(b);
      for (auto& w : v.get(pre + "cbam.spatial.w").data()) w *= 0.1;
      for (auto& w : v.get(pre + "conv.w").data()) w *= 1.5;
      Tensor<double>& cb = v.get(pre + "conv.b");
      for (std::size_t c = 0; c < cb.size(); ++c) cb[c] = 0.5 + 0.3 * static_cast<double>(c);
      shrink_gru(v, pre + "cbam.gru.");
    }
    for (std::size_t i = 0; i < n; ++i) v.add(feature_name(i), rng.normal_tensor<double>({4, 4, 4}, 0.5));
    // samples that land near a tie are redrawn alone, the rest are kept
    for (int round = 0; round < 100; ++round) {
      for (std::size_t b = 0; b < cfg.widths.size(); ++b) {
        std::vector<Tensor<double>> zs;
        for (std::size_t i = 0; i < n; ++i) {
          Graph<double> g;
          auto r = head::head_forward(g, v, v.bind(g, feature_name(i)), cfg);
          zs.push_back(r.blocks[b].mlp_avg.value());
          zs.push_back(r.blocks[b].mlp_max.value());
        }
        clear_relu_kinks(v, head::block_prefix(b) + "cbam.fc1.b", zs, rng);
      }
      bool clean = true;
      for (std::size_t i = 0; i < n; ++i) {
        Graph<double> g;
        auto r = head::head_forward(g, v, v.bind(g, feature_name(i)), cfg);
        double gap = 1e300;
        for (std::size_t b = 0; b < cfg.widths.size(); ++b) {
          gap = std::min(gap, max_tie_gap(r.blocks[b].channel_gated.value(), false, true));
          gap = std::min(gap, max_tie_gap(r.block_inputs[b].value(), true, false));
        }
        if (gap < kTieMargin) {
          clean = false;
          v.get(feature_name(i)) = rng.normal_tensor<double>({4, 4, 4}, 0.5);
        }
      }
      if (clean) return v;
    }
  }
  throw NumericError("conditioned_head: no tie-free check point found");
}

inline std::vector<GradCheckCase> head_cases() {
  std::vector<GradCheckCase> out;
  out.push_back({"head", "cbam_gru_block", [](std::uint64_t seed) {
                   Rng rng(1100 + seed);
                   const head::HeadConfig cfg = tiny_head();
                   ParamSet<double> v;
                   for (int attempt = 0;; ++attempt) {
                     v = ParamSet<double>();
                     head::init_cbam_gru(v, "c.", 8, cfg, rng);
                     for (auto& w : v.get("c.spatial.w").data()) w *= 0.1;
                     shrink_gru(v, "c.gru.");
                     Tensor<double> x = rng.normal_tensor<double>({8, 8, 8}, 1.0);
                     for (std::size_t c = 0; c < 8; ++c) {
                       for (std::size_t i = 0; i < 64; ++i) x[c * 64 + i] += 0.1 * static_cast<double>(c);
                       x[c * 64 + rng.below(64)] += 0.3;
                     }
                     v.add("x", std::move(x));
                     v.add("h", rng.normal_tensor<double>({4}, 0.5));
                     Graph<double> g;
                     Var<double> h = v.bind(g, "h");
                     auto r = head::cbam_gru_block(g, v, "c.", v.bind(g, "x"), &h, 4);
                     clear_relu_kinks(v, "c.fc1.b", {r.mlp_avg.value(), r.mlp_max.value()}, rng);
                     Graph<double> g2;
                     Var<double> h2 = v.bind(g2, "h");
                     auto r2 = head::cbam_gru_block(g2, v, "c.", v.bind(g2, "x"), &h2, 4);
                     if (std::min(max_tie_gap(v.get("x"), true, false), max_tie_gap(r2.channel_gated.value(), false, true)) >=
                         kTieMargin) {
                       break;
                     }
                     if (attempt > 1000) throw NumericError("cbam_gru_block: no tie-free check point found");
                   }
                   return gradcheck("cbam_gru_block", v, [](Graph<double>& g, const ParamSet<double>& p) {
                     Var<double> h = p.bind(g, "h");
                     auto r = head::cbam_gru_block(g, p, "c.", p.bind(g, "x"), &h, 4);
                     return add(readout(g, r.out, 96), readout(g, r.hidden, 95));
                   });
                 }});
  out.push_back({"head", "head_forward", [](std::uint64_t seed) {
                   Rng rng(1200 + seed);
                   const head::HeadConfig cfg = check_head();
                   ParamSet<double> v = conditioned_head(cfg, 1, rng);
                   return gradcheck("head_forward", v, [cfg](Graph<double>& g, const ParamSet<double>& p) {
                     auto r = head::head_forward(g, p, p.bind(g, feature_name(0)), cfg);
                     return add(readout(g, r.logit, 94), readout(g, r.embedding, 93));
                   });
                 }});
  return out;
}

/// Smallest |d - margin| over the pairs, the distance to the hinge kink.
inline double hinge_gap(const Tensor<double>& d, double margin) {
  double best = 1e300;
  for (double v : d.data()) best = std::min(best, std::abs(v - margin));
  return best;
}

inline std::vector<GradCheckCase> loss_cases() {
  using Fn = std::function<Var<double>(Graph<double>&, const ParamSet<double>&)>;
  std::vector<GradCheckCase> out;
  auto unary_case = [&](std::string name, double lo, double hi, Fn fn) {
    out.push_back({"loss", name, [name, lo, hi, fn](std::uint64_t seed) {
                     Rng rng(1300 + seed);
                     ParamSet<double> v;
                     v.add("x", rng.uniform_tensor<double>({3, 4}, lo, hi));
                     return gradcheck(name, v, [fn](Graph<double>& g, const ParamSet<double>& p) {
                       return readout(g, fn(g, p), 92);
                     });
                   }});
  };
  // clamp bounds sit at +-0.5; inputs are drawn from bands clear of them
  out.push_back({"loss", "clamp", [](std::uint64_t seed) {
                   Rng rng(1300 + seed);
                   Tensor<double> x(Shape{3, 4});
                   for (auto& e : x.data()) {
                     do e = rng.normal(0.0, 1.0);
                     while (std::abs(std::abs(e) - 0.5) < 0.05);
                   }
                   ParamSet<double> v;
                   v.add("x", std::move(x));
                   return gradcheck("clamp", v, [](Graph<double>& g, const ParamSet<double>& p) {
                     return readout(g, loss::clamp(p.bind(g, "x"), -0.5, 0.5), 92);
                   });
                 }});
  unary_case("log", 0.2, 3.0, [](auto& g, auto& p) { return loss::log(p.bind(g, "x")); });
  unary_case("pow", 0.2, 3.0, [](auto& g, auto& p) { return loss::pow(p.bind(g, "x"), 2.5); });
  unary_case("sqrt", 0.2, 3.0, [](auto& g, auto& p) { return loss::sqrt(p.bind(g, "x")); });

  const std::vector<int> labels{0, 1, 1, 0, 1, 0, 0, 1};
  for (auto variant : {loss::FocalVariant::Verbatim, loss::FocalVariant::Standard}) {
    const std::string name = variant == loss::FocalVariant::Verbatim ? "focal_verbatim" : "focal_standard";
    out.push_back({"loss", name, [name, variant, labels](std::uint64_t seed) {
                     Rng rng(1400 + seed);
                     ParamSet<double> v;
                     v.add("logits", rng.normal_tensor<double>({8}, 1.5));
                     loss::FocalConfig cfg;
                     cfg.variant = variant;
                     return gradcheck(name, v, [cfg, labels](Graph<double>& g, const ParamSet<double>& p) {
                       return loss::focal_loss(labels, sigmoid(p.bind(g, "logits")), cfg);
                     });
                   }});
  }

  auto draw_embeddings = [](Rng& rng, const loss::PairBatch& pairs, double margin) {
    for (int attempt = 0; attempt <= 1000; ++attempt) {
      Tensor<double> e = rng.normal_tensor<double>({8, 4}, 1.0);
      Graph<double> g;
      if (hinge_gap(loss::pair_distances(g.constant(e), pairs).value(), margin) >= 0.05) return e;
    }
    throw NumericError("loss check: no kink-free embedding point found");
  };
  out.push_back({"loss", "contrastive", [labels, draw_embeddings](std::uint64_t seed) {
                   Rng rng(1500 + seed);
                   loss::ContrastiveConfig cfg;
                   cfg.margin = 2.5;
                   const loss::PairBatch pairs = loss::make_pairs(labels, seed, loss::PairStrategy::All);
                   ParamSet<double> v;
                   v.add("embeddings", draw_embeddings(rng, pairs, cfg.margin));
                   return gradcheck("contrastive", v, [cfg, pairs](Graph<double>& g, const ParamSet<double>& p) {
                     return loss::contrastive_loss(p.bind(g, "embeddings"), pairs, cfg);
                   });
                 }});
  out.push_back({"loss", "combined", [labels, draw_embeddings](std::uint64_t seed) {
                   Rng rng(1600 + seed);
                   loss::ContrastiveConfig ccfg;
                   ccfg.margin = 2.5;
                   const loss::PairBatch pairs = loss::make_pairs(labels, seed);
                   ParamSet<double> v;
                   v.add("logits", rng.normal_tensor<double>({8}, 1.5));
                   v.add("embeddings", draw_embeddings(rng, pairs, ccfg.margin));
                   return gradcheck("combined", v, [ccfg, pairs, labels](Graph<double>& g, const ParamSet<double>& p) {
                     return loss::combined_loss(labels, sigmoid(p.bind(g, "logits")), p.bind(g, "embeddings"), pairs,
                                                loss::FocalConfig{}, ccfg);
                   });
                 }});
  // Combined loss over a batch of four feature maps pushed through the head.
  out.push_back({"loss", "head_composite", [](std::uint64_t seed) {
                   Rng rng(1700 + seed);
                   const head::HeadConfig cfg = check_head();
                   const std::vector<int> y{0, 1, 1, 0};
                   const loss::PairBatch pairs = loss::make_pairs(y, seed, loss::PairStrategy::All);
                   auto forward = [cfg, y, pairs](Graph<double>& g, const ParamSet<double>& p, double margin,
                                                  Tensor<double>* dist) {
                     std::vector<Var<double>> logits, embs;
                     for (std::size_t i = 0; i < y.size(); ++i) {
                       auto r = head::head_forward(g, p, p.bind(g, feature_name(i)), cfg);
                       logits.push_back(r.logit);
                       embs.push_back(reshape(r.embedding, Shape{1, cfg.embedding_dim()}));
                     }
                     Var<double> e = concat(embs, 0);
                     if (dist) *dist = loss::pair_distances(e, pairs).value();
                     loss::ContrastiveConfig ccfg;
                     ccfg.margin = margin;
                     return loss::combined_loss(y, sigmoid(concat(logits, 0)), e, pairs, loss::FocalConfig{}, ccfg);
                   };
                   for (int attempt = 0; attempt <= 100; ++attempt) {
                     ParamSet<double> v = conditioned_head(cfg, y.size(), rng);
                     Tensor<double> d;
                     {
                       Graph<double> g;
                       forward(g, v, 1.0, &d);
                     }
                     // margin between the closest and farthest pair, kept clear of every distance
                     double lo = 1e300, hi = 0;
                     for (double x : d.data()) {
                       lo = std::min(lo, x);
                       hi = std::max(hi, x);
                     }
                     const double margin = 0.5 * (lo + hi);
                     if (hinge_gap(d, margin) < 0.05 * std::max(hi, 1e-3)) continue;
                     return gradcheck("head_composite", v, [forward, margin](Graph<double>& g, const ParamSet<double>& p) {
                       return forward(g, p, margin, nullptr);
                     });
                   }
                   throw NumericError("head_composite: no kink-free check point found");
                 }});
  return out;
}

/// Cases for `module` ("all", "tensor", "encoder", ...).
inline std::vector<GradCheckCase> cases(const std::string& module) {
  std::vector<GradCheckCase> out;
  auto take = [&](const std::string& m, std::vector<GradCheckCase> (*fn)()) {
    if (module == "all" || module == m) {
      auto c = fn();
      out.insert(out.end(), c.begin(), c.end());
    }
  };
  take("tensor", tensor_cases);
  take("encoder", encoder_cases);
  take("dfn", dfn_cases);
  take("decoder", decoder_cases);
  take("head", head_cases);
  take("loss", loss_cases);
  if (out.empty()) throw ValidationError("unknown gradcheck module '" + module + "'");
  return out;
}

struct SuiteSummary {
  std::size_t cases = 0, points = 0, failures = 0;
  double worst = 0;
  std::string worst_case;
  double seconds = 0;
  bool pass() const { return failures == 0 && points > 0; }
};

/// Runs every case of `module` at seeds 0..points-1, one line per check on `log`.
inline SuiteSummary run_suite(const std::string& module, std::size_t points = 3, std::ostream* log = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteSummary s;
  for (const auto& c : cases(module)) {
    ++s.cases;
    for (std::size_t seed = 0; seed < points; ++seed) {
      const GradCheckReport r = c.run(seed);
      ++s.points;
      if (!r.pass) ++s.failures;
      if (r.max_rel_error > s.worst) {
        s.worst = r.max_rel_error;
        s.worst_case = c.module + "/" + c.name;
      }
      if (log) {
        *log << (r.pass ? "ok   " : "FAIL ") << c.module << "/" << c.name << " seed " << seed << " max_rel_err "
             << std::scientific << std::setprecision(3) << r.max_rel_error << std::defaultfloat << "\n";
      }
    }
  }
  s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return s;
}

}  // namespace gruaunet::suite
