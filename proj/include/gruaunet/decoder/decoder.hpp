// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <type_traits>
#include <vector>

#include "gruaunet/swin/encoder.hpp"
#include "gruaunet/tensor/ops.hpp"
#include "gruaunet/tensor/params.hpp"

namespace gruaunet::decoder {

struct DecoderConfig {
  std::size_t blocks_per_level = 2;
  std::size_t gate_reduction = 4;
  std::size_t spatial_kernel = 7;
  /// Skip both attention gates and the GRU (plain concat skip).
  bool bypass_gates = false;

  void validate(const swin::EncoderConfig& enc) const {
    if (enc.stages() < 2) throw ConfigError("decoder needs an encoder with at least two stages");
    if (blocks_per_level == 0) throw ConfigError("decoder: blocks_per_level must be >= 1");
    if (spatial_kernel % 2 == 0) throw ConfigError("decoder: spatial_kernel must be odd");
    for (std::size_t s = 0; s + 1 < enc.stages(); ++s) {
      if (gate_reduction == 0 || enc.dim(s) % gate_reduction) {
        throw ConfigError(detail::concat("decoder: gate_reduction ", gate_reduction, " must divide width ",
                                         enc.dim(s)));
      }
    }
  }
};

// ---------------------------------------------------------------------------
// GRU

/// z = s(Wz [h,x]), r = s(Wr [h,x]), n = tanh(Wn [r*h, x]),
/// h' = (1 - z) * n + z * h.
template <std::floating_point T>
Var<T> gru_cell(Graph<T>& g, const ParamSet<T>& params, const std::string& prefix, const Var<T>& x,
                const Var<T>& h) {
  if (x.shape().size() != 1 || h.shape().size() != 1) {
    throw ShapeError(detail::concat("gru_cell expects vectors, got x ", shape_str(x.shape()), " h ",
                                    shape_str(h.shape())));
  }
  const std::size_t H = h.shape()[0], D = x.shape()[0];
  auto W = [&](const char* gate) {
    Var<T> w = params.bind(g, prefix + gate + ".w");
    if (w.shape() != Shape{H + D, H}) {
      throw ShapeError(detail::concat("gru_cell: ", prefix, gate, ".w is ", shape_str(w.shape()), ", expected [",
                                      H + D, ",", H, "]"));
    }
    return w;
  };
  auto B = [&](const char* gate) { return params.bind(g, prefix + gate + ".b"); };
  Var<T> hx = concat<T>({h, x}, 0);
  Var<T> bz = B("z"), br = B("r"), bn = B("n");
  Var<T> z = sigmoid(linear(hx, W("z"), &bz));
  Var<T> r = sigmoid(linear(hx, W("r"), &br));
  Var<T> n = tanh(linear(concat<T>({mul(r, h), x}, 0), W("n"), &bn));
  return add(mul(one_minus(z), n), mul(z, h));
}

template <std::floating_point T>
void init_gru(ParamSet<T>& p, const std::string& prefix, std::size_t input, std::size_t hidden, Rng& rng) {
  for (const char* gate : {"z", "r", "n"}) swin::init_linear(p, prefix + gate + ".", hidden + input, hidden, rng);
}

// ---------------------------------------------------------------------------
// Attention gate

template <std::floating_point T>
struct GateResult {
  Var<T> gated;           ///< [C,H,W]
  Var<T> hidden;          ///< h_next [C]
  Var<T> channel_gate;    ///< a_c [C]
  Var<T> spatial_gate;    ///< a_s [1,H,W]
  Var<T> mlp_preact;      ///< channel-MLP hidden pre-activation
};

/// Channel + spatial attention on encoder features, with the channel gate
/// modulated by a GRU step. `h_prev` may be invalid at the deepest level,
/// which starts from zeros; otherwise it is mapped through `adapt`.
template <std::floating_point T>
GateResult<T> attention_gate(Graph<T>& g, const ParamSet<T>& params, const std::string& prefix, const Var<T>& enc,
                             const Var<T>& dec, const std::type_identity_t<Var<T>>* h_prev) {
  const Shape& es = enc.shape();
  if (es.size() != 3 || dec.shape() != es) {
    throw ShapeError(detail::concat("attention_gate: encoder ", shape_str(es), " and decoder ",
                                    shape_str(dec.shape()), " features must be equal [C,H,W]"));
  }
  const std::size_t C = es[0], H = es[1], W = es[2];
  auto P = [&](const char* n) { return params.bind(g, prefix + n); };

  Var<T> s = add(conv1x1(enc, P("proj.w"), P("proj.b")), dec);

  // recurrent state
  Var<T> h_in;
  if (h_prev && h_prev->valid()) {
    Var<T> ab = P("adapt.b");
    h_in = linear(*h_prev, P("adapt.w"), &ab);
  } else {
    h_in = g.constant(Tensor<T>(Shape{C}));
  }
  Var<T> in_b = P("in.b");
  Var<T> x_t = linear(global_avg_pool(enc), P("in.w"), &in_b);
  Var<T> h_next = gru_cell(g, params, prefix + "gru.", x_t, h_in);

  // channel gate
  Var<T> b1 = P("fc1.b"), b2 = P("fc2.b"), bh = P("hfc.b");
  Var<T> z = linear(global_avg_pool(s), P("fc1.w"), &b1);
  Var<T> d = linear(relu(z), P("fc2.w"), &b2);
  Var<T> a_c = mul(sigmoid(d), sigmoid(linear(h_next, P("hfc.w"), &bh)));

  // spatial gate
  Var<T> pooled = concat<T>({reshape(max_axis(s, 0), Shape{1, H, W}), reshape(mean_axis(s, 0), Shape{1, H, W})}, 0);
  Var<T> a_s = sigmoid(conv2d(pooled, P("spatial.w"), P("spatial.b")));

  Var<T> gated = mul(mul(enc, reshape(a_c, Shape{C, 1, 1})), a_s);
  return {gated, h_next, a_c, a_s, z};
}

template <std::floating_point T>
void init_attention_gate(ParamSet<T>& p, const std::string& prefix, std::size_t C, std::size_t prev_hidden,
                         const DecoderConfig& cfg, Rng& rng) {
  p.add(prefix + "proj.w", rng.normal_tensor<T>({C, C}, 1.0 / std::sqrt(static_cast<double>(C))));
  p.add(prefix + "proj.b", Tensor<T>(Shape{C}));
  if (prev_hidden) swin::init_linear(p, prefix + "adapt.", prev_hidden, C, rng);
  swin::init_linear(p, prefix + "in.", C, C, rng);
  init_gru(p, prefix + "gru.", C, C, rng);
  swin::init_linear(p, prefix + "fc1.", C, C / cfg.gate_reduction, rng);
  swin::init_linear(p, prefix + "fc2.", C / cfg.gate_reduction, C, rng);
  swin::init_linear(p, prefix + "hfc.", C, C, rng);
  const std::size_t k = cfg.spatial_kernel;
  p.add(prefix + "spatial.w", rng.normal_tensor<T>({1, 2, k, k}, 1.0 / std::sqrt(2.0 * static_cast<double>(k * k))));
  p.add(prefix + "spatial.b", Tensor<T>(Shape{1}));
}

// ---------------------------------------------------------------------------
// Upsampling

/// Linear C -> 2C, then pixel shuffle [H,W,2C] -> [2H,2W,C/2] using the
/// patch-merging neighbour order.
template <std::floating_point T>
Var<T> patch_expand(Graph<T>& g, const ParamSet<T>& params, const std::string& prefix, const Var<T>& x) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw ShapeError(detail::concat("patch_expand expects [H,W,C], got ", shape_str(s)));
  if (s[2] % 2) throw ShapeError(detail::concat("patch_expand needs an even channel count, got ", s[2]));
  const std::size_t H = s[0], W = s[1], C = s[2], Co = C / 2;
  Var<T> y = linear(x, params.bind(g, prefix + "w"));
  constexpr std::size_t order[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
  auto idx = std::make_shared<std::vector<std::size_t>>(4 * H * W * Co);
  for (std::size_t yy = 0; yy < H; ++yy)
    for (std::size_t xx = 0; xx < W; ++xx)
      for (std::size_t k = 0; k < 4; ++k)
        for (std::size_t c = 0; c < Co; ++c) {
          const std::size_t oy = 2 * yy + order[k][0], ox = 2 * xx + order[k][1];
          (*idx)[(oy * 2 * W + ox) * Co + c] = (yy * W + xx) * 2 * C + k * Co + c;
        }
  return gather(y, idx, Shape{2 * H, 2 * W, Co});
}

// ---------------------------------------------------------------------------
// Decoder

template <std::floating_point T>
struct DecoderOutput {
  Var<T> features;             ///< [C_0, H_0, W_0]
  std::vector<Var<T>> hidden;  ///< GRU state after each level, deepest first
  std::vector<Var<T>> levels;  ///< channel-last output of each level
  std::vector<GateResult<T>> gates;
};

inline std::string level_prefix(std::size_t l) { return detail::concat("dec.level", l, "."); }

template <std::floating_point T>
Var<T> to_chw(const Var<T>& x) {
  return permute(x, {2, 0, 1});
}
template <std::floating_point T>
Var<T> to_hwc(const Var<T>& x) {
  return permute(x, {1, 2, 0});
}

/// Decodes a [g,g,C] bottleneck against the encoder stage features
/// (shallowest first, as returned by encoder_forward).
template <std::floating_point T>
DecoderOutput<T> decoder_forward(Graph<T>& g, const ParamSet<T>& params, const Var<T>& bottleneck,
                                 const std::vector<Var<T>>& stages, const swin::EncoderConfig& enc,
                                 const DecoderConfig& cfg) {
  if (stages.size() != enc.stages()) {
    throw ShapeError(detail::concat("decoder_forward: expected ", enc.stages(), " encoder stages, got ",
                                    stages.size()));
  }
  DecoderOutput<T> out;
  Var<T> x = bottleneck;
  Var<T> h;
  const std::size_t L = enc.stages() - 1;
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t s = L - 1 - l;
    const std::string pre = level_prefix(l);
    Var<T> up = patch_expand(g, params, pre + "expand.", x);
    const Var<T>& skip = stages[s];
    if (up.shape() != skip.shape()) {
      throw ShapeError(detail::concat("decoder level ", l, ": upsampled ", shape_str(up.shape()),
                                      " does not match encoder stage ", shape_str(skip.shape())));
    }
    Var<T> gated_hwc;
    if (cfg.bypass_gates) {
      gated_hwc = skip;
    } else {
      auto gate = attention_gate(g, params, pre + "gate.", to_chw(skip), to_chw(up), &h);
      h = gate.hidden;
      out.hidden.push_back(h);
      out.gates.push_back(gate);
      gated_hwc = to_hwc(gate.gated);
    }
    Var<T> fb = params.bind(g, pre + "fuse.b");
    x = linear(concat<T>({gated_hwc, up}, 2), params.bind(g, pre + "fuse.w"), &fb);
    for (std::size_t b = 0; b < cfg.blocks_per_level; ++b) {
      x = swin::swin_block(g, params, detail::concat(pre, "block", b, "."), x, enc.heads[s], enc.window_size,
                           swin::block_shift(b, enc.grid(s), enc.window_size));
    }
    out.levels.push_back(x);
  }
  out.features = to_chw(x);
  return out;
}

template <std::floating_point T>
void init_decoder(ParamSet<T>& p, const swin::EncoderConfig& enc, const DecoderConfig& cfg, Rng& rng) {
  cfg.validate(enc);
  const std::size_t L = enc.stages() - 1;
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t s = L - 1 - l;
    const std::size_t C = enc.dim(s);
    const std::string pre = level_prefix(l);
    p.add(pre + "expand.w", rng.normal_tensor<T>({2 * C, 4 * C}, 1.0 / std::sqrt(2.0 * static_cast<double>(C))));
    init_attention_gate(p, pre + "gate.", C, l == 0 ? 0 : enc.dim(s + 1), cfg, rng);
    swin::init_linear(p, pre + "fuse.", 2 * C, C, rng);
    for (std::size_t b = 0; b < cfg.blocks_per_level; ++b) {
      swin::init_swin_block(p, detail::concat(pre, "block", b, "."), C, enc.heads[s], enc.window_size,
                            enc.mlp_hidden(s), rng);
    }
  }
}

}  // namespace gruaunet::decoder
