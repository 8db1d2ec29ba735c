// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <type_traits>
#include <vector>

#include "gruaunet/decoder/decoder.hpp"
#include "gruaunet/tensor/ops.hpp"
#include "gruaunet/tensor/params.hpp"

namespace gruaunet::head {

struct HeadConfig {
  std::vector<std::size_t> widths{64, 32};
  std::size_t hidden = 16;
  std::size_t reduction = 4;
  std::size_t conv_kernel = 3;
  std::size_t spatial_kernel = 7;

  void validate() const {
    if (widths.empty()) throw ConfigError("head: at least one block is required");
    if (hidden == 0) throw ConfigError("head: GRU hidden size must be positive");
    if (conv_kernel % 2 == 0 || spatial_kernel % 2 == 0) throw ConfigError("head: kernel sizes must be odd");
    for (std::size_t w : widths) {
      if (w == 0 || reduction == 0 || w % reduction) {
        throw ConfigError(detail::concat("head: reduction ", reduction, " must divide width ", w));
      }
    }
  }
  std::size_t embedding_dim() const { return widths.back(); }
};

template <std::floating_point T>
struct CbamResult {
  Var<T> out;         ///< [C,H,W]
  Var<T> hidden;      ///< h_next
  Var<T> channel_map;  ///< M_c [C]
  Var<T> spatial_map;  ///< M_s [1,H,W]
  Var<T> mlp_avg, mlp_max;  ///< shared-MLP hidden pre-activations
  Var<T> channel_gated;     ///< x * M_c, input of the spatial map
};

/// CBAM with a GRU refining the channel descriptor:
/// d = MLP(avg) + MLP(max), h' = GRU(d, h), M_c = s(d + FC(h')),
/// M_s = s(conv([max_c; avg_c](x * M_c))), out = x * M_c * M_s.
/// `h_prev` may be null, which starts from zeros.
template <std::floating_point T>
CbamResult<T> cbam_gru_block(Graph<T>& g, const ParamSet<T>& params, const std::string& prefix, const Var<T>& x,
                             const std::type_identity_t<Var<T>>* h_prev, std::size_t hidden) {
  const Shape& xs = x.shape();
  if (xs.size() != 3) throw ShapeError(detail::concat("cbam_gru_block expects [C,H,W], got ", shape_str(xs)));
  const std::size_t C = xs[0], H = xs[1], W = xs[2];
  auto P = [&](const char* n) { return params.bind(g, prefix + n); };

  Var<T> b1 = P("fc1.b"), b2 = P("fc2.b"), w1 = P("fc1.w"), w2 = P("fc2.w");
  Var<T> z_avg = linear(global_avg_pool(x), w1, &b1);
  Var<T> z_max = linear(global_max_pool(x), w1, &b1);
  Var<T> d = add(linear(relu(z_avg), w2, &b2), linear(relu(z_max), w2, &b2));

  Var<T> h = (h_prev && h_prev->valid()) ? *h_prev : g.constant(Tensor<T>(Shape{hidden}));
  Var<T> h_next = decoder::gru_cell(g, params, prefix + "gru.", d, h);
  Var<T> bh = P("hfc.b");
  Var<T> m_c = sigmoid(add(d, linear(h_next, P("hfc.w"), &bh)));
  Var<T> xc = mul(x, reshape(m_c, Shape{C, 1, 1}));

  Var<T> pooled = concat<T>({reshape(max_axis(xc, 0), Shape{1, H, W}), reshape(mean_axis(xc, 0), Shape{1, H, W})}, 0);
  Var<T> m_s = sigmoid(conv2d(pooled, P("spatial.w"), P("spatial.b")));
  return {mul(xc, m_s), h_next, m_c, m_s, z_avg, z_max, xc};
}

template <std::floating_point T>
void init_cbam_gru(ParamSet<T>& p, const std::string& prefix, std::size_t C, const HeadConfig& cfg, Rng& rng) {
  swin::init_linear(p, prefix + "fc1.", C, C / cfg.reduction, rng);
  swin::init_linear(p, prefix + "fc2.", C / cfg.reduction, C, rng);
  decoder::init_gru(p, prefix + "gru.", C, cfg.hidden, rng);
  swin::init_linear(p, prefix + "hfc.", cfg.hidden, C, rng);
  const std::size_t k = cfg.spatial_kernel;
  p.add(prefix + "spatial.w", rng.normal_tensor<T>({1, 2, k, k}, 1.0 / std::sqrt(2.0 * static_cast<double>(k * k))));
  p.add(prefix + "spatial.b", Tensor<T>(Shape{1}));
}

template <std::floating_point T>
struct HeadOutput {
  Var<T> logit;      ///< [1]
  Var<T> prob;       ///< [1], P(spoof)
  Var<T> embedding;  ///< [E]
  std::vector<CbamResult<T>> blocks;
  std::vector<Var<T>> block_inputs;  ///< activated conv output entering each CBAM-GRU
};

inline std::string block_prefix(std::size_t b) { return detail::concat("head.block", b, "."); }

/// conv -> GELU -> CBAM-GRU per block (hidden chained), GAP, FC, sigmoid.
template <std::floating_point T>
HeadOutput<T> head_forward(Graph<T>& g, const ParamSet<T>& params, const Var<T>& features, const HeadConfig& cfg) {
  if (features.shape().size() != 3) {
    throw ShapeError(detail::concat("head expects [C,H,W] features, got ", shape_str(features.shape())));
  }
  HeadOutput<T> out;
  Var<T> x = features;
  Var<T> h;
  for (std::size_t b = 0; b < cfg.widths.size(); ++b) {
    const std::string pre = block_prefix(b);
    x = gelu(conv2d(x, params.bind(g, pre + "conv.w"), params.bind(g, pre + "conv.b")));
    out.block_inputs.push_back(x);
    auto r = cbam_gru_block(g, params, pre + "cbam.", x, &h, cfg.hidden);
    x = r.out;
    h = r.hidden;
    out.blocks.push_back(r);
  }
  out.embedding = global_avg_pool(x);
  Var<T> fb = params.bind(g, "head.fc.b");
  out.logit = linear(out.embedding, params.bind(g, "head.fc.w"), &fb);
  out.prob = sigmoid(out.logit);
  return out;
}

template <std::floating_point T>
Var<T> classify(Graph<T>& g, const ParamSet<T>& params, const Var<T>& features, const HeadConfig& cfg) {
  return head_forward(g, params, features, cfg).prob;
}

template <std::floating_point T>
Var<T> embed(Graph<T>& g, const ParamSet<T>& params, const Var<T>& features, const HeadConfig& cfg) {
  return head_forward(g, params, features, cfg).embedding;
}

template <std::floating_point T>
void init_head(ParamSet<T>& p, std::size_t in_channels, const HeadConfig& cfg, Rng& rng) {
  cfg.validate();
  std::size_t cin = in_channels;
  const std::size_t k = cfg.conv_kernel;
  for (std::size_t b = 0; b < cfg.widths.size(); ++b) {
    const std::size_t cout = cfg.widths[b];
    const std::string pre = block_prefix(b);
    p.add(pre + "conv.w", rng.normal_tensor<T>({cout, cin, k, k}, 1.0 / std::sqrt(static_cast<double>(cin * k * k))));
    p.add(pre + "conv.b", Tensor<T>(Shape{cout}));
    init_cbam_gru(p, pre + "cbam.", cout, cfg, rng);
    cin = cout;
  }
  swin::init_linear(p, "head.fc.", cfg.embedding_dim(), 1, rng);
}

}  // namespace gruaunet::head
