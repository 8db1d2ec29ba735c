// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gruaunet/tensor/ops.hpp"
#include "gruaunet/tensor/params.hpp"

namespace gruaunet::swin {

/// Swin backbone geometry. Stage s works on a (grid >> s)^2 token grid of
/// width embed_dim << s.
struct EncoderConfig {
  std::size_t image_size = 256;
  std::size_t patch_size = 4;
  std::size_t embed_dim = 48;
  std::vector<std::size_t> depths{2, 2, 2};
  std::vector<std::size_t> heads{3, 6, 12};
  std::size_t window_size = 8;
  double mlp_ratio = 4.0;

  /// Small geometry used by tests and the synthetic experiments.
  static EncoderConfig toy() {
    EncoderConfig c;
    c.image_size = 64;
    c.patch_size = 4;
    c.embed_dim = 16;
    c.depths = {2, 2};
    c.heads = {2, 4};
    c.window_size = 4;
    c.mlp_ratio = 2.0;
    return c;
  }

  std::size_t stages() const { return depths.size(); }
  std::size_t grid(std::size_t stage) const { return (image_size / patch_size) >> stage; }
  std::size_t dim(std::size_t stage) const { return embed_dim << stage; }
  std::size_t mlp_hidden(std::size_t stage) const {
    return static_cast<std::size_t>(std::lround(mlp_ratio * static_cast<double>(dim(stage))));
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("encoder config: " + m); };
    if (image_size == 0 || patch_size == 0 || embed_dim == 0 || window_size == 0) fail("sizes must be positive");
    if (image_size % patch_size) fail("image_size must be divisible by patch_size");
    if (depths.empty() || depths.size() != heads.size()) fail("depths and heads must be non-empty and equal length");
    if (mlp_ratio <= 0) fail("mlp_ratio must be positive");
    const std::size_t g0 = image_size / patch_size;
    for (std::size_t s = 0; s < stages(); ++s) {
      if (s > 0 && ((g0 >> (s - 1)) % 2 != 0)) fail("token grid must be even before every patch merge");
      if (grid(s) == 0 || grid(s) % window_size) {
        fail(detail::concat("token grid ", grid(s), " at stage ", s, " not divisible by window ", window_size));
      }
      if (heads[s] == 0 || dim(s) % heads[s]) {
        fail(detail::concat("width ", dim(s), " at stage ", s, " not divisible by heads ", heads[s]));
      }
      if (depths[s] == 0) fail("every stage needs at least one block");
    }
  }
};

// ---------------------------------------------------------------------------
// Index builders for the pure rearrangements

/// Non-overlapping p x p RGB patches of an image [3,H,W], flattened as
/// (channel, dy, dx) per token -> [N_tokens, 3 p^2].
inline Index patch_index(std::size_t channels, std::size_t H, std::size_t W, std::size_t p) {
  auto idx = std::make_shared<std::vector<std::size_t>>();
  idx->reserve(channels * H * W);
  for (std::size_t ty = 0; ty < H / p; ++ty)
    for (std::size_t tx = 0; tx < W / p; ++tx)
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx) idx->push_back((c * H + ty * p + dy) * W + tx * p + dx);
  return idx;
}

/// Maps [nW, w^2, C] window layout back to source offsets of a [H,W,C]
/// grid that was cyclically shifted by -shift on both axes.
inline Index window_partition_index(std::size_t H, std::size_t W, std::size_t C, std::size_t w, std::size_t shift) {
  auto idx = std::make_shared<std::vector<std::size_t>>();
  idx->reserve(H * W * C);
  for (std::size_t wy = 0; wy < H / w; ++wy)
    for (std::size_t wx = 0; wx < W / w; ++wx)
      for (std::size_t iy = 0; iy < w; ++iy)
        for (std::size_t ix = 0; ix < w; ++ix) {
          const std::size_t y = (wy * w + iy + shift) % H;
          const std::size_t x = (wx * w + ix + shift) % W;
          for (std::size_t c = 0; c < C; ++c) idx->push_back((y * W + x) * C + c);
        }
  return idx;
}

/// Inverse permutation of window_partition_index.
inline Index window_reverse_index(std::size_t H, std::size_t W, std::size_t C, std::size_t w, std::size_t shift) {
  Index fwd = window_partition_index(H, W, C, w, shift);
  auto inv = std::make_shared<std::vector<std::size_t>>(fwd->size());
  for (std::size_t i = 0; i < fwd->size(); ++i) (*inv)[(*fwd)[i]] = i;
  return inv;
}

/// Offset of token j relative to token i inside a w x w window, encoded in
/// [0, (2w-1)^2).
inline std::vector<std::size_t> relative_position_index(std::size_t w) {
  const std::size_t T = w * w;
  std::vector<std::size_t> idx(T * T);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = 0; j < T; ++j) {
      const std::size_t dy = (i / w) + (w - 1) - (j / w);
      const std::size_t dx = (i % w) + (w - 1) - (j % w);
      idx[i * T + j] = dy * (2 * w - 1) + dx;
    }
  return idx;
}

/// Additive mask for shifted windows: 0 for pairs from the same original
/// region, -100 across regions. Shape [nW, T, T].
template <std::floating_point T>
Tensor<T> shifted_window_mask(std::size_t H, std::size_t W, std::size_t w, std::size_t shift) {
  std::vector<int> region(H * W);
  auto band = [&](std::size_t v, std::size_t n) { return v < n - w ? 0 : (v < n - shift ? 1 : 2); };
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) region[y * W + x] = band(y, H) * 3 + band(x, W);
  const std::size_t nW = (H / w) * (W / w), Tw = w * w;
  Tensor<T> mask(Shape{nW, Tw, Tw});
  std::vector<int> ids(Tw);
  std::size_t win = 0;
  for (std::size_t wy = 0; wy < H / w; ++wy)
    for (std::size_t wx = 0; wx < W / w; ++wx, ++win) {
      for (std::size_t i = 0; i < Tw; ++i) ids[i] = region[(wy * w + i / w) * W + wx * w + i % w];
      for (std::size_t i = 0; i < Tw; ++i)
        for (std::size_t j = 0; j < Tw; ++j) mask[(win * Tw + i) * Tw + j] = ids[i] == ids[j] ? T{0} : T{-100};
    }
  return mask;
}

// ---------------------------------------------------------------------------
// Layout operations

template <std::floating_point T>
Var<T> window_partition(const Var<T>& tokens, std::size_t window, std::size_t shift = 0) {
  const Shape& s = tokens.shape();
  if (s.size() != 3) throw ShapeError(detail::concat("window_partition expects [H,W,C], got ", shape_str(s)));
  if (window == 0 || s[0] % window || s[1] % window) {
    throw ShapeError(detail::concat("window_partition: grid ", s[0], "x", s[1], " not divisible by window ", window));
  }
  const std::size_t nW = (s[0] / window) * (s[1] / window);
  return gather(tokens, window_partition_index(s[0], s[1], s[2], window, shift % s[0]),
                Shape{nW, window * window, s[2]});
}

template <std::floating_point T>
Var<T> window_reverse(const Var<T>& windows, std::size_t H, std::size_t W, std::size_t shift = 0) {
  const Shape& s = windows.shape();
  if (s.size() != 3) throw ShapeError(detail::concat("window_reverse expects [nW,T,C], got ", shape_str(s)));
  const auto w = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(s[1]))));
  if (w * w != s[1] || H % w || W % w || (H / w) * (W / w) != s[0]) {
    throw ShapeError(detail::concat("window_reverse: ", shape_str(s), " does not tile a ", H, "x", W, " grid"));
  }
  return gather(windows, window_reverse_index(H, W, s[2], w, shift % H), Shape{H, W, s[2]});
}

/// [3,H,W] image -> [N_tokens, C] patch embeddings.
template <std::floating_point T>
Var<T> patch_embed(Graph<T>& g, const ParamSet<T>& params, const Var<T>& image, const EncoderConfig& cfg) {
  const Shape& s = image.shape();
  if (s.size() != 3 || s[0] != 3 || s[1] != cfg.image_size || s[2] != cfg.image_size) {
    throw ShapeError(detail::concat("patch_embed expects [3,", cfg.image_size, ",", cfg.image_size, "], got ",
                                    shape_str(s)));
  }
  const std::size_t p = cfg.patch_size;
  if (s[1] % p || s[2] % p) throw ShapeError("patch_embed: image not divisible by patch size");
  const std::size_t n = (s[1] / p) * (s[2] / p);
  Var<T> patches = gather(image, patch_index(3, s[1], s[2], p), Shape{n, 3 * p * p});
  Var<T> b = params.bind(g, "enc.patch_embed.b");
  return linear(patches, params.bind(g, "enc.patch_embed.w"), &b);
}

// ---------------------------------------------------------------------------
// Attention

/// Pre-softmax scores cos(q_i, k_j) / tau + B_ij (+ mask).
/// q, k: [..., heads, T, d]; log_tau: [heads]; bias: [heads, T, T];
/// mask (optional): [nW, T, T] applied over a leading window axis.
template <std::floating_point T>
Var<T> attention_scores(const Var<T>& q, const Var<T>& k, const Var<T>& log_tau, const Var<T>& bias,
                        const Tensor<T>* mask = nullptr) {
  const Shape& qs = q.shape();
  if (qs.size() < 3 || k.shape() != qs) {
    throw ShapeError(detail::concat("attention: q ", shape_str(qs), " and k ", shape_str(k.shape()),
                                    " must match and be [...,heads,T,d]"));
  }
  const std::size_t heads = qs[qs.size() - 3], Tn = qs[qs.size() - 2];
  if (log_tau.shape() != Shape{heads} || bias.shape() != Shape{heads, Tn, Tn}) {
    throw ShapeError(detail::concat("attention: log_tau ", shape_str(log_tau.shape()), " / bias ",
                                    shape_str(bias.shape()), " inconsistent with ", heads, " heads of ", Tn,
                                    " tokens"));
  }
  for (T lt : log_tau.value().data()) {
    if (!(std::exp(lt) >= T(0.01) * (T{1} - T(1e-6)))) {
      throw ValidationError(detail::concat("attention temperature ", std::exp(lt), " below clamp 0.01"));
    }
  }
  Graph<T>& g = q.graph();
  Var<T> qn = l2_normalize_last(q, T(1e-8));
  Var<T> kn = l2_normalize_last(k, T(1e-8));
  Var<T> cos = matmul(qn, transpose_last2(kn));
  Var<T> inv_tau = reshape(exp(scale(log_tau, T{-1})), Shape{heads, 1, 1});
  Var<T> scores = add(mul(cos, inv_tau), bias);
  if (mask) {
    const Shape& ms = mask->shape();
    if (qs.size() != 4 || ms.size() != 3 || ms[0] != qs[0] || ms[1] != Tn || ms[2] != Tn) {
      throw ShapeError(detail::concat("attention mask ", shape_str(ms), " does not fit q ", shape_str(qs)));
    }
    scores = add(scores, g.constant(mask->reshaped(Shape{ms[0], 1, Tn, Tn})));
  }
  if (!scores.value().all_finite()) throw NumericError("attention: non-finite scores");
  return scores;
}

template <std::floating_point T>
struct AttentionResult {
  Var<T> output;   ///< [..., heads, T, d]
  Var<T> weights;  ///< [..., heads, T, T], rows on the probability simplex
};

/// softmax(cos(q,k)/tau + B) V with L2-normalized q and k.
template <std::floating_point T>
AttentionResult<T> scaled_cosine_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const Var<T>& log_tau,
                                           const Var<T>& bias, const Tensor<T>* mask = nullptr) {
  if (v.shape() != q.shape()) {
    throw ShapeError(detail::concat("attention: v ", shape_str(v.shape()), " must match q ", shape_str(q.shape())));
  }
  Var<T> scores = attention_scores(q, k, log_tau, bias, mask);
  Var<T> w = softmax(scores, scores.shape().size() - 1);
  return {matmul(w, v), w};
}

/// Relative position bias [heads, T, T] gathered from the learnable
/// [(2w-1)^2, heads] table.
template <std::floating_point T>
Var<T> relative_position_bias(const Var<T>& table, std::size_t window) {
  const std::size_t heads = table.shape().at(1);
  if (table.shape()[0] != (2 * window - 1) * (2 * window - 1)) {
    throw ShapeError(detail::concat("bias table ", shape_str(table.shape()), " wrong for window ", window));
  }
  const auto rel = relative_position_index(window);
  const std::size_t Tn = window * window;
  auto idx = std::make_shared<std::vector<std::size_t>>(heads * Tn * Tn);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < Tn * Tn; ++i) (*idx)[h * Tn * Tn + i] = rel[i] * heads + h;
  return gather(table, idx, Shape{heads, Tn, Tn});
}

/// Multi-head windowed attention over [nW, T, C] with projections.
template <std::floating_point T>
Var<T> window_attention(Graph<T>& g, const ParamSet<T>& params, const std::string& prefix, const Var<T>& windows,
                        std::size_t heads, std::size_t window, const Tensor<T>* mask) {
  const Shape& s = windows.shape();
  const std::size_t nW = s[0], Tn = s[1], C = s[2], d = C / heads;
  Var<T> qkv_b = params.bind(g, prefix + "qkv.b");
  Var<T> qkv = linear(windows, params.bind(g, prefix + "qkv.w"), &qkv_b);
  Var<T> split = permute(reshape(qkv, Shape{nW, Tn, 3, heads, d}), {2, 0, 3, 1, 4});
  const Shape hs{nW, heads, Tn, d};
  Var<T> q = reshape(slice(split, 0, 0, 1), hs);
  Var<T> k = reshape(slice(split, 0, 1, 1), hs);
  Var<T> v = reshape(slice(split, 0, 2, 1), hs);
  Var<T> bias = relative_position_bias(params.bind(g, prefix + "bias_table"), window);
  auto att = scaled_cosine_attention(q, k, v, params.bind(g, prefix + "log_tau"), bias, mask);
  Var<T> merged = reshape(permute(att.output, {0, 2, 1, 3}), Shape{nW, Tn, C});
  Var<T> proj_b = params.bind(g, prefix + "proj.b");
  return linear(merged, params.bind(g, prefix + "proj.w"), &proj_b);
}

// ---------------------------------------------------------------------------
// Blocks

/// Shift used by block `index` of a stage: 0, w/2, 0, ... and always 0 when
/// a single window covers the grid.
inline std::size_t block_shift(std::size_t index, std::size_t grid, std::size_t window) {
  return (index % 2 == 1 && grid > window) ? window / 2 : 0;
}

/// Pre-norm Swin block on a [H,W,C] grid.
template <std::floating_point T>
Var<T> swin_block(Graph<T>& g, const ParamSet<T>& params, const std::string& prefix, const Var<T>& x,
                  std::size_t heads, std::size_t window, std::size_t shift) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw ShapeError(detail::concat("swin_block expects [H,W,C], got ", shape_str(s)));
  const std::size_t H = s[0], W = s[1], C = s[2];
  if (C % heads) throw ShapeError(detail::concat("swin_block: width ", C, " not divisible by ", heads, " heads"));
  auto P = [&](const char* n) { return params.bind(g, prefix + n); };

  Var<T> h = layer_norm(x, P("norm1.gamma"), P("norm1.beta"));
  Var<T> win = window_partition(h, window, shift);
  Tensor<T> mask;
  if (shift) mask = shifted_window_mask<T>(H, W, window, shift);
  Var<T> att = window_attention(g, params, prefix + "attn.", win, heads, window, shift ? &mask : nullptr);
  Var<T> y = add(x, window_reverse(att, H, W, shift));

  Var<T> m = layer_norm(y, P("norm2.gamma"), P("norm2.beta"));
  Var<T> b1 = P("mlp.fc1.b");
  Var<T> b2 = P("mlp.fc2.b");
  m = linear(gelu(linear(m, P("mlp.fc1.w"), &b1)), P("mlp.fc2.w"), &b2);
  return add(y, m);
}

/// 2x2 neighbourhood concat -> layer norm -> linear 4C -> 2C.
template <std::floating_point T>
Var<T> patch_merging(Graph<T>& g, const ParamSet<T>& params, const std::string& prefix, const Var<T>& x) {
  const Shape& s = x.shape();
  if (s.size() != 3 || s[0] % 2 || s[1] % 2) {
    throw ShapeError(detail::concat("patch_merging needs an even [H,W,C] grid, got ", shape_str(s)));
  }
  const std::size_t H = s[0], W = s[1], C = s[2];
  auto idx = std::make_shared<std::vector<std::size_t>>();
  idx->reserve(H * W * C);
  // Neighbour order (0,0), (1,0), (0,1), (1,1) as (dy, dx).
  constexpr std::size_t order[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
  for (std::size_t y = 0; y < H / 2; ++y)
    for (std::size_t xx = 0; xx < W / 2; ++xx)
      for (const auto& o : order)
        for (std::size_t c = 0; c < C; ++c) idx->push_back(((2 * y + o[0]) * W + 2 * xx + o[1]) * C + c);
  Var<T> cat = gather(x, idx, Shape{H / 2, W / 2, 4 * C});
  Var<T> n = layer_norm(cat, params.bind(g, prefix + "norm.gamma"), params.bind(g, prefix + "norm.beta"));
  return linear(n, params.bind(g, prefix + "reduction.w"));
}

template <std::floating_point T>
struct EncoderOutput {
  Var<T> bottleneck;          ///< last stage output [g, g, C_last]
  std::vector<Var<T>> stages;  ///< pre-merge feature map of every stage
};

template <std::floating_point T>
EncoderOutput<T> encoder_forward(Graph<T>& g, const ParamSet<T>& params, const Var<T>& image,
                                 const EncoderConfig& cfg) {
  const std::size_t g0 = cfg.grid(0);
  Var<T> x = reshape(patch_embed(g, params, image, cfg), Shape{g0, g0, cfg.embed_dim});
  EncoderOutput<T> out;
  for (std::size_t s = 0; s < cfg.stages(); ++s) {
    for (std::size_t b = 0; b < cfg.depths[s]; ++b) {
      x = swin_block(g, params, detail::concat("enc.stage", s, ".block", b, "."), x, cfg.heads[s], cfg.window_size,
                     block_shift(b, cfg.grid(s), cfg.window_size));
    }
    out.stages.push_back(x);
    if (s + 1 < cfg.stages()) x = patch_merging(g, params, detail::concat("enc.merge", s, "."), x);
  }
  out.bottleneck = x;
  return out;
}

// ---------------------------------------------------------------------------
// Parameter initialization

template <std::floating_point T>
void init_linear(ParamSet<T>& p, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
                 bool with_bias = true) {
  p.add(prefix + "w", rng.normal_tensor<T>({in, out}, 1.0 / std::sqrt(static_cast<double>(in))));
  if (with_bias) p.add(prefix + "b", Tensor<T>(Shape{out}));
}

template <std::floating_point T>
void init_layer_norm(ParamSet<T>& p, const std::string& prefix, std::size_t dim) {
  p.add(prefix + "gamma", Tensor<T>(Shape{dim}, T{1}));
  p.add(prefix + "beta", Tensor<T>(Shape{dim}));
}

template <std::floating_point T>
void init_swin_block(ParamSet<T>& p, const std::string& prefix, std::size_t dim, std::size_t heads,
                     std::size_t window, std::size_t mlp_hidden, Rng& rng) {
  init_layer_norm(p, prefix + "norm1.", dim);
  init_linear(p, prefix + "attn.qkv.", dim, 3 * dim, rng);
  p.add(prefix + "attn.log_tau", Tensor<T>(Shape{heads}, static_cast<T>(std::log(0.1))), ParamKind::LogTemperature);
  p.add(prefix + "attn.bias_table", rng.normal_tensor<T>({(2 * window - 1) * (2 * window - 1), heads}, 0.02));
  init_linear(p, prefix + "attn.proj.", dim, dim, rng);
  init_layer_norm(p, prefix + "norm2.", dim);
  init_linear(p, prefix + "mlp.fc1.", dim, mlp_hidden, rng);
  init_linear(p, prefix + "mlp.fc2.", mlp_hidden, dim, rng);
}

template <std::floating_point T>
void init_encoder(ParamSet<T>& p, const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  init_linear(p, "enc.patch_embed.", 3 * cfg.patch_size * cfg.patch_size, cfg.embed_dim, rng);
  for (std::size_t s = 0; s < cfg.stages(); ++s) {
    for (std::size_t b = 0; b < cfg.depths[s]; ++b) {
      init_swin_block(p, detail::concat("enc.stage", s, ".block", b, "."), cfg.dim(s), cfg.heads[s], cfg.window_size,
                      cfg.mlp_hidden(s), rng);
    }
    if (s + 1 < cfg.stages()) {
      init_layer_norm(p, detail::concat("enc.merge", s, ".norm."), 4 * cfg.dim(s));
      init_linear(p, detail::concat("enc.merge", s, ".reduction."), 4 * cfg.dim(s), 2 * cfg.dim(s), rng, false);
    }
  }
}

}  // namespace gruaunet::swin
