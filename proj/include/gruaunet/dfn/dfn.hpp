// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gruaunet/swin/encoder.hpp"
#include "gruaunet/tensor/ops.hpp"
#include "gruaunet/tensor/params.hpp"

namespace gruaunet::dfn {

/// Bank size and channel-MLP reduction of the bottleneck dynamic filter.
struct DfnConfig {
  std::size_t channels = 192;
  std::size_t filters = 4;
  std::size_t reduction = 4;

  void validate() const {
    if (filters < 1) throw ConfigError("dfn: filter count must be >= 1");
    if (channels == 0 || reduction == 0 || channels % reduction) {
      throw ConfigError(detail::concat("dfn: reduction ", reduction, " must divide channels ", channels));
    }
  }
  std::size_t hidden() const { return channels / reduction; }
};

inline std::string bank_name(const std::string& prefix, std::size_t i) { return detail::concat(prefix, "bank", i); }

/// alpha = softmax(FC(ReLU(FC(GAP(x))))) over the filter bank.
template <std::floating_point T>
Var<T> channel_coefficients(Graph<T>& g, const ParamSet<T>& params, const std::string& prefix, const Var<T>& x) {
  Var<T> b1 = params.bind(g, prefix + "fc1.b");
  Var<T> b2 = params.bind(g, prefix + "fc2.b");
  Var<T> h = relu(linear(global_avg_pool(x), params.bind(g, prefix + "fc1.w"), &b1));
  return softmax(linear(h, params.bind(g, prefix + "fc2.w"), &b2), 0);
}

/// sum_i alpha_i * conv1x1(x, W_i). The bank is contracted with alpha first,
/// which is the same linear map evaluated once.
template <std::floating_point T>
Var<T> dynamic_filter_apply(Graph<T>& g, const ParamSet<T>& params, const std::string& prefix, const Var<T>& x,
                            const Var<T>& alpha) {
  const Shape& xs = x.shape();
  if (xs.size() != 3) throw ShapeError(detail::concat("dynamic_filter_apply expects [C,H,W], got ", shape_str(xs)));
  if (alpha.shape().size() != 1) {
    throw ShapeError(detail::concat("dynamic_filter_apply: alpha must be a vector, got ", shape_str(alpha.shape())));
  }
  const std::size_t n = alpha.shape()[0], C = xs[0];
  std::vector<Var<T>> bank;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string name = bank_name(prefix, i);
    if (!params.contains(name)) {
      throw ShapeError(detail::concat("dynamic_filter_apply: alpha has ", n, " entries but bank has only ", i));
    }
    Var<T> w = params.bind(g, name);
    if (w.shape() != Shape{C, C}) {
      throw ShapeError(detail::concat("bank filter ", name, " ", shape_str(w.shape()), " does not match ", C,
                                      " channels"));
    }
    bank.push_back(reshape(w, Shape{1, C * C}));
  }
  if (params.contains(bank_name(prefix, n))) {
    throw ShapeError(detail::concat("dynamic_filter_apply: alpha has ", n, " entries, bank is larger"));
  }
  Var<T> mixed = reshape(matmul(reshape(alpha, Shape{1, n}), concat(bank, 0)), Shape{C, C});
  return conv1x1(x, mixed, g.constant(Tensor<T>(Shape{C})));
}

/// Layer norm across channels at every position of a [C,H,W] map.
template <std::floating_point T>
Var<T> channel_layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta) {
  return permute(layer_norm(permute(x, {1, 2, 0}), gamma, beta), {2, 0, 1});
}

/// LN_c(sigmoid(conv1x1(x)) * dynamic(x)) + x on a [C,H,W] map.
template <std::floating_point T>
Var<T> dfn_forward(Graph<T>& g, const ParamSet<T>& params, const std::string& prefix, const Var<T>& x) {
  Var<T> gate = sigmoid(conv1x1(x, params.bind(g, prefix + "spatial.w"), params.bind(g, prefix + "spatial.b")));
  Var<T> alpha = channel_coefficients(g, params, prefix, x);
  Var<T> dyn = dynamic_filter_apply(g, params, prefix, x, alpha);
  Var<T> combined = mul(gate, dyn);
  return add(channel_layer_norm(combined, params.bind(g, prefix + "norm.gamma"), params.bind(g, prefix + "norm.beta")),
             x);
}

/// Rescales one bank filter to unit flattened L2 norm.
template <std::floating_point T>
void normalize_filter(Tensor<T>& w) {
  double ss = 0;
  for (T v : w.data()) ss += static_cast<double>(v) * static_cast<double>(v);
  const double n = std::sqrt(ss);
  if (n < 1e-12) throw NumericError("dfn: bank filter collapsed to zero norm");
  for (T& v : w.data()) v = static_cast<T>(static_cast<double>(v) / n);
}

template <std::floating_point T>
void init_dfn(ParamSet<T>& p, const std::string& prefix, const DfnConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t C = cfg.channels;
  for (std::size_t i = 0; i < cfg.filters; ++i) {
    Tensor<T> w = rng.normal_tensor<T>({C, C}, 1.0);
    normalize_filter(w);
    p.add(bank_name(prefix, i), std::move(w), ParamKind::FilterBank);
  }
  p.add(prefix + "spatial.w", rng.normal_tensor<T>({C, C}, 1.0 / std::sqrt(static_cast<double>(C))));
  p.add(prefix + "spatial.b", Tensor<T>(Shape{C}));
  swin::init_linear(p, prefix + "fc1.", C, cfg.hidden(), rng);
  swin::init_linear(p, prefix + "fc2.", cfg.hidden(), cfg.filters, rng);
  swin::init_layer_norm(p, prefix + "norm.", C);
}

}  // namespace gruaunet::dfn
