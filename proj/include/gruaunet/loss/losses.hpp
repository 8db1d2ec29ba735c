// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "gruaunet/tensor/ops.hpp"
#include "gruaunet/tensor/params.hpp"

namespace gruaunet::loss {

inline constexpr double kProbClamp = 1e-7;

enum class FocalVariant {
  Verbatim,  ///< negative term weighted by (1 - alpha*p)^gamma
  Standard,  ///< Lin et al.: (1 - alpha) * p^gamma
};

inline FocalVariant parse_focal_variant(const std::string& s) {
  if (s == "verbatim") return FocalVariant::Verbatim;
  if (s == "standard") return FocalVariant::Standard;
  throw ConfigError("unknown focal_variant '" + s + "' (expected verbatim|standard)");
}

struct FocalConfig {
  double alpha = 0.25;
  double gamma = 2.0;
  FocalVariant variant = FocalVariant::Verbatim;
  bool strict = false;  ///< reject probabilities outside [0,1] instead of clamping silently

  void validate() const {
    if (!(alpha > 0 && alpha < 1)) throw ConfigError(detail::concat("focal alpha must be in (0,1), got ", alpha));
    if (!(gamma >= 0)) throw ConfigError(detail::concat("focal gamma must be >= 0, got ", gamma));
  }
};

struct ContrastiveConfig {
  double margin = 1.0;
  double lambda = 0.5;

  void validate() const {
    if (!(margin > 0)) throw ConfigError(detail::concat("contrastive margin must be > 0, got ", margin));
    if (!(lambda >= 0)) throw ConfigError(detail::concat("contrastive lambda must be >= 0, got ", lambda));
  }
};

/// Index pairs into a batch with a pair label (1 = same class).
struct PairBatch {
  std::vector<std::size_t> first, second;
  std::vector<int> similar;

  std::size_t size() const { return similar.size(); }
  bool empty() const { return similar.empty(); }
};

template <std::floating_point T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
  return detail::unary(
      x, "clamp", [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v > lo && v < hi) ? T{1} : T{0}; });
}

template <std::floating_point T>
Var<T> log(const Var<T>& x) {
  return detail::unary(x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T{1} / v; });
}

/// x^p for x > 0.
template <std::floating_point T>
Var<T> pow(const Var<T>& x, T p) {
  return detail::unary(
      x, "pow", [p](T v) { return std::pow(v, p); },
      [p](T v, T) { return p == T{0} ? T{0} : p * std::pow(v, p - T{1}); });
}

/// sqrt with derivative 0 at the origin.
template <std::floating_point T>
Var<T> sqrt(const Var<T>& x) {
  return detail::unary(
      x, "sqrt", [](T v) { return std::sqrt(v); }, [](T, T y) { return y > T{0} ? T{0.5} / y : T{0}; });
}

/// -(1/N) sum[alpha (1-p)^g y log p + (1-y) w(p) log(1-p)], p clamped to
/// [1e-7, 1-1e-7]. w(p) = (1 - alpha p)^g (verbatim) or (1-alpha) p^g (standard).
template <std::floating_point T>
Var<T> focal_loss(const std::vector<int>& labels, const Var<T>& prob, const FocalConfig& cfg) {
  cfg.validate();
  const std::size_t N = labels.size();
  if (N == 0) throw ValidationError("focal_loss: empty batch");
  if (prob.value().size() != N) {
    throw ShapeError(detail::concat("focal_loss: ", N, " labels but probabilities of shape ", shape_str(prob.shape())));
  }
  Tensor<T> y(Shape{N}), not_y(Shape{N});
  for (std::size_t i = 0; i < N; ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ValidationError(detail::concat("focal_loss: label ", labels[i]));
    const T p = prob.value()[i];
    if (!std::isfinite(p)) throw NumericError("focal_loss: non-finite probability");
    if (cfg.strict && (p < T{0} || p > T{1})) {
      throw ValidationError(detail::concat("focal_loss: probability ", p, " outside [0,1]"));
    }
    y[i] = static_cast<T>(labels[i]);
    not_y[i] = static_cast<T>(1 - labels[i]);
  }
  Graph<T>& g = prob.graph();
  const T a = static_cast<T>(cfg.alpha), gm = static_cast<T>(cfg.gamma);
  Var<T> p = clamp(reshape(prob, Shape{N}), static_cast<T>(kProbClamp), static_cast<T>(1 - kProbClamp));
  Var<T> q = one_minus(p);
  Var<T> pos = scale(mul(pow(q, gm), log(p)), a);
  Var<T> w = cfg.variant == FocalVariant::Verbatim ? pow(one_minus(scale(p, a)), gm) : scale(pow(p, gm), T{1} - a);
  Var<T> neg = mul(w, log(q));
  Var<T> terms = add(mul(pos, g.constant(std::move(y))), mul(neg, g.constant(std::move(not_y))));
  return scale(mean(terms), T{-1});
}

/// Euclidean distances between the paired rows of [B,E] embeddings.
template <std::floating_point T>
Var<T> pair_distances(const Var<T>& embeddings, const PairBatch& pairs) {
  const Shape& s = embeddings.shape();
  if (s.size() != 2) throw ShapeError(detail::concat("pair_distances expects [B,E], got ", shape_str(s)));
  const std::size_t B = s[0], E = s[1], N = pairs.size();
  if (pairs.first.size() != N || pairs.second.size() != N) throw ValidationError("pair_distances: ragged PairBatch");
  auto rows = [&](const std::vector<std::size_t>& which) {
    auto idx = std::make_shared<std::vector<std::size_t>>();
    idx->reserve(N * E);
    for (std::size_t r : which) {
      if (r >= B) throw ShapeError(detail::concat("pair_distances: row ", r, " outside batch of ", B));
      for (std::size_t e = 0; e < E; ++e) idx->push_back(r * E + e);
    }
    return gather(embeddings, Index(std::move(idx)), Shape{N, E});
  };
  Var<T> diff = sub(rows(pairs.first), rows(pairs.second));
  return sqrt(sum_axis(mul(diff, diff), 1));
}

/// (1/2N) sum[s d^2/2 + (1-s) max(0, m-d)^2/2].
template <std::floating_point T>
Var<T> contrastive_loss(const Var<T>& distances, const std::vector<int>& similar, const ContrastiveConfig& cfg) {
  cfg.validate();
  const std::size_t N = similar.size();
  if (N == 0) throw ValidationError("contrastive_loss: empty pair batch");
  if (distances.value().size() != N) {
    throw ShapeError(detail::concat("contrastive_loss: ", N, " pair labels but distances of shape ",
                                    shape_str(distances.shape())));
  }
  Tensor<T> s(Shape{N}), not_s(Shape{N});
  for (std::size_t i = 0; i < N; ++i) {
    if (similar[i] != 0 && similar[i] != 1) throw ValidationError(detail::concat("contrastive_loss: pair label ", similar[i]));
    if (distances.value()[i] < T{0}) throw ValidationError("contrastive_loss: negative distance");
    s[i] = static_cast<T>(similar[i]);
    not_s[i] = static_cast<T>(1 - similar[i]);
  }
  Graph<T>& g = distances.graph();
  Var<T> d = reshape(distances, Shape{N});
  Var<T> hinge = relu(add_scalar(scale(d, T{-1}), static_cast<T>(cfg.margin)));
  Var<T> terms = add(mul(mul(d, d), g.constant(std::move(s))), mul(mul(hinge, hinge), g.constant(std::move(not_s))));
  return scale(sum(terms), static_cast<T>(0.25 / static_cast<double>(N)));
}

template <std::floating_point T>
Var<T> contrastive_loss(const Var<T>& embeddings, const PairBatch& pairs, const ContrastiveConfig& cfg) {
  return contrastive_loss(pair_distances(embeddings, pairs), pairs.similar, cfg);
}

struct LossParts {
  double focal = 0, contrastive = 0, total = 0;
};

/// focal + lambda * contrastive. With lambda = 0 the pair batch may be empty.
template <std::floating_point T>
Var<T> combined_loss(const std::vector<int>& labels, const Var<T>& prob, const Var<T>& embeddings,
                     const PairBatch& pairs, const FocalConfig& fcfg, const ContrastiveConfig& ccfg,
                     LossParts* parts = nullptr) {
  ccfg.validate();
  Var<T> f = focal_loss(labels, prob, fcfg);
  Var<T> total = f;
  double c_value = 0;
  if (!(ccfg.lambda == 0 && pairs.empty())) {
    Var<T> c = contrastive_loss(embeddings, pairs, ccfg);
    c_value = static_cast<double>(c.value()[0]);
    total = add(f, scale(c, static_cast<T>(ccfg.lambda)));
  }
  if (parts) *parts = {static_cast<double>(f.value()[0]), c_value, static_cast<double>(total.value()[0])};
  return total;
}

enum class PairStrategy {
  Balanced,  ///< equal similar and dissimilar counts, capped
  All,       ///< every within-batch pair, capped
};

inline constexpr std::size_t kPairCap = 32;

/// Pairs within one batch of class labels, deterministic under `seed` and
/// returned in (first, second) order.
inline PairBatch make_pairs(const std::vector<int>& labels, std::uint64_t seed,
                            PairStrategy strategy = PairStrategy::Balanced, std::size_t cap = kPairCap) {
  if (labels.size() < 2) throw ValidationError("make_pairs: need at least 2 samples");
  if (cap == 0) throw ConfigError("make_pairs: cap must be positive");
  using P = std::pair<std::size_t, std::size_t>;
  std::vector<P> sim, dis;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (std::size_t j = i + 1; j < labels.size(); ++j) (labels[i] == labels[j] ? sim : dis).emplace_back(i, j);
  }
  Rng rng(seed);
  std::vector<P> chosen;
  if (strategy == PairStrategy::Balanced && (sim.empty() || dis.empty())) {
    warn("make_pairs: single-class batch, falling back to unbalanced pairs");
    strategy = PairStrategy::All;
  }
  if (strategy == PairStrategy::Balanced) {
    std::shuffle(sim.begin(), sim.end(), rng.engine());
    std::shuffle(dis.begin(), dis.end(), rng.engine());
    const std::size_t n = std::min({sim.size(), dis.size(), std::max<std::size_t>(cap / 2, 1)});
    chosen.assign(sim.begin(), sim.begin() + static_cast<std::ptrdiff_t>(n));
    chosen.insert(chosen.end(), dis.begin(), dis.begin() + static_cast<std::ptrdiff_t>(n));
  } else {
    chosen = sim;
    chosen.insert(chosen.end(), dis.begin(), dis.end());
    if (chosen.size() > cap) {
      std::shuffle(chosen.begin(), chosen.end(), rng.engine());
      chosen.resize(cap);
    }
  }
  std::sort(chosen.begin(), chosen.end());
  PairBatch out;
  for (const auto& [i, j] : chosen) {
    out.first.push_back(i);
    out.second.push_back(j);
    out.similar.push_back(labels[i] == labels[j] ? 1 : 0);
  }
  return out;
}

}  // namespace gruaunet::loss
