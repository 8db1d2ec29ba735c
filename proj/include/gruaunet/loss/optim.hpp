// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "gruaunet/dfn/dfn.hpp"
#include "gruaunet/tensor/params.hpp"

namespace gruaunet::loss {

inline constexpr double kMinTemperature = 0.01;

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr >= 0)) throw ConfigError(detail::concat("adam lr must be >= 0, got ", lr));
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("adam betas must be in [0,1)");
    if (!(eps > 0)) throw ConfigError("adam eps must be > 0");
  }
};

/// Bias-corrected Adam over a ParamSet. After each update, LogTemperature
/// entries are clamped to tau >= 0.01 and FilterBank entries renormalized.
template <std::floating_point T>
class Adam {
 public:
  explicit Adam(const ParamSet<T>& params, AdamConfig cfg = {}) : cfg_(cfg) {
    cfg_.validate();
    for (const auto& e : params.entries()) {
      m_.emplace_back(e.value.shape());
      v_.emplace_back(e.value.shape());
    }
  }

  const AdamConfig& config() const { return cfg_; }
  std::size_t step_count() const { return t_; }
  const std::vector<Tensor<T>>& first_moments() const { return m_; }
  const std::vector<Tensor<T>>& second_moments() const { return v_; }

  /// `grads[k]` belongs to params.entries()[k]; a null entry means zero.
  /// Throws before touching anything if a gradient is non-finite.
  void step(ParamSet<T>& params, const std::vector<const Tensor<T>*>& grads, double lr) {
    auto& entries = params.entries();
    if (entries.size() != m_.size() || grads.size() != m_.size()) {
      throw ShapeError(detail::concat("adam: state has ", m_.size(), " tensors, got ", entries.size(), " params and ",
                                      grads.size(), " gradients"));
    }
    for (std::size_t k = 0; k < grads.size(); ++k) {
      if (entries[k].value.shape() != m_[k].shape()) {
        throw ShapeError(detail::concat("adam: parameter ", entries[k].name, " changed shape"));
      }
      if (!grads[k]) continue;
      if (grads[k]->shape() != m_[k].shape()) {
        throw ShapeError(detail::concat("adam: gradient for ", entries[k].name, " has shape ",
                                        shape_str(grads[k]->shape()), ", expected ", shape_str(m_[k].shape())));
      }
      if (!grads[k]->all_finite()) {
        throw NumericError(detail::concat("adam: non-finite gradient for ", entries[k].name, ", step rejected"));
      }
    }
    ++t_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t k = 0; k < grads.size(); ++k) {
      Tensor<T>& w = entries[k].value;
      Tensor<T>& m = m_[k];
      Tensor<T>& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = grads[k] ? static_cast<double>((*grads[k])[i]) : 0.0;
        const double mi = b1 * static_cast<double>(m[i]) + (1 - b1) * gi;
        const double vi = b2 * static_cast<double>(v[i]) + (1 - b2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * (mi / c1) / (std::sqrt(vi / c2) + cfg_.eps));
      }
      apply_constraint(entries[k]);
    }
  }

  /// Gradients read from a graph after backward().
  void step(ParamSet<T>& params, const Graph<T>& g, double lr) {
    std::vector<const Tensor<T>*> grads;
    for (const auto& e : params.entries()) grads.push_back(g.param_grad(e.name));
    step(params, grads, lr);
  }

  static void apply_constraint(typename ParamSet<T>::Entry& e) {
    if (e.kind == ParamKind::LogTemperature) {
      const T lo = static_cast<T>(std::log(kMinTemperature));
      for (T& x : e.value.data()) x = std::max(x, lo);
    } else if (e.kind == ParamKind::FilterBank) {
      dfn::normalize_filter(e.value);
    }
  }

 private:
  AdamConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  std::size_t t_ = 0;
};

inline std::size_t default_warmup(std::size_t total_steps) {
  return static_cast<std::size_t>(std::llround(0.05 * static_cast<double>(total_steps)));
}

/// Linear ramp 0 -> base over `warmup` steps, then cosine decay to 0 at `total`.
inline double lr_schedule(std::size_t step, std::size_t total, double base_lr, std::size_t warmup) {
  if (step >= total) return 0.0;
  if (step < warmup) return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace gruaunet::loss
