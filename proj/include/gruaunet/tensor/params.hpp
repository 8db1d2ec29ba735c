// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "gruaunet/tensor/graph.hpp"

namespace gruaunet {

/// Post-update constraints the optimizer applies per parameter.
enum class ParamKind : std::uint8_t {
  Weight,          ///< unconstrained
  LogTemperature,  ///< log of attention temperature; exp(value) kept >= 0.01
  FilterBank,      ///< dynamic-filter bank entry; renormalized to unit L2
};

/// Seeded RNG used for parameter init, shuffling and synthetic data.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  std::size_t below(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }
  std::uint64_t next() { return engine_(); }
  std::mt19937_64& engine() { return engine_; }

  template <std::floating_point T>
  Tensor<T> normal_tensor(Shape shape, double stddev) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(normal(0.0, stddev));
    return t;
  }
  template <std::floating_point T>
  Tensor<T> uniform_tensor(Shape shape, double lo, double hi) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(uniform(lo, hi));
    return t;
  }

 private:
  std::mt19937_64 engine_;
};

/// Named, ordered collection of model parameters.
template <std::floating_point T>
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    ParamKind kind = ParamKind::Weight;
  };

  void add(std::string name, Tensor<T> value, ParamKind kind = ParamKind::Weight) {
    if (index_.contains(name)) throw ConfigError(detail::concat("duplicate parameter name '", name, "'"));
    index_.emplace(name, entries_.size());
    entries_.push_back(Entry{std::move(name), std::move(value), kind});
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  const Tensor<T>& get(const std::string& name) const { return entries_[position(name)].value; }
  Tensor<T>& get(const std::string& name) { return entries_[position(name)].value; }

  std::size_t position(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError(detail::concat("unknown parameter '", name, "'"));
    return it->second;
  }

  /// Binds a parameter as a trainable leaf on the graph.
  Var<T> bind(Graph<T>& g, const std::string& name) const { return g.param(name, get(name)); }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  template <std::floating_point U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>(), e.kind);
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Gradient buffers aligned with a ParamSet's entry order.
template <std::floating_point T>
class Gradients {
 public:
  explicit Gradients(const ParamSet<T>& params) {
    grads_.reserve(params.size());
    for (const auto& e : params.entries()) grads_.emplace_back(e.value.shape());
  }

  /// Adds every bound parameter's gradient from a graph after backward().
  void accumulate(const Graph<T>& g, const ParamSet<T>& params) {
    for (const auto& [name, id] : g.params()) {
      (void)id;
      const Tensor<T>* gr = g.param_grad(name);
      if (!gr) continue;
      Tensor<T>& dst = grads_[params.position(name)];
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += (*gr)[i];
    }
  }

  void zero() {
    for (auto& g : grads_) g.fill(T{0});
  }

  void add(const Gradients& other) {
    for (std::size_t k = 0; k < grads_.size(); ++k)
      for (std::size_t i = 0; i < grads_[k].size(); ++i) grads_[k][i] += other.grads_[k][i];
  }

  Tensor<T>& operator[](std::size_t k) { return grads_[k]; }
  const Tensor<T>& operator[](std::size_t k) const { return grads_[k]; }
  std::size_t size() const { return grads_.size(); }

 private:
  std::vector<Tensor<T>> grads_;
};

}  // namespace gruaunet
