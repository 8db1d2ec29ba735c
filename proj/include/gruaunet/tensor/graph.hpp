// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gruaunet/tensor/tensor.hpp"

namespace gruaunet {

template <std::floating_point T>
class Graph;

/// Handle to a value recorded on a Graph. Cheap to copy; valid while the
/// graph lives.
template <std::floating_point T>
class Var {
 public:
  Var() = default;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const { return id_; }
  Graph<T>& graph() const { return *graph_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph<T>;
  Var(Graph<T>* g, std::size_t id) : graph_(g), id_(id) {}

  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in creation order, so walking the
/// tape backwards visits every node after all of its consumers.
template <std::floating_point T>
class Graph {
 public:
  /// Receives the node's accumulated output gradient and adds the matching
  /// contributions into its parents through Graph::grad().
  using BackwardFn = std::function<void(Graph&, const Tensor<T>&)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> value) { return push("constant", std::move(value), false, {}, {}); }

  Var<T> leaf(Tensor<T> value) { return push("leaf", std::move(value), true, {}, {}); }

  /// Trainable leaf bound by name. Binding the same name twice on one graph
  /// returns the same node, so shared weights accumulate a single gradient.
  Var<T> param(const std::string& name, const Tensor<T>& value) {
    if (auto it = param_index_.find(name); it != param_index_.end()) return Var<T>(this, it->second);
    Var<T> v = push("param:" + name, value, true, {}, {});
    param_index_.emplace(name, v.id());
    param_order_.emplace_back(name, v.id());
    return v;
  }

  /// Records an operation. The backward rule is dropped when no parent needs a gradient.
  Var<T> record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn) {
    return record(op, std::move(value), std::vector<Var<T>>(parents), std::move(fn));
  }

  Var<T> record(const char* op, Tensor<T> value, const std::vector<Var<T>>& parents, BackwardFn fn) {
    bool needs = false;
    std::vector<std::size_t> ids;
    ids.reserve(parents.size());
    for (const auto& p : parents) {
      if (p.graph_ != this) throw Error(detail::concat("operation '", op, "' mixes graphs"));
      ids.push_back(p.id_);
      needs = needs || nodes_[p.id_].requires_grad;
    }
    if (finite_checks_enabled() && !value.all_finite()) {
      throw NumericError(detail::concat("non-finite output from operation '", op, "' with shape ",
                                        shape_str(value.shape())));
    }
    return push(op, std::move(value), needs, std::move(ids), needs ? std::move(fn) : BackwardFn{});
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor<T>& value(const Var<T>& v) const { return value(v.id_); }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool requires_grad(const Var<T>& v) const { return requires_grad(v.id_); }
  const std::string& op_name(std::size_t id) const { return nodes_.at(id).op; }

  /// Gradient buffer of a node, allocated as zeros on first touch.
  Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }
  Tensor<T>& grad(const Var<T>& v) { return grad(v.id_); }
  bool has_grad(std::size_t id) const { return !nodes_.at(id).grad.empty(); }
  bool has_grad(const Var<T>& v) const { return has_grad(v.id_); }

  /// Backward from a scalar root with seed 1.
  void backward(const Var<T>& root) {
    if (root.value().size() != 1) {
      throw ShapeError(detail::concat("backward() needs a scalar root, got shape ",
                                      shape_str(root.shape())));
    }
    Tensor<T> seed(root.shape(), T{1});
    std::vector<std::pair<Var<T>, Tensor<T>>> seeds;
    seeds.emplace_back(root, std::move(seed));
    backward(seeds);
  }

  /// Backward from several roots, each seeded with an upstream gradient.
  void backward(const std::vector<std::pair<Var<T>, Tensor<T>>>& seeds) {
    if (backward_done_) throw Error("backward() called twice on the same graph without reset_grads()");
    backward_done_ = true;
    std::size_t last = 0;
    for (const auto& [root, seed] : seeds) {
      if (root.graph_ != this) throw Error("backward seed belongs to another graph");
      if (seed.shape() != root.shape()) {
        throw ShapeError(detail::concat("seed shape ", shape_str(seed.shape()), " does not match root ",
                                        shape_str(root.shape())));
      }
      Tensor<T>& g = grad(root.id_);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
      last = std::max(last, root.id_ + 1);
    }
    for (std::size_t id = last; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, n.grad);
    }
  }

  void reset_grads() {
    for (auto& n : nodes_) n.grad = Tensor<T>();
    backward_done_ = false;
  }

  /// Names of bound parameters in binding order.
  const std::vector<std::pair<std::string, std::size_t>>& params() const { return param_order_; }

  /// Gradient of a bound parameter, or nullptr when it was never bound or never reached.
  const Tensor<T>* param_grad(const std::string& name) const {
    auto it = param_index_.find(name);
    if (it == param_index_.end()) return nullptr;
    const Node& n = nodes_[it->second];
    return n.grad.empty() ? nullptr : &n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::string op;
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::size_t> parents;
    BackwardFn backward;
  };

  Var<T> push(std::string op, Tensor<T> value, bool requires_grad, std::vector<std::size_t> parents,
              BackwardFn fn) {
    nodes_.push_back(Node{std::move(op), std::move(value), Tensor<T>(), requires_grad, std::move(parents),
                          std::move(fn)});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
  std::unordered_map<std::string, std::size_t> param_index_;
  std::vector<std::pair<std::string, std::size_t>> param_order_;
  bool backward_done_ = false;
};

template <std::floating_point T>
const Tensor<T>& Var<T>::value() const {
  return graph_->value(id_);
}

}  // namespace gruaunet
