// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <string_view>

#include "gruaunet/tensor/gemm.hpp"
#include "gruaunet/tensor/graph.hpp"

namespace gruaunet {

using Index = std::shared_ptr<const std::vector<std::size_t>>;

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b, std::string_view op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(concat(op, ": shapes ", shape_str(a), " and ", shape_str(b), " are not broadcastable"));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

/// Strides of `in` laid over `out`, zero on broadcast axes.
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  const auto own = shape_strides(in);
  const std::size_t lead = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) strides[lead + i] = in[i] == 1 ? 0 : own[i];
  return strides;
}

/// Calls f(out_offset, a_offset, b_offset) for every element of `out`.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                        F&& f) {
  const std::size_t rank = out.size();
  if (rank == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t inner = out[rank - 1];
  const std::size_t ia = sa[rank - 1];
  const std::size_t ib = sb[rank - 1];
  const std::size_t rows = shape_numel(out) / inner;
  std::vector<std::size_t> idx(rank - 1, 0);
  std::size_t oa = 0, ob = 0, o = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < inner; ++j) f(o + j, oa + j * ia, ob + j * ib);
    o += inner;
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis, std::string_view op) {
  if (axis >= s.size()) throw ShapeError(concat(op, ": axis ", axis, " out of range for ", shape_str(s)));
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <std::floating_point T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.ptr();
  const T* s = src.ptr();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

enum class BinaryKind { Add, Sub, Mul };

template <std::floating_point T>
Var<T> binary(const Var<T>& a, const Var<T>& b, BinaryKind kind, const char* op) {
  Graph<T>& g = a.graph();
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.shape() == bv.shape()) {
    Tensor<T> out(av.shape());
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) {
      out[i] = kind == BinaryKind::Add ? av[i] + bv[i] : kind == BinaryKind::Sub ? av[i] - bv[i] : av[i] * bv[i];
    }
    const std::size_t ia = a.id(), ib = b.id();
    return g.record(op, std::move(out), {a, b}, [ia, ib, kind](Graph<T>& gr, const Tensor<T>& dy) {
      const std::size_t n = dy.size();
      if (gr.requires_grad(ia)) {
        Tensor<T>& da = gr.grad(ia);
        if (kind == BinaryKind::Mul) {
          const Tensor<T>& bv = gr.value(ib);
          for (std::size_t i = 0; i < n; ++i) da[i] += dy[i] * bv[i];
        } else {
          add_into(da, dy);
        }
      }
      if (gr.requires_grad(ib)) {
        Tensor<T>& db = gr.grad(ib);
        if (kind == BinaryKind::Mul) {
          const Tensor<T>& av = gr.value(ia);
          for (std::size_t i = 0; i < n; ++i) db[i] += dy[i] * av[i];
        } else if (kind == BinaryKind::Sub) {
          for (std::size_t i = 0; i < n; ++i) db[i] -= dy[i];
        } else {
          add_into(db, dy);
        }
      }
    });
  }
  Shape out_shape = broadcast_shape(av.shape(), bv.shape(), op);
  auto sa = broadcast_strides(av.shape(), out_shape);
  auto sb = broadcast_strides(bv.shape(), out_shape);
  Tensor<T> out(out_shape);
  for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
    out[o] = kind == BinaryKind::Add ? av[i] + bv[j] : kind == BinaryKind::Sub ? av[i] - bv[j] : av[i] * bv[j];
  });
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(op, std::move(out), {a, b},
                  [ia, ib, kind, out_shape, sa, sb](Graph<T>& gr, const Tensor<T>& dy) {
                    const bool ga = gr.requires_grad(ia), gb = gr.requires_grad(ib);
                    T* da = ga ? gr.grad(ia).ptr() : nullptr;
                    T* db = gb ? gr.grad(ib).ptr() : nullptr;
                    const Tensor<T>& av = gr.value(ia);
                    const Tensor<T>& bv = gr.value(ib);
                    for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
                      const T d = dy[o];
                      switch (kind) {
                        case BinaryKind::Add:
                          if (da) da[i] += d;
                          if (db) db[j] += d;
                          break;
                        case BinaryKind::Sub:
                          if (da) da[i] += d;
                          if (db) db[j] -= d;
                          break;
                        case BinaryKind::Mul:
                          if (da) da[i] += d * bv[j];
                          if (db) db[j] += d * av[i];
                          break;
                      }
                    });
                  });
}

/// Elementwise map with a derivative expressed through input and output.
template <std::floating_point T, class Fwd, class Deriv>
Var<T> unary(const Var<T>& x, const char* op, Fwd fwd, Deriv deriv) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  const std::size_t ix = x.id();
  auto self = std::make_shared<std::size_t>(0);
  Var<T> y = x.graph().record(op, std::move(out), {x}, [ix, self, deriv](Graph<T>& gr, const Tensor<T>& dy) {
    const Tensor<T>& xv = gr.value(ix);
    const Tensor<T>& yv = gr.value(*self);
    Tensor<T>& dx = gr.grad(ix);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * deriv(xv[i], yv[i]);
  });
  *self = y.id();
  return y;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (numpy-style broadcasting)

template <std::floating_point T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::Add, "add");
}
template <std::floating_point T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::Sub, "sub");
}
template <std::floating_point T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::Mul, "mul");
}
template <std::floating_point T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <std::floating_point T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <std::floating_point T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }

template <std::floating_point T>
Var<T> scale(const Var<T>& x, T c) {
  return detail::unary(x, "scale", [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <std::floating_point T>
Var<T> add_scalar(const Var<T>& x, T c) {
  return detail::unary(x, "add_scalar", [c](T v) { return v + c; }, [](T, T) { return T{1}; });
}

/// 1 - x
template <std::floating_point T>
Var<T> one_minus(const Var<T>& x) {
  return detail::unary(x, "one_minus", [](T v) { return T{1} - v; }, [](T, T) { return T{-1}; });
}

template <std::floating_point T>
Var<T> exp(const Var<T>& x) {
  return detail::unary(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

// ---------------------------------------------------------------------------
// Activations

enum class Activation { Sigmoid, Tanh, Relu, Gelu };

inline Activation parse_activation(std::string_view name) {
  if (name == "sigmoid") return Activation::Sigmoid;
  if (name == "tanh") return Activation::Tanh;
  if (name == "relu") return Activation::Relu;
  if (name == "gelu") return Activation::Gelu;
  throw ValidationError(detail::concat("unknown activation kind '", name, "'"));
}

template <std::floating_point T>
T sigmoid_scalar(T v) {
  // Split by sign so exp never overflows.
  if (v >= 0) return T{1} / (T{1} + std::exp(-v));
  const T e = std::exp(v);
  return e / (T{1} + e);
}

template <std::floating_point T>
Var<T> activation(Activation kind, const Var<T>& x) {
  switch (kind) {
    case Activation::Sigmoid:
      return detail::unary(x, "sigmoid", [](T v) { return sigmoid_scalar(v); },
                           [](T, T y) { return y * (T{1} - y); });
    case Activation::Tanh:
      return detail::unary(x, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T{1} - y * y; });
    case Activation::Relu:
      return detail::unary(x, "relu", [](T v) { return v > 0 ? v : T{0}; },
                           [](T v, T) { return v > 0 ? T{1} : T{0}; });
    case Activation::Gelu: {
      constexpr T inv_sqrt2 = T(0.70710678118654752440);
      constexpr T inv_sqrt2pi = T(0.39894228040143267794);
      return detail::unary(
          x, "gelu", [](T v) { return T(0.5) * v * (T{1} + std::erf(v * inv_sqrt2)); },
          [](T v, T) { return T(0.5) * (T{1} + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-T(0.5) * v * v); });
    }
  }
  throw ValidationError("unknown activation kind");
}

template <std::floating_point T>
Var<T> sigmoid(const Var<T>& x) { return activation(Activation::Sigmoid, x); }
template <std::floating_point T>
Var<T> tanh(const Var<T>& x) { return activation(Activation::Tanh, x); }
template <std::floating_point T>
Var<T> relu(const Var<T>& x) { return activation(Activation::Relu, x); }
template <std::floating_point T>
Var<T> gelu(const Var<T>& x) { return activation(Activation::Gelu, x); }

// ---------------------------------------------------------------------------
// Matrix products

/// [..., M, K] x [..., K, N] -> [..., M, N] with broadcast batch dimensions.
template <std::floating_point T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) {
    throw ShapeError(detail::concat("matmul needs rank >= 2, got ", shape_str(as), " and ", shape_str(bs)));
  }
  const std::size_t M = as[as.size() - 2], K = as.back(), K2 = bs[bs.size() - 2], N = bs.back();
  if (K != K2) {
    throw ShapeError(detail::concat("matmul inner dimensions disagree: ", shape_str(as), " x ", shape_str(bs)));
  }
  const Shape batch_a(as.begin(), as.end() - 2), batch_b(bs.begin(), bs.end() - 2);
  Shape batch;
  try {
    batch = detail::broadcast_shape(batch_a, batch_b, "matmul");
  } catch (const ShapeError&) {
    throw ShapeError(detail::concat("matmul batch dimensions not broadcastable: ", shape_str(as), " x ",
                                    shape_str(bs)));
  }
  auto sa = detail::broadcast_strides(batch_a, batch);
  auto sb = detail::broadcast_strides(batch_b, batch);
  Shape out_shape = batch;
  out_shape.push_back(M);
  out_shape.push_back(N);
  Tensor<T> out(out_shape);
  const T* A = a.value().ptr();
  const T* B = b.value().ptr();
  T* C = out.ptr();
  detail::for_each_broadcast(batch, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
    kernels::gemm_accumulate(false, false, M, N, K, A + i * M * K, B + j * K * N, C + o * M * N);
  });
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record("matmul", std::move(out), {a, b},
                          [ia, ib, batch, sa, sb, M, N, K](Graph<T>& gr, const Tensor<T>& dy) {
                            const T* A = gr.value(ia).ptr();
                            const T* B = gr.value(ib).ptr();
                            T* dA = gr.requires_grad(ia) ? gr.grad(ia).ptr() : nullptr;
                            T* dB = gr.requires_grad(ib) ? gr.grad(ib).ptr() : nullptr;
                            const T* dC = dy.ptr();
                            detail::for_each_broadcast(batch, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
                              if (dA)
                                kernels::gemm_accumulate(false, true, M, K, N, dC + o * M * N, B + j * K * N,
                                                         dA + i * M * K);
                              if (dB)
                                kernels::gemm_accumulate(true, false, K, N, M, A + i * M * K, dC + o * M * N,
                                                         dB + j * K * N);
                            });
                          });
}

/// Token-wise affine map: x [..., in] * w [in, out] + b [out].
template <std::floating_point T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>* b = nullptr) {
  const Shape& xs = x.shape();
  if (xs.empty()) throw ShapeError("linear on a rank-0 tensor");
  if (w.shape().size() != 2 || w.shape()[0] != xs.back()) {
    throw ShapeError(detail::concat("linear: input ", shape_str(xs), " incompatible with weight ",
                                    shape_str(w.shape())));
  }
  std::size_t rows = x.value().size() / xs.back();
  Shape flat{rows, xs.back()};
  Var<T> y = matmul(reshape(x, flat), w);
  if (b) y = add(y, *b);
  Shape out = xs;
  out.back() = w.shape()[1];
  return reshape(y, out);
}

// ---------------------------------------------------------------------------
// Layout

template <std::floating_point T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id();
  return x.graph().record("reshape", std::move(out), {x},
                          [ix](Graph<T>& gr, const Tensor<T>& dy) { detail::add_into(gr.grad(ix), dy); });
}

/// out.flat[i] = x.flat[index[i]]. Covers every pure rearrangement
/// (permutes, window partition, cyclic shifts, pixel shuffles).
template <std::floating_point T>
Var<T> gather(const Var<T>& x, Index index, Shape out_shape) {
  if (!index || index->size() != shape_numel(out_shape)) {
    throw ShapeError(detail::concat("gather: index length does not match output shape ", shape_str(out_shape)));
  }
  const Tensor<T>& xv = x.value();
  Tensor<T> out(std::move(out_shape));
  const auto& idx = *index;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= xv.size()) throw ShapeError(detail::concat("gather: index ", idx[i], " out of range"));
    out[i] = xv[idx[i]];
  }
  const std::size_t ix = x.id();
  return x.graph().record("gather", std::move(out), {x}, [ix, index](Graph<T>& gr, const Tensor<T>& dy) {
    Tensor<T>& dx = gr.grad(ix);
    const auto& idx = *index;
    for (std::size_t i = 0; i < idx.size(); ++i) dx[idx[i]] += dy[i];
  });
}

inline Index permute_index(const Shape& in, const std::vector<std::size_t>& axes, Shape* out_shape) {
  if (axes.size() != in.size()) throw ShapeError("permute: axes length does not match rank");
  std::vector<bool> seen(in.size(), false);
  Shape out(in.size());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] >= in.size() || seen[axes[i]]) throw ShapeError("permute: axes are not a permutation");
    seen[axes[i]] = true;
    out[i] = in[axes[i]];
  }
  const auto in_strides = shape_strides(in);
  std::vector<std::size_t> strides(in.size());
  for (std::size_t i = 0; i < axes.size(); ++i) strides[i] = in_strides[axes[i]];
  auto idx = std::make_shared<std::vector<std::size_t>>(shape_numel(out));
  std::vector<std::size_t> zero(out.size(), 0);
  detail::for_each_broadcast(out, strides, zero,
                             [&](std::size_t o, std::size_t src, std::size_t) { (*idx)[o] = src; });
  *out_shape = out;
  return idx;
}

template <std::floating_point T>
Var<T> permute(const Var<T>& x, const std::vector<std::size_t>& axes) {
  Shape out;
  Index idx = permute_index(x.shape(), axes, &out);
  return gather(x, std::move(idx), std::move(out));
}

template <std::floating_point T>
Var<T> transpose_last2(const Var<T>& x) {
  std::vector<std::size_t> axes(x.shape().size());
  std::iota(axes.begin(), axes.end(), 0);
  if (axes.size() < 2) throw ShapeError("transpose_last2 needs rank >= 2");
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(x, axes);
}

template <std::floating_point T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range");
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == s0[i];
    if (!ok) throw ShapeError(detail::concat("concat: shape ", shape_str(s), " incompatible with ", shape_str(s0)));
    out_shape[axis] += s[axis];
  }
  auto split = detail::split_axis(out_shape, axis, "concat");
  Tensor<T> out(out_shape);
  std::vector<std::size_t> ids, widths;
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[axis] * split.inner;
    const T* src = p.value().ptr();
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy(src + o * w, src + (o + 1) * w, out.ptr() + o * split.n * split.inner + col);
    }
    col += w;
    ids.push_back(p.id());
    widths.push_back(w);
  }
  const std::size_t row = split.n * split.inner, outer = split.outer;
  return parts[0].graph().record("concat", std::move(out), parts,
                                 [ids, widths, row, outer](Graph<T>& gr, const Tensor<T>& dy) {
                                   std::size_t col = 0;
                                   for (std::size_t k = 0; k < ids.size(); ++k) {
                                     if (gr.requires_grad(ids[k])) {
                                       T* dx = gr.grad(ids[k]).ptr();
                                       for (std::size_t o = 0; o < outer; ++o)
                                         for (std::size_t j = 0; j < widths[k]; ++j)
                                           dx[o * widths[k] + j] += dy[o * row + col + j];
                                     }
                                     col += widths[k];
                                   }
                                 });
}

template <std::floating_point T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  auto split = detail::split_axis(x.shape(), axis, "slice");
  if (length == 0 || start + length > split.n) {
    throw ShapeError(detail::concat("slice [", start, ",", start + length, ") out of range on axis ", axis,
                                    " of ", shape_str(x.shape())));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  Tensor<T> out(out_shape);
  const T* src = x.value().ptr();
  const std::size_t w = length * split.inner, row = split.n * split.inner, off = start * split.inner;
  for (std::size_t o = 0; o < split.outer; ++o) std::copy(src + o * row + off, src + o * row + off + w, out.ptr() + o * w);
  const std::size_t ix = x.id(), outer = split.outer;
  return x.graph().record("slice", std::move(out), {x}, [ix, w, row, off, outer](Graph<T>& gr, const Tensor<T>& dy) {
    T* dx = gr.grad(ix).ptr();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < w; ++j) dx[o * row + off + j] += dy[o * w + j];
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <std::floating_point T>
Var<T> sum(const Var<T>& x) {
  T acc{0};
  for (T v : x.value().data()) acc += v;
  const std::size_t ix = x.id();
  return x.graph().record("sum", Tensor<T>::scalar(acc), {x}, [ix](Graph<T>& gr, const Tensor<T>& dy) {
    Tensor<T>& dx = gr.grad(ix);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[0];
  });
}

template <std::floating_point T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

/// Sum over one axis, which is removed from the shape.
template <std::floating_point T>
Var<T> sum_axis(const Var<T>& x, std::size_t axis) {
  auto s = detail::split_axis(x.shape(), axis, "sum_axis");
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor<T> out(out_shape);
  const T* src = x.value().ptr();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.n; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += src[(o * s.n + k) * s.inner + i];
  const std::size_t ix = x.id();
  return x.graph().record("sum_axis", std::move(out), {x}, [ix, s](Graph<T>& gr, const Tensor<T>& dy) {
    T* dx = gr.grad(ix).ptr();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < s.n; ++k)
        for (std::size_t i = 0; i < s.inner; ++i) dx[(o * s.n + k) * s.inner + i] += dy[o * s.inner + i];
  });
}

template <std::floating_point T>
Var<T> mean_axis(const Var<T>& x, std::size_t axis) {
  const std::size_t n = x.shape().at(axis);
  return scale(sum_axis(x, axis), T{1} / static_cast<T>(n));
}

/// Max over one axis (removed). Gradient flows to the first maximal element.
template <std::floating_point T>
Var<T> max_axis(const Var<T>& x, std::size_t axis) {
  auto s = detail::split_axis(x.shape(), axis, "max_axis");
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor<T> out(out_shape);
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
  const T* src = x.value().ptr();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = o * s.n * s.inner + i;
      for (std::size_t k = 1; k < s.n; ++k) {
        const std::size_t at = (o * s.n + k) * s.inner + i;
        if (src[at] > src[best]) best = at;
      }
      out[o * s.inner + i] = src[best];
      (*arg)[o * s.inner + i] = best;
    }
  }
  const std::size_t ix = x.id();
  return x.graph().record("max_axis", std::move(out), {x}, [ix, arg](Graph<T>& gr, const Tensor<T>& dy) {
    T* dx = gr.grad(ix).ptr();
    for (std::size_t i = 0; i < arg->size(); ++i) dx[(*arg)[i]] += dy[i];
  });
}

// ---------------------------------------------------------------------------
// Normalization

/// Numerically stable softmax along `axis`.
template <std::floating_point T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  auto s = detail::split_axis(x.shape(), axis, "softmax");
  const Tensor<T>& xv = x.value();
  if (!xv.all_finite()) throw NumericError("softmax: non-finite input");
  Tensor<T> out(xv.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.n * s.inner + i;
      T m = xv[base];
      for (std::size_t k = 1; k < s.n; ++k) m = std::max(m, xv[base + k * s.inner]);
      T z{0};
      for (std::size_t k = 0; k < s.n; ++k) {
        const T e = std::exp(xv[base + k * s.inner] - m);
        out[base + k * s.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < s.n; ++k) out[base + k * s.inner] /= z;
    }
  }
  const std::size_t ix = x.id();
  auto self = std::make_shared<std::size_t>(0);
  Var<T> y = x.graph().record("softmax", std::move(out), {x}, [ix, self, s](Graph<T>& gr, const Tensor<T>& dy) {
    const Tensor<T>& yv = gr.value(*self);
    T* dx = gr.grad(ix).ptr();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.n * s.inner + i;
        T dot{0};
        for (std::size_t k = 0; k < s.n; ++k) dot += dy[base + k * s.inner] * yv[base + k * s.inner];
        for (std::size_t k = 0; k < s.n; ++k) {
          const std::size_t at = base + k * s.inner;
          dx[at] += yv[at] * (dy[at] - dot);
        }
      }
    }
  });
  *self = y.id();
  return y;
}

/// Layer normalization over the last dimension.
template <std::floating_point T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const Shape& xs = x.shape();
  if (xs.empty()) throw ShapeError("layer_norm on rank-0 tensor");
  const std::size_t D = xs.back();
  if (gamma.shape() != Shape{D} || beta.shape() != Shape{D}) {
    throw ShapeError(detail::concat("layer_norm: gamma/beta ", shape_str(gamma.shape()), "/",
                                    shape_str(beta.shape()), " do not match last dim of ", shape_str(xs)));
  }
  const std::size_t rows = x.value().size() / D;
  const Tensor<T>& xv = x.value();
  const Tensor<T>& gv = gamma.value();
  const Tensor<T>& bv = beta.value();
  Tensor<T> out(xs);
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.ptr() + r * D;
    T mu{0};
    for (std::size_t j = 0; j < D; ++j) mu += xr[j];
    mu /= static_cast<T>(D);
    T var{0};
    for (std::size_t j = 0; j < D; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(D);
    const T is = T{1} / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < D; ++j) {
      const T h = (xr[j] - mu) * is;
      (*xhat)[r * D + j] = h;
      out[r * D + j] = h * gv[j] + bv[j];
    }
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.graph().record("layer_norm", std::move(out), {x, gamma, beta},
                          [ix, ig, ib, xhat, inv_std, rows, D](Graph<T>& gr, const Tensor<T>& dy) {
                            const Tensor<T>& gv = gr.value(ig);
                            const bool gx = gr.requires_grad(ix);
                            T* dx = gx ? gr.grad(ix).ptr() : nullptr;
                            T* dg = gr.requires_grad(ig) ? gr.grad(ig).ptr() : nullptr;
                            T* db = gr.requires_grad(ib) ? gr.grad(ib).ptr() : nullptr;
                            std::vector<T> dh(D);
                            for (std::size_t r = 0; r < rows; ++r) {
                              const T* h = xhat->data() + r * D;
                              const T* d = dy.ptr() + r * D;
                              T m1{0}, m2{0};
                              for (std::size_t j = 0; j < D; ++j) {
                                if (dg) dg[j] += d[j] * h[j];
                                if (db) db[j] += d[j];
                                dh[j] = d[j] * gv[j];
                                m1 += dh[j];
                                m2 += dh[j] * h[j];
                              }
                              if (!dx) continue;
                              m1 /= static_cast<T>(D);
                              m2 /= static_cast<T>(D);
                              const T is = (*inv_std)[r];
                              for (std::size_t j = 0; j < D; ++j) dx[r * D + j] += is * (dh[j] - m1 - h[j] * m2);
                            }
                          });
}

/// Rows of the last dimension scaled to unit L2 norm; norms below `floor`
/// are replaced by `floor`.
template <std::floating_point T>
Var<T> l2_normalize_last(const Var<T>& x, T floor = T(1e-8)) {
  const Shape& xs = x.shape();
  if (xs.empty()) throw ShapeError("l2_normalize_last on rank-0 tensor");
  const std::size_t D = xs.back();
  const std::size_t rows = x.value().size() / D;
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xs);
  auto norms = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T ss{0};
    for (std::size_t j = 0; j < D; ++j) ss += xv[r * D + j] * xv[r * D + j];
    const T n = std::max(std::sqrt(ss), floor);
    (*norms)[r] = n;
    for (std::size_t j = 0; j < D; ++j) out[r * D + j] = xv[r * D + j] / n;
  }
  const std::size_t ix = x.id();
  auto self = std::make_shared<std::size_t>(0);
  Var<T> y = x.graph().record("l2_normalize", std::move(out), {x},
                              [ix, self, norms, rows, D, floor](Graph<T>& gr, const Tensor<T>& dy) {
                                const Tensor<T>& yv = gr.value(*self);
                                T* dx = gr.grad(ix).ptr();
                                for (std::size_t r = 0; r < rows; ++r) {
                                  const T n = (*norms)[r];
                                  const bool clamped = !(n > floor);
                                  T dot{0};
                                  if (!clamped)
                                    for (std::size_t j = 0; j < D; ++j) dot += dy[r * D + j] * yv[r * D + j];
                                  for (std::size_t j = 0; j < D; ++j)
                                    dx[r * D + j] += (dy[r * D + j] - yv[r * D + j] * dot) / n;
                                }
                              });
  *self = y.id();
  return y;
}

// ---------------------------------------------------------------------------
// Image-layout operators ([C, H, W])

template <std::floating_point T>
Var<T> global_avg_pool(const Var<T>& x) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw ShapeError(detail::concat("global_avg_pool expects [C,H,W], got ", shape_str(s)));
  return mean_axis(reshape(x, Shape{s[0], s[1] * s[2]}), 1);
}

template <std::floating_point T>
Var<T> global_max_pool(const Var<T>& x) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw ShapeError(detail::concat("global_max_pool expects [C,H,W], got ", shape_str(s)));
  return max_axis(reshape(x, Shape{s[0], s[1] * s[2]}), 1);
}

/// Per-pixel channel mixing: x [C_in,H,W], w [C_out,C_in], bias [C_out].
template <std::floating_point T>
Var<T> conv1x1(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 3 || ws.size() != 2 || ws[1] != xs[0] || bias.shape() != Shape{ws[0]}) {
    throw ShapeError(detail::concat("conv1x1: input ", shape_str(xs), ", weight ", shape_str(ws), ", bias ",
                                    shape_str(bias.shape()), " are inconsistent"));
  }
  const std::size_t Cin = xs[0], Cout = ws[0], P = xs[1] * xs[2];
  Tensor<T> out(Shape{Cout, xs[1], xs[2]});
  const T* bv = bias.value().ptr();
  for (std::size_t o = 0; o < Cout; ++o) std::fill(out.ptr() + o * P, out.ptr() + (o + 1) * P, bv[o]);
  kernels::gemm_accumulate(false, false, Cout, P, Cin, w.value().ptr(), x.value().ptr(), out.ptr());
  const std::size_t ix = x.id(), iw = w.id(), ib = bias.id();
  return x.graph().record("conv1x1", std::move(out), {x, w, bias},
                          [ix, iw, ib, Cin, Cout, P](Graph<T>& gr, const Tensor<T>& dy) {
                            if (gr.requires_grad(ix))
                              kernels::gemm_accumulate(true, false, Cin, P, Cout, gr.value(iw).ptr(), dy.ptr(),
                                                       gr.grad(ix).ptr());
                            if (gr.requires_grad(iw))
                              kernels::gemm_accumulate(false, true, Cout, Cin, P, dy.ptr(), gr.value(ix).ptr(),
                                                       gr.grad(iw).ptr());
                            if (gr.requires_grad(ib)) {
                              T* db = gr.grad(ib).ptr();
                              for (std::size_t o = 0; o < Cout; ++o)
                                for (std::size_t p = 0; p < P; ++p) db[o] += dy[o * P + p];
                            }
                          });
}

namespace detail {

template <class T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t k, T* cols) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t P = H * W;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = cols + ((c * k + ky) * k + kx) * P;
        for (std::size_t y = 0; y < H; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - pad;
          for (std::size_t xx = 0; xx < W; ++xx) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - pad;
            row[y * W + xx] = (sy < 0 || sx < 0 || sy >= static_cast<std::ptrdiff_t>(H) ||
                               sx >= static_cast<std::ptrdiff_t>(W))
                                  ? T{0}
                                  : x[(c * H + static_cast<std::size_t>(sy)) * W + static_cast<std::size_t>(sx)];
          }
        }
      }
}

template <class T>
void col2im_add(const T* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t k, T* dx) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t P = H * W;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = cols + ((c * k + ky) * k + kx) * P;
        for (std::size_t y = 0; y < H; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - pad;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t xx = 0; xx < W; ++xx) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - pad;
            if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(W)) continue;
            dx[(c * H + static_cast<std::size_t>(sy)) * W + static_cast<std::size_t>(sx)] += row[y * W + xx];
          }
        }
      }
}

}  // namespace detail

/// Stride-1 "same" convolution with an odd square kernel: x [C_in,H,W],
/// w [C_out,C_in,k,k], bias [C_out].
template <std::floating_point T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 3 || ws.size() != 4 || ws[1] != xs[0] || ws[2] != ws[3] || ws[2] % 2 == 0 ||
      bias.shape() != Shape{ws[0]}) {
    throw ShapeError(detail::concat("conv2d: input ", shape_str(xs), ", weight ", shape_str(ws), ", bias ",
                                    shape_str(bias.shape()), " are inconsistent"));
  }
  const std::size_t Cin = xs[0], H = xs[1], W = xs[2], Cout = ws[0], k = ws[2], P = H * W, KK = Cin * k * k;
  auto cols = std::make_shared<std::vector<T>>(KK * P);
  detail::im2col(x.value().ptr(), Cin, H, W, k, cols->data());
  Tensor<T> out(Shape{Cout, H, W});
  const T* bv = bias.value().ptr();
  for (std::size_t o = 0; o < Cout; ++o) std::fill(out.ptr() + o * P, out.ptr() + (o + 1) * P, bv[o]);
  kernels::gemm_accumulate(false, false, Cout, P, KK, w.value().ptr(), cols->data(), out.ptr());
  const std::size_t ix = x.id(), iw = w.id(), ib = bias.id();
  return x.graph().record("conv2d", std::move(out), {x, w, bias},
                          [ix, iw, ib, cols, Cin, H, W, Cout, k, P, KK](Graph<T>& gr, const Tensor<T>& dy) {
                            if (gr.requires_grad(iw))
                              kernels::gemm_accumulate(false, true, Cout, KK, P, dy.ptr(), cols->data(),
                                                       gr.grad(iw).ptr());
                            if (gr.requires_grad(ix)) {
                              std::vector<T> dcols(KK * P, T{0});
                              kernels::gemm_accumulate(true, false, KK, P, Cout, gr.value(iw).ptr(), dy.ptr(),
                                                       dcols.data());
                              detail::col2im_add(dcols.data(), Cin, H, W, k, gr.grad(ix).ptr());
                            }
                            if (gr.requires_grad(ib)) {
                              T* db = gr.grad(ib).ptr();
                              for (std::size_t o = 0; o < Cout; ++o)
                                for (std::size_t p = 0; p < P; ++p) db[o] += dy[o * P + p];
                            }
                          });
}

}  // namespace gruaunet
