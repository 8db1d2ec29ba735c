// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "gruaunet/core/error.hpp"

namespace gruaunet {

/// Dimension sizes, outermost first. Images are [channels, height, width],
/// token grids are [height, width, channels], sequences are [tokens, dim].
using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

/// Row-major strides for a shape.
inline std::vector<std::size_t> shape_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

namespace detail {
inline std::atomic<bool>& finite_checks_flag() {
#ifdef NDEBUG
  static std::atomic<bool> flag{false};
#else
  static std::atomic<bool> flag{true};
#endif
  return flag;
}
}  // namespace detail

/// NaN/Inf scanning at operation boundaries. On by default in debug builds.
inline bool finite_checks_enabled() { return detail::finite_checks_flag().load(std::memory_order_relaxed); }
inline void set_finite_checks(bool on) { detail::finite_checks_flag().store(on, std::memory_order_relaxed); }

/// Dense row-major array. Dimensions are positive; a rank-0 tensor holds one value.
template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    validate_dims();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_dims();
    if (data_.size() != shape_numel(shape_)) {
      throw ShapeError(detail::concat("tensor data length ", data_.size(), " does not match shape ",
                                      shape_str(shape_)));
    }
  }

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  static Tensor from(Shape shape, std::initializer_list<T> values) {
    return Tensor(std::move(shape), std::vector<T>(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
      throw ShapeError(detail::concat("axis ", axis, " out of range for shape ", shape_str(shape_)));
    }
    return shape_[axis];
  }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }
  const T& at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }

  T item() const {
    if (data_.size() != 1) {
      throw ShapeError(detail::concat("item() on non-scalar tensor ", shape_str(shape_)));
    }
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
      throw ShapeError(detail::concat("cannot reshape ", shape_str(shape_), " to ", shape_str(shape)));
    }
    return Tensor(std::move(shape), data_);
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <std::floating_point U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_dims() const {
    for (auto d : shape_) {
      if (d == 0) throw ShapeError(detail::concat("zero-sized dimension in shape ", shape_str(shape_)));
    }
  }

  std::size_t offset(std::initializer_list<std::size_t> index) const {
    if (index.size() != shape_.size()) {
      throw ShapeError(detail::concat("index rank ", index.size(), " does not match shape ",
                                      shape_str(shape_)));
    }
    std::size_t off = 0;
    std::size_t axis = 0;
    for (auto i : index) {
      if (i >= shape_[axis]) {
        throw ShapeError(detail::concat("index ", i, " out of range on axis ", axis, " of ",
                                        shape_str(shape_)));
      }
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
};

template <std::floating_point T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(detail::concat("max_abs_diff shape mismatch ", shape_str(a.shape()), " vs ",
                                    shape_str(b.shape())));
  }
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace gruaunet
