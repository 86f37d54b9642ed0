// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace maskgen {

/// Raised when tensor extents do not line up for an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an operation produces NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kMaxRank = 4;

/// Extents of a dense row-major array, rank 1..4, every extent positive.
class Shape {
 public:
  Shape() = default;

  Shape(std::initializer_list<std::size_t> dims) { assign(dims.begin(), dims.end()); }

  explicit Shape(std::span<const std::size_t> dims) { assign(dims.begin(), dims.end()); }

  std::size_t rank() const { return rank_; }
  std::size_t operator[](std::size_t i) const { return dims_[i]; }
  std::size_t back() const { return dims_[rank_ - 1]; }

  std::size_t numel() const {
    std::size_t n = rank_ == 0 ? 0 : 1;
    for (std::size_t i = 0; i < rank_; ++i) n *= dims_[i];
    return n;
  }

  std::span<const std::size_t> dims() const { return {dims_.data(), rank_}; }

  /// Shape with the last extent removed; rank-1 shapes collapse to {1}.
  Shape drop_last() const {
    if (rank_ <= 1) return Shape{1};
    return Shape(std::span<const std::size_t>(dims_.data(), rank_ - 1));
  }

  /// Shape with `d` appended as the new last extent.
  Shape append(std::size_t d) const {
    if (rank_ >= kMaxRank) throw DimensionError("shape rank would exceed 4");
    Shape s = *this;
    s.dims_[s.rank_++] = d;
    if (d == 0) throw DimensionError("zero extent");
    return s;
  }

  /// Right-aligned padding to rank 4 with leading ones.
  std::array<std::size_t, kMaxRank> padded() const {
    std::array<std::size_t, kMaxRank> out{1, 1, 1, 1};
    for (std::size_t i = 0; i < rank_; ++i) out[kMaxRank - rank_ + i] = dims_[i];
    return out;
  }

  std::string to_string() const {
    std::string s = "(";
    for (std::size_t i = 0; i < rank_; ++i) {
      if (i) s += ", ";
      s += std::to_string(dims_[i]);
    }
    return s + ")";
  }

  friend bool operator==(const Shape& a, const Shape& b) {
    if (a.rank_ != b.rank_) return false;
    return std::equal(a.dims_.begin(), a.dims_.begin() + a.rank_, b.dims_.begin());
  }

 private:
  template <class It>
  void assign(It first, It last) {
    const auto n = static_cast<std::size_t>(std::distance(first, last));
    if (n == 0 || n > kMaxRank) {
      throw DimensionError("tensor rank must be between 1 and 4, got " + std::to_string(n));
    }
    rank_ = n;
    std::size_t i = 0;
    for (; first != last; ++first) {
      if (*first == 0) throw DimensionError("tensor extents must be positive");
      dims_[i++] = *first;
    }
  }

  std::array<std::size_t, kMaxRank> dims_{};
  std::size_t rank_ = 0;
};

/// Dense row-major real array. `T` is float or double.
template <class T>
class Tensor {
  static_assert(std::is_floating_point_v<T>, "Tensor holds real values");

 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape), data_(shape.numel(), fill) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw DimensionError("data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_.to_string());
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.rank(); }
  std::size_t dim(std::size_t i) const { return shape_[i]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  template <class... Idx>
  T& at(Idx... idx) {
    return data_[offset(idx...)];
  }
  template <class... Idx>
  const T& at(Idx... idx) const {
    return data_[offset(idx...)];
  }

  Tensor reshaped(Shape s) const& {
    if (s.numel() != size()) throw DimensionError("reshape " + shape_.to_string() + " -> " + s.to_string());
    return Tensor(s, data_);
  }
  Tensor reshaped(Shape s) && {
    if (s.numel() != size()) throw DimensionError("reshape " + shape_.to_string() + " -> " + s.to_string());
    return Tensor(s, std::move(data_));
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  template <class... Idx>
  std::size_t offset(Idx... idx) const {
    const std::array<std::size_t, sizeof...(Idx)> ix{static_cast<std::size_t>(idx)...};
    if (ix.size() != shape_.rank()) throw DimensionError("index rank mismatch");
    std::size_t off = 0;
    for (std::size_t i = 0; i < ix.size(); ++i) {
      if (ix[i] >= shape_[i]) throw std::out_of_range("tensor index out of range");
      off = off * shape_[i] + ix[i];
    }
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
};

}  // namespace maskgen
