#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lmdir/error.hpp"

namespace lmdir {

using Shape = std::vector<std::int64_t>;

std::string shape_string(const Shape& shape);
std::int64_t shape_numel(const Shape& shape);

// Dense row-major tensor. Feature maps use (B, H, W, C) with channels last so a
// pointwise projection is a single GEMM over the flattened spatial positions.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_)) {
      throw Error(ErrorCode::ShapeMismatch, "buffer of " + std::to_string(data_.size()) +
                                                " values does not fit shape " + shape_string(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int axis) const { return shape_.at(axis < 0 ? shape_.size() + axis : axis); }
  std::int64_t size() const noexcept { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::int64_t i) noexcept { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const noexcept { return data_[static_cast<std::size_t>(i)]; }

  T& at(std::initializer_list<std::int64_t> index) { return data_[offset(index)]; }
  const T& at(std::initializer_list<std::int64_t> index) const { return data_[offset(index)]; }

  Tensor reshaped(Shape shape) const& {
    Tensor out(std::move(shape), data_);
    return out;
  }
  Tensor reshaped(Shape shape) && { return Tensor(std::move(shape), std::move(data_)); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const {
    for (const T& v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset(std::initializer_list<std::int64_t> index) const {
    if (index.size() != shape_.size()) {
      throw Error(ErrorCode::ShapeMismatch, "index rank does not match " + shape_string(shape_));
    }
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::int64_t i : index) {
      off = off * static_cast<std::size_t>(shape_[axis]) + static_cast<std::size_t>(i);
      ++axis;
    }
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
};

inline void require_shape(const Shape& actual, const Shape& expected, const char* what) {
  if (actual != expected) {
    throw Error(ErrorCode::ShapeMismatch, std::string(what) + ": expected " + shape_string(expected) +
                                              ", got " + shape_string(actual));
  }
}

inline void require_rank(const Shape& actual, std::size_t rank, const char* what) {
  if (actual.size() != rank) {
    throw Error(ErrorCode::ShapeMismatch, std::string(what) + ": expected rank " + std::to_string(rank) +
                                              ", got " + shape_string(actual));
  }
}

}  // namespace lmdir
