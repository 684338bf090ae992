#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "udc/error.hpp"

namespace udc {

/// Dense row-major array. Shape is fixed at construction; data length always
/// equals the product of the dimensions.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(std::vector<std::size_t> shape, T fill = T(0))
      : shape_(std::move(shape)), data_(element_count(shape_), fill) {}
  BasicTensor(std::vector<std::size_t> shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != element_count(shape_)) throw ShapeError("tensor data length does not match shape");
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * row_stride(), row_stride()}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * row_stride(), row_stride()}; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  bool same_shape(const BasicTensor& o) const { return shape_ == o.shape_; }

  bool operator==(const BasicTensor&) const = default;

  static std::size_t element_count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

 private:
  std::size_t row_stride() const { return shape_.empty() ? 0 : data_.size() / shape_[0]; }

  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

std::string shape_string(const std::vector<std::size_t>& shape);

/// A trainable tensor with its gradient and Adam moments.
template <typename T>
struct Parameter {
  std::string name;
  BasicTensor<T> value;
  BasicTensor<T> grad;
  BasicTensor<T> m1;
  BasicTensor<T> m2;
  long step_count = 0;

  Parameter() = default;
  Parameter(std::string n, BasicTensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), m1(value.shape()), m2(value.shape()) {}

  void zero_grad() { grad.fill(T(0)); }
};

/// Per-instance representations (rows of `features`) with their class labels.
/// `dim` is the feature width used to normalize squared distances.
template <typename T>
struct BasicFeatureBatch {
  BasicTensor<T> features;  // [batch x dim]
  std::vector<int> labels;
  std::size_t dim = 0;

  std::size_t size() const { return features.empty() ? 0 : features.dim(0); }
};

using FeatureBatch = BasicFeatureBatch<float>;

}  // namespace udc
