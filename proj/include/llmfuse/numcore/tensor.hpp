/**
 * Copyright      2026  The llmfuse Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "llmfuse/errors.hpp"

namespace llmfuse {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major array with an optional gradient slot of the same shape.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : shape_{1}, data_(1, T{0}) {}

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (shape_size(shape_) != data_.size()) {
      throw ArgumentError("tensor data length " + std::to_string(data_.size()) +
                          " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }

  // Rank-2 helpers.
  std::size_t rows() const { return shape_.size() == 1 ? 1 : shape_[0]; }
  std::size_t cols() const { return shape_.back(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }

  std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * cols(), cols()); }
  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(data_).subspan(r * cols(), cols());
  }

  bool has_grad() const { return grad_.has_value(); }
  std::span<T> grad() {
    ensure_grad();
    return *grad_;
  }
  std::span<const T> grad() const {
    if (!grad_) throw ContractError("tensor has no gradient");
    return *grad_;
  }
  void ensure_grad() {
    if (!grad_) grad_.emplace(data_.size(), T{0});
  }
  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), T{0});
  }
  void drop_grad() { grad_.reset(); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  // Values and shape only; gradients are not compared.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_shape() const {
    if (shape_.empty()) throw ArgumentError("tensor shape must have rank >= 1");
    for (auto d : shape_) {
      if (d == 0) throw ArgumentError("tensor dimensions must be positive: " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
  std::optional<std::vector<T>> grad_;
};

// Numerically stable softmax along `axis` (max subtraction).
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ArgumentError("softmax axis " + std::to_string(axis) + " invalid for shape " +
                        shape_string(x.shape()));
  }
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Tensor<T> out(s);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = x[base];
      for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[base + i * inner]);
      T sum = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T e = std::exp(x[base + i * inner] - mx);
        out[base + i * inner] = e;
        sum += e;
      }
      for (std::size_t i = 0; i < n; ++i) out[base + i * inner] /= sum;
    }
  }
  return out;
}

// Log-softmax of a 1-D vector.
template <class T>
std::vector<T> log_softmax(std::span<const T> x) {
  T mx = *std::max_element(x.begin(), x.end());
  T sum = 0;
  for (T v : x) sum += std::exp(v - mx);
  const T lse = mx + std::log(sum);
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - lse;
  return out;
}

}  // namespace llmfuse
