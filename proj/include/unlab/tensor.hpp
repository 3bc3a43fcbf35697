// Copyright 2026 The unlab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "unlab/error.hpp"

namespace unlab {

template <typename Real>
using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using RowVector = Eigen::Matrix<Real, 1, Eigen::Dynamic>;

// Dense row-major tensor. The data length always equals the shape product.
template <typename Real>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(product(shape_), Real(0)) {}
  Tensor(std::vector<std::size_t> shape, std::vector<Real> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != product(shape_)) {
      throw InvalidInput("tensor data length does not match shape");
    }
  }

  static Tensor vector(std::vector<Real> data) {
    const std::size_t n = data.size();
    return Tensor({n}, std::move(data));
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }

  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }
  std::span<Real> values() { return data_; }
  std::span<const Real> values() const { return data_; }
  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }
  Real& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  Real at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  // Eigen views; vectors are viewed as a single row.
  Eigen::Map<RowMatrix<Real>> matrix() {
    return {data_.data(), static_cast<Eigen::Index>(rows()),
            static_cast<Eigen::Index>(cols())};
  }
  Eigen::Map<const RowMatrix<Real>> matrix() const {
    return {data_.data(), static_cast<Eigen::Index>(rows()),
            static_cast<Eigen::Index>(cols())};
  }
  Eigen::Map<RowVector<Real>> row_vector() {
    return {data_.data(), static_cast<Eigen::Index>(size())};
  }
  Eigen::Map<const RowVector<Real>> row_vector() const {
    return {data_.data(), static_cast<Eigen::Index>(size())};
  }

  template <typename To>
  Tensor<To> cast() const {
    return Tensor<To>(shape_, std::vector<To>(data_.begin(), data_.end()));
  }

  void fill(Real value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](Real x) { return std::isfinite(x); });
  }
  void require_finite(const char* what) const {
    if (!all_finite()) throw InvalidInput(std::string(what) + ": non-finite value");
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool operator==(const Tensor& other) const = default;

  static std::size_t product(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>());
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<Real> data_;
};

// Gradients keyed by parameter name; each entry mirrors its parameter's shape.
template <typename Real>
using GradientSet = std::map<std::string, Tensor<Real>>;

namespace detail {

template <typename Real>
void require_finite_span(std::span<const Real> xs, const char* what) {
  for (Real x : xs) {
    if (!std::isfinite(x)) throw InvalidInput(std::string(what) + ": non-finite input");
  }
}

}  // namespace detail

// Max-subtracted softmax over a 1-D span.
template <typename Real>
std::vector<Real> softmax(std::span<const Real> logits) {
  if (logits.empty()) throw InvalidInput("softmax: empty input");
  detail::require_finite_span(logits, "softmax");
  const Real top = *std::max_element(logits.begin(), logits.end());
  std::vector<Real> out(logits.size());
  Real total = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - top);
    total += out[i];
  }
  for (Real& p : out) p /= total;
  return out;
}

template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& logits) {
  if (logits.rank() != 1) throw InvalidInput("softmax: expected a 1-D tensor");
  return Tensor<Real>::vector(softmax<Real>(logits.values()));
}

template <typename Real>
std::vector<Real> log_softmax(std::span<const Real> logits) {
  if (logits.empty()) throw InvalidInput("log_softmax: empty input");
  detail::require_finite_span(logits, "log_softmax");
  const Real top = *std::max_element(logits.begin(), logits.end());
  Real total = 0;
  for (Real z : logits) total += std::exp(z - top);
  const Real log_norm = top + std::log(total);
  std::vector<Real> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - log_norm;
  return out;
}

// Shannon entropy in nats with 0 ln 0 = 0.
template <typename Real>
Real entropy(std::span<const Real> probs, Real tolerance = Real(1e-9)) {
  if (probs.empty()) throw InvalidInput("entropy: empty input");
  Real total = 0;
  for (Real p : probs) {
    if (!std::isfinite(p) || p < 0) throw InvalidInput("entropy: negative or non-finite entry");
    total += p;
  }
  if (std::abs(total - Real(1)) > tolerance) {
    throw InvalidInput("entropy: probabilities do not sum to one");
  }
  Real h = 0;
  for (Real p : probs) {
    if (p > 0) h -= p * std::log(p);
  }
  return h;
}

template <typename Real>
Real entropy(const Tensor<Real>& probs) {
  return entropy<Real>(probs.values());
}

template <typename Real>
std::size_t argmax(std::span<const Real> xs) {
  if (xs.empty()) throw InvalidInput("argmax: empty input");
  // First maximal index wins.
  return static_cast<std::size_t>(std::max_element(xs.begin(), xs.end()) - xs.begin());
}

}  // namespace unlab
