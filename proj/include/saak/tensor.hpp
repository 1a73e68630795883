#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "saak/error.hpp"

namespace saak {

/// Dense row-major float tensor of arbitrary rank.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, float fill = 0.0f)
      : shape_(std::move(shape)), values_(element_count(shape_), fill) {}

  Tensor(std::vector<std::size_t> shape, std::vector<float> values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != element_count(shape_)) {
      throw ConsistencyError("tensor payload has " + std::to_string(values_.size()) +
                             " values, shape requires " +
                             std::to_string(element_count(shape_)));
    }
  }

  static std::size_t element_count(std::span<const std::size_t> shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>());
  }

  std::size_t rank() const noexcept { return shape_.size(); }
  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  std::span<float> values() noexcept { return values_; }
  std::span<const float> values() const noexcept { return values_; }
  float* data() noexcept { return values_.data(); }
  const float* data() const noexcept { return values_.data(); }

  float& operator[](std::size_t i) noexcept { return values_[i]; }
  float operator[](std::size_t i) const noexcept { return values_[i]; }

  // rank-2 and rank-4 accessors; no bounds checks
  float& at(std::size_t i, std::size_t j) noexcept { return values_[i * shape_[1] + j]; }
  const float& at(std::size_t i, std::size_t j) const noexcept { return values_[i * shape_[1] + j]; }
  float& at(std::size_t n, std::size_t i, std::size_t j, std::size_t k) noexcept {
    return values_[offset(n, i, j, k)];
  }
  const float& at(std::size_t n, std::size_t i, std::size_t j, std::size_t k) const noexcept {
    return values_[offset(n, i, j, k)];
  }

  std::size_t offset(std::size_t n, std::size_t i, std::size_t j, std::size_t k) const noexcept {
    return ((n * shape_[1] + i) * shape_[2] + j) * shape_[3] + k;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<float> values_;
};

inline std::string shape_string(std::span<const std::size_t> shape) {
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s;
}

inline void require_rank(const Tensor& t, std::size_t rank, std::string_view what) {
  if (t.rank() != rank) {
    throw DomainError(std::string(what) + ": expected rank-" + std::to_string(rank) +
                      " tensor, got shape " + shape_string(t.shape()));
  }
}

/// Rank-4 stage output, N x D1 x D2 x K; channel 0 is the DC response.
struct FeatureTensor {
  Tensor values;
  int stage = 0;

  std::size_t count() const { return values.dim(0); }
  std::size_t height() const { return values.dim(1); }
  std::size_t width() const { return values.dim(2); }
  std::size_t channels() const { return values.dim(3); }

  /// Contiguous H*W*K block of image `n`.
  std::span<const float> image(std::size_t n) const {
    const std::size_t stride = height() * width() * channels();
    return values.values().subspan(n * stride, stride);
  }
};

}  // namespace saak
