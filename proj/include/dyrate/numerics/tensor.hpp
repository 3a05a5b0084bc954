#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace dyrate {

// Dense row-major f64 tensor. Rank-2 helpers treat any tensor as
// [product(shape[:-1]), shape[-1]].
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values);
  static Tensor zeros_like(const Tensor& other);

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t rows() const noexcept;
  std::size_t cols() const noexcept;

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const {
    return data_[r * cols() + c];
  }

  std::span<double> row(std::size_t r);
  std::span<const double> row(std::size_t r) const;

  // Element count must be preserved.
  Tensor reshaped(std::vector<std::size_t> shape) const;
  bool same_shape(const Tensor& other) const noexcept {
    return shape_ == other.shape_;
  }

  bool operator==(const Tensor& other) const = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::size_t shape_product(const std::vector<std::size_t>& shape) noexcept;

}  // namespace dyrate
