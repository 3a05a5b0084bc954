#include "dyrate/numerics/tensor.hpp"

#include <string>
#include <utility>

#include "dyrate/error.hpp"

namespace dyrate {

std::size_t shape_product(const std::vector<std::size_t>& shape) noexcept {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(shape_product(shape_), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_product(shape_) != data_.size()) {
    throw ConfigError("tensor shape/data mismatch: shape holds " +
                      std::to_string(shape_product(shape_)) + " values, got " +
                      std::to_string(data_.size()));
  }
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

Tensor Tensor::zeros_like(const Tensor& other) {
  return Tensor(other.shape_, 0.0);
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ConfigError("axis " + std::to_string(axis) + " out of range for rank " +
                      std::to_string(shape_.size()));
  }
  return shape_[axis];
}

std::size_t Tensor::cols() const noexcept {
  return shape_.empty() ? 1 : shape_.back();
}

std::size_t Tensor::rows() const noexcept {
  const std::size_t c = cols();
  return c == 0 ? 0 : data_.size() / c;
}

std::span<double> Tensor::row(std::size_t r) {
  return std::span<double>(data_).subspan(r * cols(), cols());
}

std::span<const double> Tensor::row(std::size_t r) const {
  return std::span<const double>(data_).subspan(r * cols(), cols());
}

Tensor Tensor::reshaped(std::vector<std::size_t> shape) const {
  return Tensor(std::move(shape), data_);
}

}  // namespace dyrate
