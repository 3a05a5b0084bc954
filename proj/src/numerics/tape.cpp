#include "dyrate/numerics/tape.hpp"

#include <string>
#include <utility>

#include "dyrate/error.hpp"

namespace dyrate {

const Tensor& Var::value() const { return tape->value(*this); }

Var GradTape::leaf(Tensor value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tensor& GradTape::value(Var v) const { return nodes_.at(v.id).value; }

bool GradTape::requires_grad(Var v) const {
  return nodes_.at(v.id).requires_grad;
}

Tensor GradTape::grad(Var v) const {
  const Node& node = nodes_.at(v.id);
  if (node.grad.empty()) return Tensor::zeros_like(node.value);
  return node.grad;
}

Tensor& GradTape::grad_buffer(Var v) {
  Node& node = nodes_[v.id];
  if (node.grad.empty() && !node.value.empty()) {
    node.grad = Tensor::zeros_like(node.value);
  }
  return node.grad;
}

Var GradTape::record(Tensor value, std::initializer_list<Var> inputs,
                     Backward backward) {
  bool any = false;
  for (const Var& in : inputs) any = any || nodes_.at(in.id).requires_grad;
  return leaf_with(std::move(value), any, std::move(backward));
}

Var GradTape::record(Tensor value, const std::vector<Var>& inputs,
                     Backward backward) {
  bool any = false;
  for (const Var& in : inputs) any = any || nodes_.at(in.id).requires_grad;
  return leaf_with(std::move(value), any, std::move(backward));
}

Var GradTape::leaf_with(Tensor value, bool requires_grad, Backward backward) {
  Var out = leaf(std::move(value), requires_grad);
  if (requires_grad) nodes_.back().backward = std::move(backward);
  return out;
}

void GradTape::backward(Var root) {
  if (value(root).size() != 1) {
    throw ConfigError("backward() without a seed needs a scalar root, got " +
                      std::to_string(value(root).size()) + " values");
  }
  backward(root, Tensor::scalar(1.0).reshaped(value(root).shape()));
}

void GradTape::backward(Var root, const Tensor& seed) {
  if (!seed.same_shape(value(root))) {
    throw ConfigError("backward seed shape does not match root");
  }
  if (!nodes_.at(root.id).requires_grad) return;
  Tensor& g = grad_buffer(root);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.backward || node.grad.empty()) continue;
    node.backward(*this, node.grad);
  }
}

void GradTape::truncate(std::size_t size) {
  if (size < nodes_.size()) nodes_.resize(size);
}

void GradTape::zero_grad() {
  for (Node& node : nodes_) node.grad = Tensor();
}

}  // namespace dyrate
