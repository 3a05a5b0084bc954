#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <deque>
#include <vector>

#include "dyrate/numerics/tensor.hpp"

namespace dyrate {

class GradTape;

// Handle to a value recorded on a GradTape. Cheap to copy.
struct Var {
  GradTape* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  bool valid() const noexcept { return tape != nullptr; }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so replaying
// them backwards is a valid topological order. A node is only given a
// backward closure when at least one of its inputs requires a gradient;
// graphs built purely from constants cost one tensor per op and nothing else.
//
// A tape belongs to a single session and is not thread safe.
class GradTape {
 public:
  // Accumulates d(loss)/d(inputs) given d(loss)/d(output).
  using Backward = std::function<void(GradTape&, const Tensor& out_grad)>;

  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  // Zeros for nodes the backward pass never reached.
  Tensor grad(Var v) const;

  // Seeds d(root)/d(root) = 1; root must hold a single value.
  void backward(Var root);
  void backward(Var root, const Tensor& seed);
  void zero_grad();

  std::size_t size() const noexcept { return nodes_.size(); }
  // Drops every node recorded after the first `size` ones. Vars pointing
  // past the new end become invalid.
  void truncate(std::size_t size);

  Var record(Tensor value, std::initializer_list<Var> inputs,
             Backward backward);
  Var record(Tensor value, const std::vector<Var>& inputs, Backward backward);
  // Grad storage of v, zero-initialised on first use. Only valid for nodes
  // that require a gradient.
  Tensor& grad_buffer(Var v);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var leaf_with(Tensor value, bool requires_grad, Backward backward);

  // A deque keeps references to recorded values stable while ops append.
  std::deque<Node> nodes_;
};

}  // namespace dyrate
