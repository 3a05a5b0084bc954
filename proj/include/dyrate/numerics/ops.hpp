#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dyrate/numerics/tape.hpp"

// Differentiable operations on GradTape values. Matrix ops follow the
// Tensor rank-2 convention ([rows, cols] over the flattened leading dims).
namespace dyrate::ops {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
// x: [rows, m], bias: [m]
Var add_bias(Var x, Var bias);
// a: [n, k], b: [k, m] -> [n, m]
Var matmul(Var a, Var b);

Var gelu(Var x);
Var log(Var x);
Var exp(Var x);

// Row-wise layer norm over the last axis.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
// Rows of table selected by ids.
Var embedding(Var table, std::span<const int> ids);

// Softmax along `axis`. -inf entries map to exactly 0; a slice holding only
// -inf throws NumericError("fully masked softmax slice").
Var softmax(Var x, std::size_t axis);

Var sum(Var x);
Var mean(Var x);
Var dot(Var a, Var b);
// Mean over rows of -log softmax(logits)[row, target]. Rows whose target is
// negative are skipped.
Var cross_entropy(Var logits, std::span<const int> targets);

Var slice_rows(Var x, std::size_t begin, std::size_t end);
Var concat_rows(const std::vector<Var>& parts);
Var reshape(Var x, std::vector<std::size_t> shape);

// Forward value is `hard` exactly; the gradient is passed to `soft` unchanged.
Var straight_through(const Tensor& hard, Var soft);

struct AttentionResult {
  Var out;
  // [batch, heads, n_q, n_k] post-softmax weights.
  Tensor weights;
};

// Multi-head scaled dot-product attention for `batch` independent examples
// stacked along rows: q is [batch*n_q, d], k and v are [batch*n_k, d].
// mask is [n_q, n_k] (shared) or [batch*n_q, n_k] with entries in [0, 1].
// A zero entry removes the key from the softmax (equivalent to a -inf logit);
// fractional entries weight exp(logit), which keeps the op differentiable
// in the mask. Masked keys are skipped in every sum, so deleting them from
// k/v yields the same floating-point result.
AttentionResult attention(Var q, Var k, Var v, Var mask, std::size_t heads,
                          std::size_t batch);

}  // namespace dyrate::ops
