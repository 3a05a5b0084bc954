#pragma once

#include <functional>

#include "dyrate/numerics/tape.hpp"

namespace dyrate {

// Builds a scalar on `tape` from the leaf `x`.
using ScalarFn = std::function<Var(GradTape& tape, Var x)>;

// Max over coordinates of |analytic - central| / (|central| + 1e-12), with
// central differences of step eps in [1e-7, 1e-3]. Throws NumericError when
// f is not finite at x or at a probe point.
double grad_check(const ScalarFn& f, const Tensor& x, double eps = 1e-5);

}  // namespace dyrate
