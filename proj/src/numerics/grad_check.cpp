#include "dyrate/numerics/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dyrate/error.hpp"

namespace dyrate {
namespace {

double evaluate(const ScalarFn& f, const Tensor& x) {
  GradTape tape;
  const Var out = f(tape, tape.constant(x));
  if (out.value().size() != 1) throw ConfigError("grad_check: f must be scalar");
  const double v = out.value()[0];
  if (!std::isfinite(v)) throw NumericError("grad_check: f is not finite");
  return v;
}

}  // namespace

double grad_check(const ScalarFn& f, const Tensor& x, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) {
    throw ConfigError("grad_check: eps " + std::to_string(eps) +
                      " outside [1e-7, 1e-3]");
  }
  GradTape tape;
  const Var leaf = tape.leaf(x);
  const Var out = f(tape, leaf);
  if (out.value().size() != 1) throw ConfigError("grad_check: f must be scalar");
  if (!std::isfinite(out.value()[0])) {
    throw NumericError("grad_check: f is not finite");
  }
  tape.backward(out);
  const Tensor analytic = tape.grad(leaf);

  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    const double up = evaluate(f, probe);
    probe[i] = x[i] - eps;
    const double down = evaluate(f, probe);
    probe[i] = x[i];
    const double central = (up - down) / (2.0 * eps);
    worst = std::max(worst, std::abs(analytic[i] - central) /
                                (std::abs(central) + 1e-12));
  }
  return worst;
}

}  // namespace dyrate
