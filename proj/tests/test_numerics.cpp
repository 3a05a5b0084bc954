#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "dyrate/error.hpp"
#include "dyrate/numerics/grad_check.hpp"
#include "dyrate/numerics/ops.hpp"
#include "dyrate/numerics/rng.hpp"

using namespace dyrate;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t seed,
                     double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  CounterRng rng(seed);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Reduces any tensor to a scalar with non-uniform weights so every output
// coordinate contributes a distinct gradient.
Var weighted_sum(GradTape& tape, Var y) {
  Tensor w = random_tensor(y.value().shape(), 991, 0.5, 1.5);
  return ops::dot(y, tape.constant(w));
}

}  // namespace

TEST_CASE("softmax small cases") {
  GradTape tape;
  Tensor half = ops::softmax(tape.constant(Tensor::vector({0, 0})), 0).value();
  CHECK(half[0] == doctest::Approx(0.5).epsilon(1e-15));
  Tensor masked =
      ops::softmax(tape.constant(Tensor::vector({0, kNegInf})), 0).value();
  CHECK(masked[0] == 1.0);
  CHECK(masked[1] == 0.0);

  Tensor y = ops::softmax(tape.constant(Tensor::vector({1, 2, 3})), 0).value();
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) CHECK(std::abs(y[i] - std::exp(i + 1.0) / z) < 1e-15);
  CHECK(std::abs(y[0] - 0.09003057) < 1e-8);
  CHECK(std::abs(y[1] - 0.24472847) < 1e-8);
  CHECK(std::abs(y[2] - 0.66524096) < 1e-8);
}

TEST_CASE("softmax rejects an all -inf slice") {
  GradTape tape;
  CHECK_THROWS_WITH_AS(
      ops::softmax(tape.constant(Tensor::vector({kNegInf, kNegInf})), 0),
      "fully masked softmax slice", NumericError);
}

TEST_CASE("softmax slices sum to one and ignore shifts") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    GradTape tape;
    Tensor x = random_tensor({3, 5, 4}, seed, -30.0, 30.0);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      Tensor y = ops::softmax(tape.constant(x), axis).value();
      Tensor shifted = ops::softmax(ops::add_scalar(tape.constant(x), 17.25), axis).value();
      const auto& s = x.shape();
      std::size_t inner = 1;
      for (std::size_t i = axis + 1; i < 3; ++i) inner *= s[i];
      const std::size_t outer = x.size() / (inner * s[axis]);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          double total = 0.0;
          for (std::size_t j = 0; j < s[axis]; ++j) {
            const std::size_t k = o * s[axis] * inner + j * inner + in;
            total += y[k];
            CHECK(std::abs(y[k] - shifted[k]) < 1e-12);
          }
          CHECK(std::abs(total - 1.0) < 1e-12);
        }
      }
    }
  }
}

TEST_CASE("grad_check reference functions") {
  auto square_sum = [](GradTape&, Var x) { return ops::sum(ops::mul(x, x)); };
  CHECK(grad_check(square_sum, Tensor::vector({1, 2}), 1e-5) < 1e-6);

  GradTape tape;
  Var leaf = tape.leaf(Tensor::vector({1, 2}));
  tape.backward(square_sum(tape, leaf));
  CHECK(tape.grad(leaf) == Tensor::vector({2, 4}));

  auto constant = [](GradTape& t, Var) { return t.constant(Tensor::scalar(3.0)); };
  CHECK(grad_check(constant, Tensor::vector({1, 2, 3}), 1e-5) == 0.0);

  std::vector<int> targets = {1, 0, 3};
  auto ce = [&](GradTape&, Var x) { return ops::cross_entropy(x, targets); };
  CHECK(grad_check(ce, random_tensor({3, 4}, 7), 1e-5) < 1e-5);
}

TEST_CASE("grad_check rejects bad inputs") {
  auto log_sum = [](GradTape&, Var x) { return ops::sum(ops::log(x)); };
  CHECK_THROWS_AS(grad_check(log_sum, Tensor::vector({-1.0}), 1e-5), NumericError);
  auto id = [](GradTape&, Var x) { return ops::sum(x); };
  CHECK_THROWS_AS(grad_check(id, Tensor::vector({1.0}), 1e-2), ConfigError);
  CHECK_THROWS_AS(grad_check(id, Tensor::vector({1.0}), 1e-9), ConfigError);
}

TEST_CASE("every differentiable op passes a gradient check") {
  const double tol = 1e-4;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    Tensor a = random_tensor({3, 4}, seed);
    Tensor b = random_tensor({3, 4}, seed + 100);
    Tensor w = random_tensor({4, 5}, seed + 200);
    Tensor bias = random_tensor({4}, seed + 300);

    auto unary = [&](auto op) {
      return [op](GradTape& t, Var x) { return weighted_sum(t, op(x)); };
    };
    CHECK(grad_check(unary([](Var x) { return ops::gelu(x); }), a) < tol);
    CHECK(grad_check(unary([](Var x) { return ops::exp(x); }), a) < tol);
    CHECK(grad_check(unary([](Var x) { return ops::scale(x, -2.5); }), a) < tol);
    CHECK(grad_check(unary([](Var x) { return ops::add_scalar(x, 0.75); }), a) < tol);
    CHECK(grad_check(unary([](Var x) { return ops::softmax(x, 0); }), a) < tol);
    CHECK(grad_check(unary([](Var x) { return ops::softmax(x, 1); }), a) < tol);
    CHECK(grad_check(unary([](Var x) { return ops::mean(x); }), a) < tol);
    CHECK(grad_check(unary([](Var x) { return ops::slice_rows(x, 1, 3); }), a) < tol);
    CHECK(grad_check(unary([](Var x) { return ops::reshape(x, {2, 6}); }), a) < tol);
    Tensor positive = random_tensor({3, 4}, seed, 0.5, 2.0);
    CHECK(grad_check(unary([](Var x) { return ops::log(x); }), positive) < tol);

    auto with_b = [&](auto op) {
      return [op, b](GradTape& t, Var x) {
        return weighted_sum(t, op(x, t.leaf(b)));
      };
    };
    CHECK(grad_check(with_b([](Var x, Var y) { return ops::add(x, y); }), a) < tol);
    CHECK(grad_check(with_b([](Var x, Var y) { return ops::sub(y, x); }), a) < tol);
    CHECK(grad_check(with_b([](Var x, Var y) { return ops::mul(x, y); }), a) < tol);
    CHECK(grad_check(with_b([](Var x, Var y) { return ops::dot(x, y); }), a) < tol);
    CHECK(grad_check(with_b([](Var x, Var y) {
                       return ops::concat_rows({y, x, y});
                     }),
                     a) < tol);

    auto mm_left = [&](GradTape& t, Var x) {
      return weighted_sum(t, ops::matmul(x, t.constant(w)));
    };
    auto mm_right = [&](GradTape& t, Var x) {
      return weighted_sum(t, ops::matmul(t.constant(a), x));
    };
    CHECK(grad_check(mm_left, a) < tol);
    CHECK(grad_check(mm_right, w) < tol);

    auto bias_grad = [&](GradTape& t, Var x) {
      return weighted_sum(t, ops::add_bias(t.constant(a), x));
    };
    CHECK(grad_check(bias_grad, bias) < tol);

    Tensor gain = random_tensor({4}, seed + 400, 0.5, 1.5);
    auto ln_x = [&](GradTape& t, Var x) {
      return weighted_sum(t, ops::layer_norm(x, t.constant(gain), t.constant(bias)));
    };
    auto ln_gain = [&](GradTape& t, Var g) {
      return weighted_sum(t, ops::layer_norm(t.constant(a), g, t.constant(bias)));
    };
    auto ln_bias = [&](GradTape& t, Var bb) {
      return weighted_sum(t, ops::layer_norm(t.constant(a), t.constant(gain), bb));
    };
    CHECK(grad_check(ln_x, a) < tol);
    CHECK(grad_check(ln_gain, gain) < tol);
    CHECK(grad_check(ln_bias, bias) < tol);

    std::vector<int> ids = {2, 0, 2, 1};
    auto emb = [&](GradTape& t, Var table) {
      return weighted_sum(t, ops::embedding(table, ids));
    };
    CHECK(grad_check(emb, a) < tol);

    std::vector<int> targets = {3, -1, 0};
    auto ce = [&](GradTape&, Var x) { return ops::cross_entropy(x, targets); };
    CHECK(grad_check(ce, a) < tol);
  }
}

TEST_CASE("attention gradients with respect to q, k, v and the mask") {
  const std::size_t heads = 2;
  const std::size_t batch = 2;
  const std::size_t n = 4;
  const std::size_t d = 4;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    Tensor q = random_tensor({batch * n, d}, seed);
    Tensor k = random_tensor({batch * n, d}, seed + 10);
    Tensor v = random_tensor({batch * n, d}, seed + 20);
    Tensor mask({batch * n, n});
    for (std::size_t r = 0; r < batch * n; ++r)
      for (std::size_t c = 0; c <= r % n; ++c) mask.at(r, c) = 0.25 + 0.15 * c;

    auto run = [&](int which) {
      return [=](GradTape& t, Var x) {
        Var vq = which == 0 ? x : t.constant(q);
        Var vk = which == 1 ? x : t.constant(k);
        Var vv = which == 2 ? x : t.constant(v);
        Var vm = which == 3 ? x : t.constant(mask);
        return weighted_sum(t, ops::attention(vq, vk, vv, vm, heads, batch).out);
      };
    };
    CHECK(grad_check(run(0), q) < 1e-4);
    CHECK(grad_check(run(1), k) < 1e-4);
    CHECK(grad_check(run(2), v) < 1e-4);
    // Only entries strictly inside (0, 1] are differentiable points; the
    // zeros sit on the boundary, so perturbations there stay one-sided.
    GradTape tape;
    Var m = tape.leaf(mask);
    Var out = weighted_sum(tape, ops::attention(tape.constant(q), tape.constant(k),
                                                tape.constant(v), m, heads, batch)
                                     .out);
    tape.backward(out);
    Tensor analytic = tape.grad(m);
    const double eps = 1e-6;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (mask[i] == 0.0) continue;
      Tensor up = mask;
      Tensor down = mask;
      up[i] += eps;
      down[i] -= eps;
      GradTape t1;
      GradTape t2;
      const double fu = weighted_sum(t1, ops::attention(t1.constant(q), t1.constant(k),
                                                        t1.constant(v), t1.constant(up),
                                                        heads, batch)
                                             .out)
                            .value()[0];
      const double fd = weighted_sum(t2, ops::attention(t2.constant(q), t2.constant(k),
                                                        t2.constant(v), t2.constant(down),
                                                        heads, batch)
                                             .out)
                            .value()[0];
      const double central = (fu - fd) / (2 * eps);
      CHECK(std::abs(analytic[i] - central) / (std::abs(central) + 1e-12) < 1e-4);
    }
  }
}

TEST_CASE("attention mask matches key deletion and never attends masked keys") {
  const std::size_t n = 4;
  const std::size_t d = 6;
  Tensor q = random_tensor({1, d}, 3);
  Tensor k = random_tensor({n, d}, 4);
  Tensor v = random_tensor({n, d}, 5);
  Tensor mask({1, n}, 1.0);
  mask[2] = 0.0;

  GradTape tape;
  auto masked = ops::attention(tape.constant(q), tape.constant(k), tape.constant(v),
                               tape.constant(mask), 2, 1);
  CHECK(masked.weights[2] == 0.0);

  // Deletion oracle: a plain scalar loop over the surviving keys.
  const std::vector<std::size_t> kept = {0, 1, 3};
  const std::size_t dh = d / 2;
  for (std::size_t h = 0; h < 2; ++h) {
    std::vector<double> s;
    for (std::size_t j : kept) {
      double acc = 0;
      for (std::size_t c = 0; c < dh; ++c) acc += q[h * dh + c] * k.at(j, h * dh + c);
      s.push_back(acc / std::sqrt(static_cast<double>(dh)));
    }
    double mx = std::max({s[0], s[1], s[2]});
    double z = 0;
    for (double x : s) z += std::exp(x - mx);
    for (std::size_t c = 0; c < dh; ++c) {
      double o = 0;
      for (std::size_t i = 0; i < kept.size(); ++i)
        o += std::exp(s[i] - mx) / z * v.at(kept[i], h * dh + c);
      CHECK(std::abs(masked.out.value()[h * dh + c] - o) < 1e-12);
    }
  }

  Tensor none({1, n}, 0.0);
  CHECK_THROWS_WITH_AS(ops::attention(tape.constant(q), tape.constant(k),
                                      tape.constant(v), tape.constant(none), 2, 1),
                       "query fully masked", NumericError);
}

TEST_CASE("straight_through forwards hard values and passes gradients") {
  GradTape tape;
  Var soft = tape.leaf(Tensor::vector({0.2, 0.8}));
  Var st = ops::straight_through(Tensor::vector({0, 1}), soft);
  CHECK(st.value() == Tensor::vector({0, 1}));
  tape.backward(ops::dot(st, tape.constant(Tensor::vector({3, 5}))));
  CHECK(tape.grad(soft) == Tensor::vector({3, 5}));
}

TEST_CASE("unreached leaves have zero gradient") {
  GradTape tape;
  Var used = tape.leaf(Tensor::vector({1, 2}));
  Var unused = tape.leaf(Tensor::vector({4, 5, 6}));
  tape.backward(ops::sum(used));
  CHECK(tape.grad(unused) == Tensor::vector({0, 0, 0}));
}

TEST_CASE("counter rng is a pure function of seed, stream and counter") {
  CounterRng a(42, 7);
  CounterRng b(42, 7);
  CounterRng c(42, 8);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const std::uint64_t x = a.next_u64();
    CHECK(x == b.next_u64());
    differs = differs || x != c.next_u64();
  }
  CHECK(differs);
  CounterRng u(1);
  for (int i = 0; i < 10000; ++i) {
    const double x = u.uniform();
    CHECK((x > 0.0 && x < 1.0));
  }
}
