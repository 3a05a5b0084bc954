#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "dyrate/error.hpp"
#include "dyrate/numerics/grad_check.hpp"
#include "dyrate/numerics/ops.hpp"
#include "dyrate/pruner/pruner.hpp"

using namespace dyrate;

namespace {

std::vector<std::size_t> iota_positions(std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  return p;
}

Tensor random_rows(std::size_t H, std::size_t n, std::uint64_t seed) {
  Tensor w({H, n});
  CounterRng rng(seed);
  for (std::size_t h = 0; h < H; ++h) {
    double total = 0;
    for (std::size_t j = 0; j < n; ++j) total += (w.at(h, j) = rng.uniform());
    for (std::size_t j = 0; j < n; ++j) w.at(h, j) /= total;
  }
  return w;
}

std::size_t kept_visual(const std::vector<double>& m, const Span& img) {
  std::size_t n = 0;
  for (std::size_t j = img.start; j < img.end; ++j) n += m[j] == 1.0;
  return n;
}

}  // namespace

TEST_CASE("rate set") {
  CHECK(rate_set(4) == std::vector<double>{0, 0.25, 0.5, 0.75});
  CHECK_THROWS_AS(rate_set(1), ConfigError);
}

TEST_CASE("segment shares: uniform, concentrated and loop oracle") {
  auto seg = TokenSegmentation::from_lengths(2, 2, 2, 2);
  Tensor uniform({1, 8}, 1.0 / 8);
  Tensor s = segment_shares(uniform, iota_positions(8), seg);
  for (double v : s.data()) CHECK(v == doctest::Approx(0.25));

  Tensor img_only({2, 8});
  for (std::size_t h = 0; h < 2; ++h) img_only.at(h, 2) = img_only.at(h, 3) = 0.5;
  Tensor t = segment_shares(img_only, iota_positions(8), seg);
  CHECK(t == Tensor::vector({0, 1, 0, 0, 0, 1, 0, 0}));

  auto seg2 = TokenSegmentation::from_lengths(2, 4, 2, 1);
  Tensor w = random_rows(2, 9, 11);
  Tensor r = segment_shares(w, iota_positions(9), seg2);
  const std::size_t bounds[] = {0, 2, 6, 8, 9};
  for (std::size_t h = 0; h < 2; ++h) {
    double total = 0;
    for (std::size_t type = 0; type < 4; ++type) {
      double oracle = 0;
      for (std::size_t j = bounds[type]; j < bounds[type + 1]; ++j) oracle += w.at(h, j);
      CHECK(std::abs(r[h * 4 + type] - oracle) < 1e-12);
      total += r[h * 4 + type];
    }
    CHECK(std::abs(total - 1.0) < 1e-9);
  }

  GradTape tape;
  Tensor rv = segment_shares(tape.constant(w), iota_positions(9), seg2).value();
  for (std::size_t i = 0; i < 8; ++i) CHECK(std::abs(rv[i] - r[i]) < 1e-12);
}

TEST_CASE("segment shares with no response tokens") {
  auto seg = TokenSegmentation::from_lengths(1, 2, 1);
  Tensor w({1, 4}, 0.25);
  Tensor s = segment_shares(w, iota_positions(4), seg);
  CHECK(s[3] == 0.0);
}

TEST_CASE("visual token scores") {
  auto seg = TokenSegmentation::from_lengths(1, 3, 1);
  Tensor one = Tensor::matrix(1, 5, {0, 0.5, 0.3, 0.2, 0});
  CHECK(score_visual_tokens(one, iota_positions(5), seg) == std::vector<double>{0.5, 0.3, 0.2});

  auto seg2 = TokenSegmentation::from_lengths(0, 2, 0);
  Tensor two = Tensor::matrix(2, 2, {0.6, 0.4, 0.2, 0.8});
  auto sc = score_visual_tokens(two, iota_positions(2), seg2);
  CHECK(sc[0] == doctest::Approx(0.4));
  CHECK(sc[1] == doctest::Approx(0.6));

  auto seg3 = TokenSegmentation::from_lengths(3, 6, 2, 1);
  Tensor w = random_rows(4, 12, 5);
  auto s3 = score_visual_tokens(w, iota_positions(12), seg3);
  for (std::size_t j = 0; j < 6; ++j) {
    const double mean = (w.at(0, 3 + j) + w.at(1, 3 + j) + w.at(2, 3 + j) + w.at(3, 3 + j)) / 4;
    CHECK(std::abs(s3[j] - mean) < 1e-12);
  }

  CHECK(score_visual_tokens(Tensor({1, 2}, 0.5), iota_positions(2),
                            TokenSegmentation::from_lengths(1, 0, 1))
            .empty());
}

TEST_CASE("candidate masks examples") {
  auto seg = TokenSegmentation::from_lengths(1, 4, 1);
  std::vector<double> scores = {0.4, 0.3, 0.2, 0.1};
  auto cms = build_candidate_masks(scores, seg, 4);
  CHECK(cms.masks[0] == std::vector<double>{1, 1, 1, 1, 1, 1});
  CHECK(cms.masks[1] == std::vector<double>{1, 1, 1, 1, 0, 1});
  CHECK(cms.masks[2] == std::vector<double>{1, 1, 1, 0, 0, 1});
  CHECK(cms.masks[3] == std::vector<double>{1, 1, 0, 0, 0, 1});

  auto ties = build_candidate_masks(std::vector<double>(4, 0.25), seg, 2);
  CHECK(ties.masks[1] == std::vector<double>{1, 1, 1, 0, 0, 1});

  auto seg7 = TokenSegmentation::from_lengths(0, 7, 0);
  auto c7 = build_candidate_masks(std::vector<double>(7, 0.0), seg7, 3);
  CHECK(c7.drop_counts == std::vector<std::size_t>{0, 2, 4});
}

TEST_CASE("candidate masks keep dead tokens dropped") {
  auto seg = TokenSegmentation::from_lengths(1, 4, 0);
  std::vector<double> scores = {0.1, 0.9, 0.5, 0.3};
  std::vector<bool> alive = {true, false, true, true};
  auto cms = build_candidate_masks(scores, seg, 4, alive);
  CHECK(cms.masks[0] == std::vector<double>{1, 1, 0, 1, 1});
  CHECK(cms.masks[1] == std::vector<double>{1, 1, 0, 1, 1});
  CHECK(cms.masks[2] == std::vector<double>{1, 0, 0, 1, 1});
  CHECK(cms.masks[3] == std::vector<double>{1, 0, 0, 1, 0});
}

TEST_CASE("candidate masks are nested with exact drop counts") {
  for (std::size_t N = 1; N <= 20; ++N) {
    for (std::size_t K = 2; K <= 8; ++K) {
      auto seg = TokenSegmentation::from_lengths(2, N, 3, 1);
      std::vector<double> scores(N);
      CounterRng rng(N * 31 + K);
      for (double& s : scores) s = std::floor(rng.uniform() * 4);
      auto cms = build_candidate_masks(scores, seg, K);
      const Span img = *seg.find(Segment::kImg);
      for (std::size_t k = 0; k < K; ++k) {
        CHECK(kept_visual(cms.masks[k], img) == N - k * N / K);
        for (std::size_t j = 0; j < seg.length(); ++j) {
          if (j < img.start || j >= img.end) CHECK(cms.masks[k][j] == 1.0);
          if (k + 1 < K) CHECK(cms.masks[k + 1][j] <= cms.masks[k][j]);
        }
      }
    }
  }
}

TEST_CASE("rate distribution") {
  PredictorParams zero{Tensor({4, 8}), Tensor({4})};
  Tensor pi = predict_rate_distribution(Tensor({8}, 0.3), zero);
  for (double v : pi.data()) CHECK(v == doctest::Approx(0.25));

  PredictorParams two{Tensor({2, 4}), Tensor::vector({std::log(2.0), 0.0})};
  Tensor p2 = predict_rate_distribution(Tensor({4}, 0.1), two);
  CHECK(std::abs(p2[0] - 2.0 / 3) < 1e-15);
  CHECK(std::abs(p2[1] - 1.0 / 3) < 1e-15);

  CHECK_THROWS_AS(predict_rate_distribution(Tensor({5}), zero), ConfigError);

  PredictorParams init = init_predictor(4, 2);
  CHECK(init.bias == Tensor::vector({2, 0, 0, 0}));

  Tensor v = Tensor::vector({0.2, 0.5, 0.1, 0.2, 0.3, 0.3, 0.3, 0.1});
  Tensor w({4, 8});
  CounterRng rng(2);
  for (double& x : w.data()) x = rng.uniform(-1, 1);
  auto f = [&](GradTape& t, Var weight) {
    Var pi = predict_rate_distribution(t.constant(v), weight, t.constant(Tensor({4})));
    return ops::scale(ops::log(ops::slice_rows(ops::reshape(pi, {4, 1}), 2, 3)), -1.0);
  };
  CHECK(grad_check(f, w) < 1e-5);
}

TEST_CASE("gumbel softmax") {
  GumbelConfig cfg;
  CounterRng rng(3);
  Tensor degenerate = Tensor::vector({1, 0, 0, 0});
  for (int i = 0; i < 10000; ++i) CHECK(gumbel_softmax(degenerate, cfg, rng).index == 0);

  Tensor pi = Tensor::vector({0.3, 0.7});
  CounterRng r2(4);
  int second = 0;
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) second += gumbel_softmax(pi, cfg, r2).index == 1;
  CHECK(std::abs(second / static_cast<double>(draws) - 0.7) < 0.01);

  GumbelSample s = gumbel_softmax(Tensor::vector({0.2, 0.3, 0.5}), cfg, rng);
  double total = 0;
  for (double v : s.soft.data()) total += v;
  CHECK(std::abs(total - 1) < 1e-12);
  CHECK(s.hard[s.index] == 1.0);

  GumbelConfig bad;
  bad.temperature = 0.0;
  CHECK_THROWS_AS(gumbel_softmax(pi, bad, rng), ConfigError);
}

TEST_CASE("straight-through gradient equals the soft gradient exactly") {
  Tensor logits = Tensor::vector({0.1, -0.4, 0.9, 0.2});
  Tensor c = Tensor::vector({1.5, -2.0, 0.25, 3.0});
  CounterRng rng(17);
  const std::vector<double> noise = gumbel_noise(4, rng);
  auto grad_for = [&](bool hard) {
    GradTape tape;
    Var x = tape.leaf(logits);
    Var pi = ops::softmax(x, 0);
    GumbelConfig cfg;
    cfg.hard = hard;
    GumbelVar g = gumbel_softmax(pi, cfg, noise);
    if (hard) CHECK(g.y.value() == g.hard);
    tape.backward(ops::dot(g.y, tape.constant(c)));
    return tape.grad(x);
  };
  CHECK(grad_for(true) == grad_for(false));
}

TEST_CASE("mix masks") {
  auto seg = TokenSegmentation::from_lengths(0, 4, 0);
  auto cms = build_candidate_masks(std::vector<double>{4, 3, 2, 1}, seg, 2);
  CHECK(mix_masks(std::vector<double>{1, 0}, cms) == cms.masks[0]);
  CHECK(mix_masks(std::vector<double>{0, 1}, cms) == cms.masks[1]);
  CHECK(mix_masks(std::vector<double>{0.5, 0.5}, cms) == std::vector<double>{1, 1, 0.5, 0.5});

  GradTape tape;
  Var y = tape.leaf(Tensor::vector({0.5, 0.5}));
  Var m = mix_masks(y, cms);
  CHECK(m.value() == Tensor::vector({1, 1, 0.5, 0.5}));
  tape.backward(ops::sum(m));
  CHECK(tape.grad(y) == Tensor::vector({4, 2}));
}

TEST_CASE("compose attention mask") {
  Tensor causal = compose_attention_mask(std::vector<double>(3, 1.0), 3, 3, true);
  for (std::size_t q = 0; q < 3; ++q)
    for (std::size_t j = 0; j < 3; ++j) CHECK(causal.at(q, j) == (j <= q ? 1.0 : 0.0));

  Tensor row = compose_attention_mask(std::vector<double>{1, 0, 1}, 1, 3, true);
  CHECK(row == Tensor::matrix(1, 3, {1, 0, 1}));

  Tensor self = compose_attention_mask(std::vector<double>{0, 0, 0, 1}, 1, 4, true);
  CHECK(self == Tensor::matrix(1, 4, {0, 0, 0, 1}));
  Tensor self0 = compose_attention_mask(std::vector<double>{0, 0, 0, 0}, 1, 4, true);
  CHECK(self0 == Tensor::matrix(1, 4, {0, 0, 0, 1}));

  GradTape tape;
  Var m = tape.constant(Tensor::vector({0.5, 0, 1, 0.2}));
  CHECK(compose_attention_row(m, 2, true).value() == Tensor::matrix(1, 4, {0.5, 0, 1, 0}));
  CHECK(compose_attention_row(m, 1, false).value() == Tensor::matrix(1, 4, {0.5, 1, 1, 0.2}));
}

TEST_CASE("predictor checkpoint round trip") {
  PredictorParams p = init_predictor(4, 3);
  CounterRng rng(8);
  for (double& v : p.weight.data()) v = rng.uniform(-1, 1);
  const auto path = std::filesystem::temp_directory_path() / "dyrate_predictor_test.bin";
  save_predictor(p, path);
  PredictorParams back = load_predictor(path);
  CHECK(back.weight == p.weight);
  CHECK(back.bias == p.bias);
  std::filesystem::remove(path);
}
