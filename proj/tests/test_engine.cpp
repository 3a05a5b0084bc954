#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "dyrate/costing/costing.hpp"
#include "dyrate/engine/engine.hpp"
#include "dyrate/error.hpp"
#include "dyrate/numerics/ops.hpp"

using namespace dyrate;

namespace {

ModelConfig small_config(std::uint64_t seed = 3) {
  ModelConfig c;
  c.n_layers = 4;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_ffn = 32;
  c.vocab_size = 48;
  c.max_seq = 96;
  c.seed = seed;
  return c;
}

struct Prompt {
  std::vector<int> ids;
  TokenSegmentation seg;
};

Prompt random_prompt(std::uint64_t seed, std::size_t n_sys = 3, std::size_t n_img = 12,
                     std::size_t n_ins = 4) {
  CounterRng rng(seed, 9);
  Prompt p;
  p.seg = TokenSegmentation::from_lengths(n_sys, n_img, n_ins);
  for (std::size_t i = 0; i < p.seg.length(); ++i) p.ids.push_back(static_cast<int>(rng.below(48)));
  return p;
}

PredictorParams random_predictor(std::size_t K, std::size_t H, std::uint64_t seed) {
  PredictorParams p = init_predictor(K, H);
  CounterRng rng(seed, 4);
  for (auto& v : p.weight.data()) v = rng.uniform(-4, 4);
  for (auto& v : p.bias.data()) v = rng.uniform(-1, 1);
  return p;
}

PredictorParams forced_keep_all(std::size_t K, std::size_t H) {
  PredictorParams p = init_predictor(K, H);
  for (auto& v : p.bias.data()) v = -50;
  p.bias[0] = 50;
  return p;
}

DecodeConfig decode_config(std::size_t steps, std::size_t prune_layer = 1) {
  DecodeConfig c;
  c.max_new_tokens = steps;
  c.prune_layer = prune_layer;
  return c;
}

// Greedy generation by re-running the whole sequence every step.
std::vector<int> baseline_greedy(const ModelParams& params, std::vector<int> ids,
                                 std::size_t steps) {
  std::vector<int> out;
  for (std::size_t t = 0; t < steps; ++t) {
    GradTape tape;
    BoundModel m(params, tape, false);
    const Tensor& logits = forward(m, ids, 1).logits.value();
    const auto row = logits.row(logits.rows() - 1);
    const int next = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    out.push_back(next);
    ids.push_back(next);
  }
  return out;
}

void check_schedule_invariants(const PruneSchedule& s, std::size_t K_rates = 0) {
  std::size_t dropped = 0;
  std::size_t prev = s.n_visual;
  for (const auto& r : s.steps) {
    CHECK(r.alive_before == prev);
    CHECK(r.alive_after <= r.alive_before);
    dropped += r.dropped;
    CHECK(r.alive_after == s.n_visual - dropped);
    prev = r.alive_after;
    if (K_rates) {
      const auto rates = rate_set(K_rates);
      CHECK(std::find(rates.begin(), rates.end(), r.rate) != rates.end());
    }
  }
}

}  // namespace

TEST_CASE("strategy parsing, naming and validation") {
  for (const char* text : {"none", "dyrate", "fastv:K=3,R=0.5", "vtw:K=16", "fp:R=0.25,K=2",
                           "dp:P=0.3,R'=0.2"}) {
    CHECK(PruneStrategy::parse(text).to_string() == text);
  }
  CHECK(PruneStrategy::parse("fastv:K=3,R=0.5") == PruneStrategy::fastv(3, 0.5));
  CHECK(PruneStrategy::parse("fastv:K=3,R=0.5").params() == "K=3 R=0.5");
  CHECK_THROWS_AS(PruneStrategy::parse("fastv:K=3"), ConfigError);
  CHECK_THROWS_AS(PruneStrategy::parse("fastv:K=3,R=0.5,Q=1"), ConfigError);
  CHECK_THROWS_AS(PruneStrategy::parse("magic"), ConfigError);
  CHECK_THROWS_AS(PruneStrategy::fastv(3, 1.0).validate(4), ConfigError);
  CHECK_THROWS_AS(PruneStrategy::fastv(0, 0.5).validate(4), ConfigError);
  CHECK_THROWS_AS(PruneStrategy::vtw(5).validate(4), ConfigError);
  CHECK_NOTHROW(PruneStrategy::vtw(4).validate(4));
  CHECK_THROWS_AS(PruneStrategy::depth_prune(0.5, -0.1).validate(4), ConfigError);
}

TEST_CASE("fastv and vtw keep vectors") {
  auto seg = TokenSegmentation::from_lengths(2, 576, 3);
  std::vector<double> imp(576);
  for (std::size_t j = 0; j < 576; ++j) imp[j] = std::sin(double(j));
  const auto count_zero = [](const std::vector<double>& k) {
    return std::count(k.begin(), k.end(), 0.0);
  };
  CHECK(count_zero(fastv_keep_vector(imp, seg, 0.0)) == 0);
  const auto half = fastv_keep_vector(imp, seg, 0.5);
  CHECK(count_zero(half) == 288);
  // Every kept token is at least as important as every dropped one.
  double min_kept = 1e9, max_dropped = -1e9;
  for (std::size_t j = 0; j < 576; ++j) {
    (half[2 + j] == 1.0 ? min_kept : max_dropped) =
        half[2 + j] == 1.0 ? std::min(min_kept, imp[j]) : std::max(max_dropped, imp[j]);
  }
  CHECK(min_kept >= max_dropped);
  CHECK(half[0] == 1.0);
  CHECK(half[578] == 1.0);

  auto seg5 = TokenSegmentation::from_lengths(1, 5, 1);
  CHECK(count_zero(fastv_keep_vector(std::vector<double>{1, 2, 3, 4, 5}, seg5, 0.5)) == 2);
  CHECK(fastv_keep_vector(std::vector<double>{1, 1, 1, 1, 1}, seg5, 0.5) ==
        std::vector<double>{1, 1, 1, 1, 0, 0, 1});
  CHECK_THROWS_AS(fastv_keep_vector(imp, seg, 1.0), ConfigError);

  CHECK(vtw_keep_vector(TokenSegmentation::from_lengths(2, 4, 1)) ==
        std::vector<double>{1, 1, 0, 0, 0, 0, 1});
  CHECK(vtw_keep_vector(TokenSegmentation::from_lengths(3, 0, 2)) == std::vector<double>(5, 1.0));
}

TEST_CASE("depth based retain fraction") {
  CHECK(dp_retain_fraction(3, 0.9, 0.9) == 1.0);
  CHECK(dp_retain_fraction(5, 0.3, 0.2) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(dp_retain_fraction(6, 0.7, 0.5) == 0.0);
  CHECK(dp_retain_fraction(4, 0.1, 0.0) == doctest::Approx(0.9));
  CHECK(dp_drop_count(dp_retain_fraction(5, 0.3, 0.2), 576) == 288);
  CHECK(dp_drop_count(1.0, 10) == 0);
  CHECK(dp_drop_count(0.0, 10) == 10);
}

TEST_CASE("top-p filtering and sampling") {
  const std::vector<double> p = {0.1, 0.4, 0.2, 0.3};
  const auto f = top_p_filter(p, 0.6);
  CHECK(f[1] == doctest::Approx(4.0 / 7));
  CHECK(f[3] == doctest::Approx(3.0 / 7));
  CHECK(f[0] == 0.0);
  CHECK(f[2] == 0.0);
  const auto all = top_p_filter(p, 1.0);
  for (std::size_t i = 0; i < 4; ++i) CHECK(all[i] == doctest::Approx(p[i]));
  CHECK(top_p_filter(p, 0.01) == std::vector<double>{0, 1, 0, 0});

  DecodeConfig cfg;
  cfg.sampling = SamplingKind::kTopP;
  cfg.top_p = 0.6;
  Tensor logits = Tensor::vector({std::log(0.1), std::log(0.4), std::log(0.2), std::log(0.3)});
  CounterRng rng(5);
  std::vector<int> counts(4, 0);
  const int n = 40000;
  for (int i = 0; i < n; ++i) ++counts[choose_token(logits, cfg, rng)];
  CHECK(counts[0] == 0);
  CHECK(counts[2] == 0);
  CHECK(std::abs(counts[1] / double(n) - 4.0 / 7) < 0.01);
  cfg.sampling = SamplingKind::kGreedy;
  CHECK(choose_token(Tensor::vector({1, 3, 3, 0}), cfg, rng) == 1);
}

TEST_CASE("hard prune step compacts only the pruned layers") {
  const ModelParams params = init_model(small_config());
  const Prompt pr = random_prompt(1, 2, 4, 2);
  Decoder dec(params);
  KVCache cache;
  dec.prefill(pr.ids, cache);
  KVCache same = cache;
  hard_prune_step(same, std::vector<double>(8, 1.0), 1);
  for (std::size_t l = 0; l < 4; ++l) {
    CHECK(same.layers[l].positions == cache.layers[l].positions);
    CHECK(same.layers[l].keys == cache.layers[l].keys);
  }

  std::vector<double> keep = {1, 1, 0, 1, 0, 0, 1, 1};
  KVCache hard = cache;
  hard_prune_step(hard, keep, 2);
  CHECK(hard.layers[0].size() == 8);
  CHECK(hard.layers[1].size() == 8);
  CHECK(hard.layers[2].size() == 5);
  CHECK(hard.layers[3].positions == std::vector<std::size_t>{0, 1, 3, 6, 7});
  CHECK_THROWS_AS(hard_prune_step(hard, std::vector<double>(8, 0.5), 0), ConfigError);
  CHECK_THROWS_AS(hard_prune_step(hard, std::vector<double>(7, 1.0), 0), ConfigError);

  // Masked-uncompacted oracle.
  PruneMasks masks(4);
  masks[2] = masks[3] = keep;
  Decoder a(params), b(params);
  KVCache soft = cache;
  const StepOutput s = a.decode_step(5, soft, masks);
  const StepOutput h = b.decode_step(5, hard);
  for (std::size_t i = 0; i < s.logits.size(); ++i) {
    CHECK(std::abs(s.logits[i] - h.logits[i]) <= 1e-9);
  }
}

TEST_CASE("unpruned and zero-rate strategies reproduce baseline generation") {
  const ModelParams params = init_model(small_config());
  const Prompt pr = random_prompt(2);
  const auto base = baseline_greedy(params, pr.ids, 10);
  const DecodeConfig cfg = decode_config(10);
  const PredictorParams keep_all = forced_keep_all(4, 2);
  for (auto mode : {GenerationMode::kInferHard, GenerationMode::kTrainSoft}) {
    CHECK(generate(params, nullptr, pr.ids, pr.seg, cfg, PruneStrategy::none(), mode).tokens == base);
    for (const auto& s : {PruneStrategy::fastv(1, 0.0), PruneStrategy::fixed_prune(0.0, 2),
                          PruneStrategy::depth_prune(0.0, 0.0)}) {
      CHECK(generate(params, nullptr, pr.ids, pr.seg, cfg, s, mode).tokens == base);
    }
    const auto r1 = generate(params, &keep_all, pr.ids, pr.seg, cfg, PruneStrategy::dyrate(), mode);
    CHECK(r1.tokens == base);
    for (const auto& rec : r1.schedule.steps) CHECK(rec.rate_index == 0);
    const auto ref = generate(params, nullptr, pr.ids, pr.seg, cfg, PruneStrategy::none(), mode);
    CHECK(r1.logits == ref.logits);
  }
}

TEST_CASE("soft masking and hard compaction agree for every strategy") {
  const ModelConfig mc = small_config(7);
  const ModelParams params = init_model(mc);
  const PredictorParams pred = random_predictor(4, 2, 11);
  const std::vector<PruneStrategy> strategies = {
      PruneStrategy::fastv(3, 0.5),        PruneStrategy::fastv(1, 0.75),
      PruneStrategy::vtw(2),               PruneStrategy::fixed_prune(0.5, 1),
      PruneStrategy::depth_prune(0.3, 0.2), PruneStrategy::dyrate()};
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const Prompt pr = random_prompt(seed + 20);
    DecodeConfig cfg = decode_config(12);
    cfg.seed = seed;
    if (seed % 2) {
      cfg.sampling = SamplingKind::kTopP;
      cfg.top_p = 0.8;
    }
    for (const auto& s : strategies) {
      const PredictorParams* p = s.kind == StrategyKind::kDyRate ? &pred : nullptr;
      INFO(s.to_string(), " seed ", seed);
      const auto hard = generate(params, p, pr.ids, pr.seg, cfg, s, GenerationMode::kInferHard);
      const auto soft = generate(params, p, pr.ids, pr.seg, cfg, s, GenerationMode::kTrainSoft);
      CHECK(hard.tokens == soft.tokens);
      REQUIRE(hard.logits.size() == soft.logits.size());
      for (std::size_t t = 0; t < hard.logits.size(); ++t) {
        for (std::size_t i = 0; i < hard.logits[t].size(); ++i) {
          CHECK(std::abs(hard.logits[t][i] - soft.logits[t][i]) <= 1e-9);
        }
      }
      CHECK(hard.schedule == soft.schedule);
      check_schedule_invariants(hard.schedule, s.kind == StrategyKind::kDyRate ? 4 : 0);
    }
  }
}

TEST_CASE("strategy schedules: drop counts and layer gating") {
  const ModelParams params = init_model(small_config());
  const Prompt pr = random_prompt(4);  // 3 sys, 12 img, 4 ins
  const DecodeConfig cfg = decode_config(6);
  const auto run = [&](const PruneStrategy& s) {
    return generate(params, nullptr, pr.ids, pr.seg, cfg, s, GenerationMode::kInferHard).schedule;
  };
  const auto fastv = run(PruneStrategy::fastv(2, 0.5));
  REQUIRE(fastv.steps.size() == 5);
  CHECK(fastv.steps[0].dropped == 6);
  CHECK(fastv.steps[0].rate == 0.5);
  for (std::size_t i = 1; i < 5; ++i) {
    CHECK(fastv.steps[i].dropped == 0);
    CHECK(fastv.steps[i].rate == 0.0);
  }
  for (const auto& r : fastv.steps) {
    CHECK(r.layer_tokens[0] == 19 + r.step);
    CHECK(r.layer_tokens[1] == 19 + r.step);
    CHECK(r.layer_tokens[2] == 19 + r.step - 6);
  }
  const auto vtw = run(PruneStrategy::vtw(3));
  for (const auto& r : vtw.steps) {
    CHECK(r.layer_tokens[2] == 19 + r.step);
    CHECK(r.layer_tokens[3] == 7 + r.step);
  }
  // With four layers only the last one (1-based index 4) is depth pruned.
  const auto dp = run(PruneStrategy::depth_prune(0.3, 0.2));
  CHECK(dp.steps[0].layer_tokens[2] == 20);
  CHECK(dp.steps[0].layer_tokens[3] == 14);
  const auto fp = run(PruneStrategy::fixed_prune(0.25, 1));
  for (const auto& r : fp.steps) CHECK(r.alive_after == 9);
  check_schedule_invariants(fp);

  // Totals agree with the cost model applied to the recorded counts.
  CostConfig cost{4, 16, 32, 3, 12, 4, 6};
  const FlopsReport rep = schedule_flops(fastv, cost);
  CHECK(fastv.total_flops == rep.total);
  CHECK(fastv.baseline_flops == rep.baseline);
  CHECK(fastv.to_json().find("\"strategy\":\"fastv\"") != std::string::npos);
  CHECK(schedules_ndjson({fastv, vtw}).size() == fastv.to_json().size() + vtw.to_json().size() + 2);
}

TEST_CASE("generation errors and determinism") {
  const ModelParams params = init_model(small_config());
  const Prompt pr = random_prompt(5);
  const PredictorParams pred = random_predictor(4, 2, 2);
  DecodeConfig cfg = decode_config(8);
  CHECK_THROWS_AS(generate(params, nullptr, pr.ids, pr.seg, cfg, PruneStrategy::dyrate(),
                           GenerationMode::kInferHard),
                  ConfigError);
  CHECK_THROWS_AS(generate(params, &pred, pr.ids, pr.seg, cfg, PruneStrategy::none(),
                           GenerationMode::kInferHard),
                  ConfigError);
  const PredictorParams wrong = random_predictor(3, 2, 2);
  CHECK_THROWS_AS(generate(params, &wrong, pr.ids, pr.seg, cfg, PruneStrategy::dyrate(),
                           GenerationMode::kInferHard),
                  ConfigError);
  DecodeConfig bad = cfg;
  bad.prune_layer = 4;
  CHECK_THROWS_AS(generate(params, nullptr, pr.ids, pr.seg, bad, PruneStrategy::none(),
                           GenerationMode::kInferHard),
                  ConfigError);
  bad = cfg;
  bad.top_p = 0;
  CHECK_THROWS_AS(bad.validate(params.config), ConfigError);
  bad = cfg;
  bad.max_new_tokens = 200;
  CHECK_THROWS_AS(generate(params, nullptr, pr.ids, pr.seg, bad, PruneStrategy::none(),
                           GenerationMode::kInferHard),
                  ConfigError);

  cfg.sampling = SamplingKind::kTopP;
  cfg.seed = 3;
  const auto a = generate(params, &pred, pr.ids, pr.seg, cfg, PruneStrategy::dyrate(),
                          GenerationMode::kInferHard);
  const auto b = generate(params, &pred, pr.ids, pr.seg, cfg, PruneStrategy::dyrate(),
                          GenerationMode::kInferHard);
  CHECK(a.tokens == b.tokens);
  CHECK(a.schedule == b.schedule);
  check_schedule_invariants(a.schedule, 4);
}
