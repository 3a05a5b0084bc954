#include "dyrate/engine/engine.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dyrate/costing/costing.hpp"
#include "dyrate/error.hpp"

namespace dyrate {
namespace {

// Keep vector over the full sequence dropping `drop` visual tokens, ranked
// like the candidate masks: alive first, then descending importance, then
// position.
std::vector<double> keep_most_important(std::span<const double> importance,
                                        const TokenSegmentation& seg, std::size_t drop,
                                        const std::vector<bool>& alive) {
  std::vector<double> keep(seg.length(), 1.0);
  const auto img = seg.find(Segment::kImg);
  if (!img) return keep;
  const std::size_t N = img->size();
  if (importance.size() != N) throw ConfigError("importance must cover every visual token");
  if (!alive.empty() && alive.size() != N) throw ConfigError("alive flags must cover every visual token");
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto live = [&](std::size_t j) { return alive.empty() || alive[j]; };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (live(a) != live(b)) return live(a);
    return importance[a] > importance[b];
  });
  drop = std::min(drop, N);
  for (std::size_t i = N - drop; i < N; ++i) keep[img->start + order[i]] = 0.0;
  for (std::size_t j = 0; j < N; ++j) {
    if (!live(j)) keep[img->start + j] = 0.0;
  }
  return keep;
}

void compact_layer(LayerCache& lc, const std::vector<bool>& drop_position) {
  const std::size_t d = lc.keys.cols();
  std::vector<double> keys, values;
  std::vector<std::size_t> positions;
  std::vector<bool> alive;
  for (std::size_t e = 0; e < lc.size(); ++e) {
    const std::size_t p = lc.positions[e];
    if (p < drop_position.size() && drop_position[p]) continue;
    keys.insert(keys.end(), lc.keys.row(e).begin(), lc.keys.row(e).end());
    values.insert(values.end(), lc.values.row(e).begin(), lc.values.row(e).end());
    positions.push_back(p);
    alive.push_back(lc.alive[e]);
  }
  lc.keys = Tensor({positions.size(), d}, std::move(keys));
  lc.values = Tensor({positions.size(), d}, std::move(values));
  lc.positions = std::move(positions);
  lc.alive = std::move(alive);
}

std::vector<double> softmax_values(const Tensor& logits) {
  const auto v = logits.data();
  const double mx = *std::max_element(v.begin(), v.end());
  std::vector<double> p(v.size());
  double z = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) z += (p[i] = std::exp(v[i] - mx));
  for (auto& x : p) x /= z;
  return p;
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

void DecodeConfig::validate(const ModelConfig& model) const {
  if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("decode: top_p must lie in (0, 1]");
  if (max_new_tokens < 1) throw ConfigError("decode: max_new_tokens must be at least 1");
  if (prune_layer >= model.n_layers) {
    throw ConfigError("decode: prune_layer " + std::to_string(prune_layer) +
                      " outside a model with " + std::to_string(model.n_layers) + " layers");
  }
  if (K < 2) throw ConfigError("decode: K must be at least 2");
  if (!(gumbel.temperature > 0.0)) throw ConfigError("decode: temperature must be positive");
}

void hard_prune_step(KVCache& cache, std::span<const double> keep, std::size_t from_layer) {
  if (keep.size() != cache.next_position) {
    throw ConfigError("keep vector has " + std::to_string(keep.size()) + " entries, cache holds " +
                      std::to_string(cache.next_position) + " positions");
  }
  std::vector<bool> drop(keep.size());
  for (std::size_t p = 0; p < keep.size(); ++p) {
    if (keep[p] != 0.0 && keep[p] != 1.0) throw ConfigError("hard prune needs a binary keep vector");
    drop[p] = keep[p] == 0.0;
  }
  for (std::size_t l = from_layer; l < cache.layers.size(); ++l) compact_layer(cache.layers[l], drop);
}

std::vector<double> fastv_keep_vector(std::span<const double> importance,
                                      const TokenSegmentation& seg, double R,
                                      const std::vector<bool>& alive) {
  if (!(R >= 0.0 && R < 1.0)) throw ConfigError("fastv: R must lie in [0, 1)");
  const std::size_t N = seg.count(Segment::kImg);
  return keep_most_important(importance, seg,
                             static_cast<std::size_t>(std::floor(R * static_cast<double>(N))),
                             alive);
}

std::vector<double> vtw_keep_vector(const TokenSegmentation& seg) {
  std::vector<double> keep(seg.length(), 1.0);
  if (const auto img = seg.find(Segment::kImg)) {
    for (std::size_t j = img->start; j < img->end; ++j) keep[j] = 0.0;
  }
  return keep;
}

double dp_retain_fraction(int L_index, double p_prune_4th, double r_prime) {
  const double h = L_index - 4 >= 0 ? 1.0 : 0.0;
  return std::clamp(1.0 - h * p_prune_4th - h * r_prime, 0.0, 1.0);
}

std::size_t dp_drop_count(double c, std::size_t n) {
  // The guard absorbs representation error such as 1 - 0.3 - 0.2.
  const double drop = std::floor((1.0 - c) * static_cast<double>(n) + 1e-9);
  return std::min(n, static_cast<std::size_t>(std::max(0.0, drop)));
}

std::vector<double> top_p_filter(std::span<const double> probabilities, double p) {
  std::vector<std::size_t> order(probabilities.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return probabilities[a] > probabilities[b];
  });
  std::vector<double> out(probabilities.size(), 0.0);
  double mass = 0.0;
  for (std::size_t i : order) {
    out[i] = probabilities[i];
    mass += probabilities[i];
    if (mass >= p) break;
  }
  for (auto& v : out) v /= mass;
  return out;
}

int choose_token(const Tensor& logits, const DecodeConfig& cfg, CounterRng& rng) {
  if (cfg.sampling == SamplingKind::kGreedy) return static_cast<int>(argmax(logits.data()));
  const std::vector<double> probs = top_p_filter(softmax_values(logits), cfg.top_p);
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  const double u = rng.uniform();
  double acc = 0.0;
  std::size_t last = order.front();
  for (std::size_t i : order) {
    if (probs[i] == 0.0) break;
    last = i;
    acc += probs[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(last);
}

GenerationResult generate(const ModelParams& params, const PredictorParams* predictor,
                          std::span<const int> prompt, const TokenSegmentation& seg,
                          const DecodeConfig& cfg, const PruneStrategy& strategy,
                          GenerationMode mode) {
  const ModelConfig& mc = params.config;
  cfg.validate(mc);
  strategy.validate(mc.n_layers);
  const bool is_dyrate = strategy.kind == StrategyKind::kDyRate;
  if (is_dyrate != (predictor != nullptr)) {
    throw ConfigError("a predictor is required by, and only by, the dyrate strategy");
  }
  if (predictor && (predictor->K() != cfg.K || predictor->n_heads() != mc.n_heads)) {
    throw ConfigError("predictor shape does not match K and the model's head count");
  }
  if (seg.length() != prompt.size() || seg.count(Segment::kRes) != 0) {
    throw ConfigError("prompt segmentation must cover the prompt and hold no response span");
  }
  if (prompt.empty()) throw ConfigError("empty prompt");

  const std::size_t L = mc.n_layers;
  const auto img = seg.find(Segment::kImg);
  const std::size_t N = img ? img->size() : 0;
  const std::size_t img0 = img ? img->start : 0;
  const std::vector<double> rates = rate_set(cfg.K);
  const bool soft = mode == GenerationMode::kTrainSoft;

  Decoder dec(params);
  KVCache cache;
  StepOutput out = dec.prefill(prompt, cache);
  TokenSegmentation cur = seg;
  CounterRng token_rng(cfg.seed, 1);
  CounterRng gumbel_rng(cfg.seed, 2);

  // Keep weight of each visual token per layer: 1 alive, 0 dropped, in
  // between only for soft relaxed samples.
  std::vector<std::vector<double>> w(L, std::vector<double>(N, 1.0));
  const auto alive_count = [&](std::size_t l) {
    return static_cast<std::size_t>(std::count_if(w[l].begin(), w[l].end(),
                                                  [](double v) { return v > 0.0; }));
  };
  const auto alive_flags = [&](std::size_t l) {
    std::vector<bool> a(N);
    for (std::size_t j = 0; j < N; ++j) a[j] = w[l][j] > 0.0;
    return a;
  };
  const auto apply_keep = [&](std::size_t from, const std::vector<double>& keep) {
    for (std::size_t l = from; l < L; ++l) {
      for (std::size_t j = 0; j < N; ++j) w[l][j] *= keep[img0 + j];
    }
  };

  GenerationResult res;
  res.schedule.strategy = strategy.name();
  res.schedule.params = strategy.params();
  res.schedule.n_layers = L;
  res.schedule.n_prompt = prompt.size();
  res.schedule.n_visual = N;

  for (std::size_t t = 0; t < cfg.max_new_tokens; ++t) {
    const int token = choose_token(out.logits, cfg, token_rng);
    res.tokens.push_back(token);
    res.logits.push_back(out.logits);
    if (t + 1 == cfg.max_new_tokens) break;

    StepRecord rec;
    rec.step = t + 1;
    rec.alive_before = alive_count(L - 1);
    const auto importance_at = [&](std::size_t l) {
      return score_visual_tokens(out.attention.weights[l], out.attention.key_positions[l], cur);
    };
    switch (strategy.kind) {
      case StrategyKind::kNone: break;
      case StrategyKind::kFastV:
      case StrategyKind::kFixedPrune: {
        const bool fires = strategy.kind == StrategyKind::kFixedPrune || rec.step == 1;
        const std::size_t K = strategy.k_layer;
        if (fires && K < L) {
          apply_keep(K, fastv_keep_vector(importance_at(K), cur, strategy.rate, alive_flags(K)));
        }
        rec.rate = fires ? strategy.rate : 0.0;
        break;
      }
      case StrategyKind::kVtw:
        if (rec.step == 1 && strategy.k_layer < L) {
          std::vector<double> keep = vtw_keep_vector(cur);
          apply_keep(strategy.k_layer, keep);
        }
        rec.rate = 1.0;
        break;
      case StrategyKind::kDepthPrune: {
        const double c = dp_retain_fraction(static_cast<int>(L), strategy.p_prune_4th,
                                            strategy.r_prime);
        rec.rate = 1.0 - c;
        if (rec.step != 1 || c == 1.0) break;
        std::size_t first = L;
        for (std::size_t l = 0; l < L && first == L; ++l) {
          if (dp_retain_fraction(static_cast<int>(l) + 1, strategy.p_prune_4th,
                                 strategy.r_prime) < 1.0) {
            first = l;
          }
        }
        apply_keep(first, keep_most_important(importance_at(first), cur, dp_drop_count(c, N),
                                              alive_flags(first)));
        break;
      }
      case StrategyKind::kDyRate: {
        const std::size_t P = cfg.prune_layer;
        const Tensor& att = out.attention.weights[P];
        const auto& keys = out.attention.key_positions[P];
        const Tensor v = segment_shares(att, keys, cur);
        const CandidateMaskSet cms =
            build_candidate_masks(score_visual_tokens(att, keys, cur), cur, cfg.K, alive_flags(P));
        const Tensor pi = predict_rate_distribution(v, *predictor);
        std::vector<double> y(cfg.K, 0.0);
        if (cfg.sample_rate) {
          const GumbelSample gs = gumbel_softmax(pi, cfg.gumbel, gumbel_rng);
          rec.rate_index = gs.index;
          const Tensor& pick = cfg.gumbel.hard || !soft ? gs.hard : gs.soft;
          y.assign(pick.data().begin(), pick.data().end());
        } else {
          rec.rate_index = argmax(pi.data());
          y[rec.rate_index] = 1.0;
        }
        apply_keep(P, mix_masks(y, cms));
        rec.rate = rates[rec.rate_index];
        rec.pi.assign(pi.data().begin(), pi.data().end());
        break;
      }
    }
    rec.alive_after = alive_count(L - 1);
    rec.dropped = rec.alive_before - rec.alive_after;

    PruneMasks masks;
    if (soft) {
      masks.resize(L);
      for (std::size_t l = 0; l < L; ++l) {
        if (alive_count(l) == N &&
            std::all_of(w[l].begin(), w[l].end(), [](double v) { return v == 1.0; })) {
          continue;
        }
        const auto& positions = cache.layers[l].positions;
        masks[l].resize(positions.size());
        for (std::size_t e = 0; e < positions.size(); ++e) {
          const std::size_t p = positions[e];
          masks[l][e] = p >= img0 && p < img0 + N ? w[l][p - img0] : 1.0;
        }
      }
    } else {
      std::vector<bool> drop(cache.next_position, false);
      for (std::size_t l = 0; l < L; ++l) {
        bool any = false;
        for (std::size_t j = 0; j < N; ++j) {
          drop[img0 + j] = w[l][j] == 0.0;
          any = any || drop[img0 + j];
        }
        if (any) compact_layer(cache.layers[l], drop);
      }
    }
    for (std::size_t l = 0; l < L; ++l) {
      rec.layer_tokens.push_back(cur.length() + 1 - (N - alive_count(l)));
    }
    out = dec.decode_step(token, cache, masks);
    cur.extend_response(1);
    res.schedule.steps.push_back(std::move(rec));
  }

  CostConfig cost;
  cost.n_layers = L;
  cost.d_model = mc.d_model;
  cost.d_ffn = mc.d_ffn;
  cost.n_sys = seg.count(Segment::kSys);
  cost.n_visual = N;
  cost.n_ins = prompt.size() - cost.n_sys - N;
  cost.n_generated = cfg.max_new_tokens;
  const FlopsReport report = schedule_flops(res.schedule, cost);
  res.schedule.total_flops = report.total;
  res.schedule.baseline_flops = report.baseline;
  return res;
}

}  // namespace dyrate
