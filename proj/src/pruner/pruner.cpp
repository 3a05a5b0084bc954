#include "dyrate/pruner/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <numeric>
#include <string>

#include "dyrate/binary_io.hpp"
#include "dyrate/error.hpp"
#include "dyrate/numerics/ops.hpp"

namespace dyrate {
namespace {

constexpr std::array<char, 4> kPredictorMagic = {'D', 'Y', 'P', 'R'};
constexpr std::uint16_t kPredictorVersion = 1;

void check_row(const Tensor& weights, std::span<const std::size_t> key_positions) {
  if (weights.rank() != 2 || weights.cols() != key_positions.size()) {
    throw ConfigError("attention row has " + std::to_string(weights.cols()) +
                      " keys but " + std::to_string(key_positions.size()) + " positions");
  }
}

std::size_t argmax(const Tensor& t) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < t.size(); ++i)
    if (t[i] > t[best]) best = i;
  return best;
}

Tensor one_hot(std::size_t K, std::size_t index) {
  Tensor t({K});
  t[index] = 1.0;
  return t;
}

// Raises entries below kProbabilityFloor; the gradient passes where the
// input was above the floor.
Var clamp_probabilities(Var pi) {
  Tensor out = pi.value();
  for (double& v : out.data()) v = std::max(v, kProbabilityFloor);
  return pi.tape->record(std::move(out), {pi}, [pi](GradTape& t, const Tensor& g) {
    const Tensor& x = t.value(pi);
    Tensor& gx = t.grad_buffer(pi);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] >= kProbabilityFloor) gx[i] += g[i];
  });
}

}  // namespace

std::vector<double> rate_set(std::size_t K) {
  if (K < 2) throw ConfigError("rate set needs K >= 2, got " + std::to_string(K));
  std::vector<double> r(K);
  for (std::size_t k = 0; k < K; ++k) r[k] = static_cast<double>(k) / static_cast<double>(K);
  return r;
}

Tensor segment_shares(const Tensor& weights, std::span<const std::size_t> key_positions,
                      const TokenSegmentation& seg) {
  check_row(weights, key_positions);
  const std::size_t H = weights.rows();
  Tensor out({H * 4});
  for (std::size_t j = 0; j < key_positions.size(); ++j) {
    const auto type = static_cast<std::size_t>(seg.at(key_positions[j]));
    for (std::size_t h = 0; h < H; ++h) out[h * 4 + type] += weights.at(h, j);
  }
  return out;
}

Var segment_shares(Var weights, std::span<const std::size_t> key_positions,
                   const TokenSegmentation& seg) {
  const Tensor& w = weights.value();
  check_row(w, key_positions);
  Tensor select({key_positions.size(), 4});
  for (std::size_t j = 0; j < key_positions.size(); ++j) {
    select.at(j, static_cast<std::size_t>(seg.at(key_positions[j]))) = 1.0;
  }
  Var shares = ops::matmul(weights, weights.tape->constant(std::move(select)));
  return ops::reshape(shares, {w.rows() * 4});
}

std::vector<double> score_visual_tokens(const Tensor& weights,
                                        std::span<const std::size_t> key_positions,
                                        const TokenSegmentation& seg) {
  check_row(weights, key_positions);
  const auto img = seg.find(Segment::kImg);
  if (!img) return {};
  std::vector<double> scores(img->size(), 0.0);
  const double H = static_cast<double>(weights.rows());
  for (std::size_t j = 0; j < key_positions.size(); ++j) {
    const std::size_t p = key_positions[j];
    if (p < img->start || p >= img->end) continue;
    double total = 0.0;
    for (std::size_t h = 0; h < weights.rows(); ++h) total += weights.at(h, j);
    scores[p - img->start] = total / H;
  }
  return scores;
}

CandidateMaskSet build_candidate_masks(std::span<const double> importance,
                                       const TokenSegmentation& seg, std::size_t K,
                                       const std::vector<bool>& alive) {
  if (K < 2) throw ConfigError("candidate masks need K >= 2");
  const auto img = seg.find(Segment::kImg);
  const std::size_t N = img ? img->size() : 0;
  if (importance.size() != N) {
    throw ConfigError("importance covers " + std::to_string(importance.size()) +
                      " tokens, segmentation has " + std::to_string(N) + " visual");
  }
  if (!alive.empty() && alive.size() != N) throw ConfigError("alive flags do not match N");
  const auto is_alive = [&](std::size_t i) { return alive.empty() || alive[i]; };

  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (is_alive(a) != is_alive(b)) return is_alive(a);
    return importance[a] > importance[b];
  });

  CandidateMaskSet cms;
  for (std::size_t k = 0; k < K; ++k) {
    const std::size_t drop = k * N / K;
    std::vector<double> m(seg.length(), 1.0);
    for (std::size_t r = N - drop; r < N; ++r) m[img->start + order[r]] = 0.0;
    for (std::size_t i = 0; i < N; ++i)
      if (!is_alive(i)) m[img->start + i] = 0.0;
    cms.masks.push_back(std::move(m));
    cms.drop_counts.push_back(drop);
  }
  return cms;
}

PredictorParams init_predictor(std::size_t K, std::size_t n_heads) {
  if (K < 2 || n_heads == 0) throw ConfigError("predictor needs K >= 2 and H >= 1");
  PredictorParams p{Tensor({K, n_heads * 4}), Tensor({K})};
  p.bias[0] = 2.0;
  return p;
}

Tensor predict_rate_distribution(const Tensor& v, const PredictorParams& p) {
  GradTape tape;
  return predict_rate_distribution(tape.constant(v), tape.constant(p.weight),
                                   tape.constant(p.bias))
      .value();
}

Var predict_rate_distribution(Var v, Var weight, Var bias) {
  const Tensor& w = weight.value();
  const std::size_t K = w.rows();
  if (w.rank() != 2 || v.value().size() != w.cols() || bias.value().size() != K) {
    throw ConfigError("predictor expects features of size " + std::to_string(w.cols()) +
                      ", got " + std::to_string(v.value().size()));
  }
  Var logits = ops::matmul(weight, ops::reshape(v, {w.cols(), 1}));
  logits = ops::add(ops::reshape(logits, {K}), ops::reshape(bias, {K}));
  return ops::softmax(logits, 0);
}

std::vector<double> gumbel_noise(std::size_t K, CounterRng& rng) {
  std::vector<double> g(K);
  for (double& x : g) x = -std::log(-std::log(rng.uniform()));
  return g;
}

GumbelSample gumbel_softmax(const Tensor& pi, const GumbelConfig& cfg,
                            std::span<const double> noise) {
  if (!(cfg.temperature > 0.0) || !std::isfinite(cfg.temperature)) {
    throw ConfigError("Gumbel temperature must be finite and positive");
  }
  const std::size_t K = pi.size();
  if (noise.size() != K) throw ConfigError("Gumbel noise size mismatch");
  GumbelSample s;
  s.soft = Tensor({K});
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < K; ++k) {
    s.soft[k] = (std::log(std::max(pi[k], kProbabilityFloor)) + noise[k]) / cfg.temperature;
    mx = std::max(mx, s.soft[k]);
  }
  double z = 0.0;
  for (double& v : s.soft.data()) {
    v = std::exp(v - mx);
    z += v;
  }
  for (double& v : s.soft.data()) v /= z;
  s.index = argmax(s.soft);
  s.hard = one_hot(K, s.index);
  return s;
}

GumbelSample gumbel_softmax(const Tensor& pi, const GumbelConfig& cfg, CounterRng& rng) {
  const std::vector<double> g = gumbel_noise(pi.size(), rng);
  return gumbel_softmax(pi, cfg, g);
}

GumbelVar gumbel_softmax(Var pi, const GumbelConfig& cfg, std::span<const double> noise) {
  if (!(cfg.temperature > 0.0) || !std::isfinite(cfg.temperature)) {
    throw ConfigError("Gumbel temperature must be finite and positive");
  }
  const std::size_t K = pi.value().size();
  if (noise.size() != K) throw ConfigError("Gumbel noise size mismatch");
  GradTape& tape = *pi.tape;
  Var flat = ops::reshape(pi, {K});
  Var logits = ops::add(ops::log(clamp_probabilities(flat)),
                        tape.constant(Tensor({K}, std::vector<double>(noise.begin(), noise.end()))));
  GumbelVar out;
  out.soft = ops::softmax(ops::scale(logits, 1.0 / cfg.temperature), 0);
  out.index = argmax(out.soft.value());
  out.hard = one_hot(K, out.index);
  out.y = cfg.hard ? ops::straight_through(out.hard, out.soft) : out.soft;
  return out;
}

Var mix_masks(Var y, const CandidateMaskSet& cms) {
  const std::size_t K = cms.K();
  if (y.value().size() != K) throw ConfigError("mix_masks: |y| != K");
  const std::size_t n = cms.masks.front().size();
  Tensor stacked({K, n});
  for (std::size_t k = 0; k < K; ++k)
    std::copy(cms.masks[k].begin(), cms.masks[k].end(), stacked.row(k).begin());
  Var m = ops::matmul(ops::reshape(y, {1, K}), y.tape->constant(std::move(stacked)));
  return ops::reshape(m, {n});
}

std::vector<double> mix_masks(std::span<const double> y, const CandidateMaskSet& cms) {
  if (y.size() != cms.K()) throw ConfigError("mix_masks: |y| != K");
  std::vector<double> m(cms.masks.front().size(), 0.0);
  for (std::size_t k = 0; k < cms.K(); ++k)
    for (std::size_t j = 0; j < m.size(); ++j) m[j] += y[k] * cms.masks[k][j];
  return m;
}

Tensor compose_attention_mask(std::span<const double> m, std::size_t n_q,
                              std::size_t n_k, bool causal) {
  if (m.size() != n_k) throw ConfigError("compose_attention_mask: |m| != n_k");
  if (n_q > n_k) throw ConfigError("compose_attention_mask: more queries than keys");
  Tensor M({n_q, n_k});
  for (std::size_t q = 0; q < n_q; ++q) {
    const std::size_t pos = n_k - n_q + q;
    for (std::size_t j = 0; j < n_k; ++j) {
      const double prune = j == pos ? 1.0 : m[j];
      const double allowed = causal && j > pos ? 0.0 : 1.0;
      M.at(q, j) = std::min(prune, allowed);
    }
  }
  return M;
}

Var compose_attention_row(Var m, std::size_t query_position, bool causal) {
  const std::size_t n_k = m.value().size();
  if (query_position >= n_k) throw ConfigError("compose_attention_row: query outside keys");
  Tensor gate({1, n_k});
  Tensor diag({1, n_k});
  for (std::size_t j = 0; j < n_k; ++j) {
    if (j == query_position) {
      diag[j] = 1.0;
    } else if (!causal || j < query_position) {
      gate[j] = 1.0;
    }
  }
  GradTape& tape = *m.tape;
  return ops::add(ops::mul(ops::reshape(m, {1, n_k}), tape.constant(std::move(gate))),
                  tape.constant(std::move(diag)));
}

void save_predictor(const PredictorParams& p, const std::filesystem::path& path) {
  nlohmann::json header = {{"format_version", kPredictorVersion},
                           {"K", p.K()},
                           {"H", p.n_heads()},
                           {"feature_order", {"sys", "img", "ins", "res"}}};
  ByteWriter w;
  for (double v : p.weight.data()) w.f64(v);
  for (double v : p.bias.data()) w.f64(v);
  write_file(path, make_container(kPredictorMagic, kPredictorVersion, header.dump(), w.bytes()));
}

PredictorParams load_predictor(const std::filesystem::path& path) {
  Container c = parse_container(read_file(path), kPredictorMagic,
                                "not a predictor checkpoint: " + path.string());
  if (c.version != kPredictorVersion) {
    throw IoError("unsupported predictor checkpoint version " + std::to_string(c.version));
  }
  std::size_t K = 0;
  std::size_t H = 0;
  try {
    const auto header = nlohmann::json::parse(c.header);
    K = header.at("K").get<std::size_t>();
    H = header.at("H").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt predictor header in " + path.string() + ": " + e.what());
  }
  PredictorParams p = init_predictor(K, H);
  ByteReader r(c.bytes, c.payload_offset);
  r.set_truncated_message("truncated payload");
  for (double& v : p.weight.data()) v = r.f64();
  for (double& v : p.bias.data()) v = r.f64();
  if (r.remaining() != 0) throw IoError("trailing bytes in " + path.string());
  return p;
}

}  // namespace dyrate
