#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "dyrate/model/segmentation.hpp"
#include "dyrate/numerics/rng.hpp"
#include "dyrate/numerics/tape.hpp"

namespace dyrate {

// r_k = (k-1)/K for k = 1..K. Throws ConfigError for K < 2.
std::vector<double> rate_set(std::size_t K);

// Per head, the attention mass on the sys, img, ins and res keys, as a flat
// [H*4] vector. weights is [H, n_keys]; key_positions maps each key to its
// original position in seg. Absent segments contribute 0.
Tensor segment_shares(const Tensor& weights, std::span<const std::size_t> key_positions,
                      const TokenSegmentation& seg);
Var segment_shares(Var weights, std::span<const std::size_t> key_positions,
                   const TokenSegmentation& seg);

// Mean over heads of the weight on each visual token, indexed by offset
// into the img span. Visual tokens missing from key_positions score 0.
std::vector<double> score_visual_tokens(const Tensor& weights,
                                        std::span<const std::size_t> key_positions,
                                        const TokenSegmentation& seg);

struct CandidateMaskSet {
  // K keep-vectors over the full sequence; values are exactly 0 or 1.
  std::vector<std::vector<double>> masks;
  // floor((k-1) * N / K) for k = 1..K.
  std::vector<std::size_t> drop_counts;

  std::size_t K() const { return masks.size(); }
};

// Ranks visual tokens by descending importance (ties keep the lower
// position) and lets m^k drop the floor((k-1)N/K) lowest ranked. Tokens
// flagged dead in `alive` (indexed like importance) rank below every live
// token and stay dropped in every mask.
CandidateMaskSet build_candidate_masks(std::span<const double> importance,
                                       const TokenSegmentation& seg, std::size_t K,
                                       const std::vector<bool>& alive = {});

struct PredictorParams {
  Tensor weight;  // [K, H*4]
  Tensor bias;    // [K]

  std::size_t K() const { return bias.size(); }
  std::size_t n_heads() const { return weight.cols() / 4; }
};

// Zero weights and a bias of +2 on r_1, which starts the predictor near
// keep-all.
PredictorParams init_predictor(std::size_t K, std::size_t n_heads);

// softmax(weight . v + bias).
Tensor predict_rate_distribution(const Tensor& v, const PredictorParams& p);
Var predict_rate_distribution(Var v, Var weight, Var bias);

struct GumbelConfig {
  double temperature = 1.0;
  bool hard = true;
};

// Probabilities below this value are raised to it before the logarithm.
inline constexpr double kProbabilityFloor = 1e-20;

// g_k = -ln(-ln u_k) with u_k drawn from rng.
std::vector<double> gumbel_noise(std::size_t K, CounterRng& rng);

struct GumbelSample {
  Tensor hard;   // one-hot of argmax y_soft
  Tensor soft;   // softmax((ln pi + g) / tau)
  std::size_t index = 0;
};
GumbelSample gumbel_softmax(const Tensor& pi, const GumbelConfig& cfg,
                            std::span<const double> noise);
GumbelSample gumbel_softmax(const Tensor& pi, const GumbelConfig& cfg, CounterRng& rng);

struct GumbelVar {
  // Forward value is hard when cfg.hard (straight-through), soft otherwise;
  // the gradient always flows through the soft relaxation.
  Var y;
  Var soft;
  Tensor hard;
  std::size_t index = 0;
};
GumbelVar gumbel_softmax(Var pi, const GumbelConfig& cfg, std::span<const double> noise);

// m = sum_k y_k m^k over the full sequence: [seq].
Var mix_masks(Var y, const CandidateMaskSet& cms);
std::vector<double> mix_masks(std::span<const double> y, const CandidateMaskSet& cms);

// Keep mask for n_q queries occupying the last n_q of n_k positions:
// M[q, j] = m[j] off the diagonal, 1 on it, and 0 above it when causal.
Tensor compose_attention_mask(std::span<const double> m, std::size_t n_q,
                              std::size_t n_k, bool causal);
// Differentiable single-row variant for the query at `query_position`: m is
// [1, n_k] (or [n_k]); returns [1, n_k].
Var compose_attention_row(Var m, std::size_t query_position, bool causal);

void save_predictor(const PredictorParams& p, const std::filesystem::path& path);
PredictorParams load_predictor(const std::filesystem::path& path);

}  // namespace dyrate
