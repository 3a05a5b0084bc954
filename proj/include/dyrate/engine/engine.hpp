#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dyrate/engine/strategy.hpp"
#include "dyrate/model/model.hpp"
#include "dyrate/numerics/rng.hpp"
#include "dyrate/pruner/pruner.hpp"

namespace dyrate {

enum class SamplingKind { kGreedy, kTopP };

struct DecodeConfig {
  SamplingKind sampling = SamplingKind::kGreedy;
  double top_p = 0.9;
  // Seeds top-p draws and the Gumbel noise, on separate streams.
  std::uint64_t seed = 0;
  std::size_t max_new_tokens = 16;
  std::size_t prune_layer = 3;
  std::size_t K = 4;
  GumbelConfig gumbel;
  // When false dyrate takes argmax pi instead of a Gumbel sample.
  bool sample_rate = true;

  // Throws ConfigError.
  void validate(const ModelConfig& model) const;
};

enum class GenerationMode {
  // Dropped tokens stay in the cache and are masked out of attention.
  kTrainSoft,
  // Dropped tokens are deleted from the cache of the pruned layers.
  kInferHard,
};

struct GenerationResult {
  std::vector<int> tokens;
  // Logits each token was chosen from, [vocab] each.
  std::vector<Tensor> logits;
  PruneSchedule schedule;
};

// Prefill, then one decode step per generated token after the first. Each
// step's pruning decision uses the attention of the previous query at the
// strategy's pruning layer. predictor must be non-null exactly when the
// strategy is dyrate. Schedule totals use CostConfig built from the model
// width and the prompt segmentation.
GenerationResult generate(const ModelParams& params, const PredictorParams* predictor,
                          std::span<const int> prompt, const TokenSegmentation& seg,
                          const DecodeConfig& cfg, const PruneStrategy& strategy,
                          GenerationMode mode);

// keep is indexed by absolute position (size cache.next_position) and must
// be binary. Layers >= from_layer lose the entries whose position has
// keep 0; earlier layers and the survivors' positions are untouched.
void hard_prune_step(KVCache& cache, std::span<const double> keep, std::size_t from_layer);

// Full-sequence keep vector dropping the floor(R * N) least important
// visual tokens. Dead tokens (alive false) rank last.
std::vector<double> fastv_keep_vector(std::span<const double> importance,
                                      const TokenSegmentation& seg, double R,
                                      const std::vector<bool>& alive = {});
// Zero on every visual position, one elsewhere.
std::vector<double> vtw_keep_vector(const TokenSegmentation& seg);

// 1 - H(L - 4) P - H(L - 4) R', clamped to [0, 1], with H(0) = 1. L_index is
// 1-based, so layer index 3 (0-based) is the first one pruned.
double dp_retain_fraction(int L_index, double p_prune_4th, double r_prime);
// Visual tokens removed to keep a fraction c of n.
std::size_t dp_drop_count(double c, std::size_t n);

// Greedy argmax (lowest id on ties) or a nucleus draw: the smallest prefix
// of ids sorted by descending probability whose mass reaches p,
// renormalized.
int choose_token(const Tensor& logits, const DecodeConfig& cfg, CounterRng& rng);
// Probabilities after nucleus filtering; zero outside the nucleus.
std::vector<double> top_p_filter(std::span<const double> probabilities, double p);

}  // namespace dyrate
