#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dyrate {

enum class StrategyKind { kNone, kDyRate, kFastV, kVtw, kFixedPrune, kDepthPrune };

// Which visual tokens a generation run drops, and from which layer.
// Layers are 0-indexed; K_layer counts the leading layers left intact.
struct PruneStrategy {
  StrategyKind kind = StrategyKind::kNone;
  std::size_t k_layer = 3;   // fastv, vtw, fp
  double rate = 0.0;         // R for fastv and fp
  double p_prune_4th = 0.0;  // dp
  double r_prime = 0.0;      // dp

  static PruneStrategy none() { return {}; }
  static PruneStrategy dyrate() { return {StrategyKind::kDyRate}; }
  static PruneStrategy fastv(std::size_t k, double r) { return {StrategyKind::kFastV, k, r}; }
  static PruneStrategy vtw(std::size_t k) { return {StrategyKind::kVtw, k, 1.0}; }
  static PruneStrategy fixed_prune(double r, std::size_t k) {
    return {StrategyKind::kFixedPrune, k, r};
  }
  static PruneStrategy depth_prune(double p, double r_prime) {
    return {StrategyKind::kDepthPrune, 3, 0.0, p, r_prime};
  }

  // Accepts "none", "dyrate", "fastv:K=3,R=0.5", "vtw:K=16", "fp:R=0.5,K=3"
  // and "dp:P=0.3,R'=0.2". Throws ConfigError.
  static PruneStrategy parse(const std::string& text);
  std::string name() const;
  // Space separated parameters, e.g. "K=3 R=0.5"; empty for none/dyrate.
  std::string params() const;
  std::string to_string() const;
  // Throws ConfigError when a rate is outside [0, 1) or K_layer outside
  // [1, n_layers].
  void validate(std::size_t n_layers) const;

  bool operator==(const PruneStrategy&) const = default;
};

// One decode step of a generation run. Step s feeds the s-th generated
// token back; decisions for it are taken from the previous call's
// attention.
struct StepRecord {
  std::size_t step = 0;
  // Nominal drop fraction: r_k for dyrate, R for fastv/fp (0 outside its
  // trigger step for fastv), 1 for vtw, 1 - C_retain for dp.
  double rate = 0.0;
  std::size_t rate_index = 0;  // dyrate only
  // Visual tokens alive at the deepest layer before and after the step's
  // decision, and how many this step dropped.
  std::size_t alive_before = 0;
  std::size_t alive_after = 0;
  std::size_t dropped = 0;
  std::vector<double> pi;  // dyrate only
  // Keys the step's query attends to per layer, self included.
  std::vector<std::size_t> layer_tokens;

  bool operator==(const StepRecord&) const = default;
};

struct PruneSchedule {
  std::string strategy = "none";
  std::string params;
  std::size_t n_layers = 0;
  std::size_t n_prompt = 0;
  std::size_t n_visual = 0;
  std::vector<StepRecord> steps;
  std::uint64_t total_flops = 0;
  std::uint64_t baseline_flops = 0;

  // Mean of the per-step nominal rates; 0 without steps.
  double mean_rate() const;
  // One JSON object on a single line.
  std::string to_json() const;

  bool operator==(const PruneSchedule&) const = default;
};

// Newline-delimited JSON, one object per schedule.
std::string schedules_ndjson(const std::vector<PruneSchedule>& schedules);

}  // namespace dyrate
