#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dyrate/engine/strategy.hpp"

namespace dyrate {

// Decoder dimensions plus the prompt/output shape a cost query assumes.
struct CostConfig {
  std::size_t n_layers = 32;
  std::size_t d_model = 4096;
  std::size_t d_ffn = 11008;
  std::size_t n_sys = 35;
  std::size_t n_visual = 576;
  std::size_t n_ins = 40;
  // Tokens produced; all but the last are fed back as decode steps.
  std::size_t n_generated = 32;

  // 32 layers, d = 4096, m = 11008, 576 visual tokens, a 35-token system
  // prompt, a 40-token instruction and 32 generated tokens.
  static CostConfig llava_7b() { return {}; }

  std::size_t n_prompt() const { return n_sys + n_visual + n_ins; }
  std::size_t decode_steps() const { return n_generated == 0 ? 0 : n_generated - 1; }
  void validate() const;
};

// 4nd^2 + 2n^2 d + 2ndm for n tokens against themselves.
std::uint64_t layer_flops(std::uint64_t n, std::uint64_t d, std::uint64_t m);
// n_q query rows against n_k keys: 4 n_q d^2 + 2 n_q n_k d + 2 n_q d m.
// layer_flops(n, d, m) == layer_flops_rows(n, n, d, m).
std::uint64_t layer_flops_rows(std::uint64_t n_q, std::uint64_t n_k, std::uint64_t d,
                               std::uint64_t m);

// How a decode step is charged. kRecompute runs every layer over all its
// alive tokens (layer_flops(n_alive)), the FastV-style count. kKvCache
// charges only the new row (layer_flops_rows(1, n_alive)).
enum class DecodeAccounting { kRecompute, kKvCache };

struct FlopsReport {
  std::uint64_t total = 0;
  std::uint64_t baseline = 0;
  double ratio_pct = 100.0;
  std::vector<std::uint64_t> per_layer;
};

// Prefill over the full prompt plus every recorded decode step, against the
// same run without pruning. Throws ConfigError when the schedule does not
// match cfg.
FlopsReport schedule_flops(const PruneSchedule& schedule, const CostConfig& cfg,
                           DecodeAccounting accounting = DecodeAccounting::kRecompute);

// Model-free schedule of a strategy under cfg. FastV, fp and dp drop at
// the first decode step; vtw removes every visual token from layer K on;
// dyrate takes one rate per decode step from `dyrate_rates`, applied from
// `prune_layer` with dropped tokens staying dropped.
PruneSchedule analytic_schedule(const PruneStrategy& strategy, const CostConfig& cfg,
                                std::span<const double> dyrate_rates = {},
                                std::size_t prune_layer = 3);

// total FLOPs / budget. Throws ConfigError unless budget > 0.
double latency_proxy(const FlopsReport& report, double flops_per_second);

std::string flops_csv_header();
std::string flops_csv_row(const PruneSchedule& schedule, const FlopsReport& report,
                          double flops_per_second);

}  // namespace dyrate
