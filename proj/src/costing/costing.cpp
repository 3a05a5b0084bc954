#include "dyrate/costing/costing.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "dyrate/engine/engine.hpp"
#include "dyrate/error.hpp"

namespace dyrate {

void CostConfig::validate() const {
  if (n_layers == 0 || d_model == 0 || d_ffn == 0) {
    throw ConfigError("cost config: layer count and widths must be positive");
  }
  if (n_prompt() == 0) throw ConfigError("cost config: empty prompt");
}

std::uint64_t layer_flops_rows(std::uint64_t n_q, std::uint64_t n_k, std::uint64_t d,
                               std::uint64_t m) {
  return 4 * n_q * d * d + 2 * n_q * n_k * d + 2 * n_q * d * m;
}

std::uint64_t layer_flops(std::uint64_t n, std::uint64_t d, std::uint64_t m) {
  return layer_flops_rows(n, n, d, m);
}

FlopsReport schedule_flops(const PruneSchedule& schedule, const CostConfig& cfg,
                           DecodeAccounting accounting) {
  cfg.validate();
  if (schedule.n_layers != cfg.n_layers || schedule.n_prompt != cfg.n_prompt() ||
      schedule.n_visual != cfg.n_visual) {
    throw ConfigError("schedule does not match cost config (layers " +
                      std::to_string(schedule.n_layers) + "/" + std::to_string(cfg.n_layers) +
                      ", prompt " + std::to_string(schedule.n_prompt) + "/" +
                      std::to_string(cfg.n_prompt()) + ", visual " +
                      std::to_string(schedule.n_visual) + "/" + std::to_string(cfg.n_visual) +
                      ")");
  }
  const std::uint64_t d = cfg.d_model, m = cfg.d_ffn;
  const auto step_cost = [&](std::uint64_t n) {
    return accounting == DecodeAccounting::kRecompute ? layer_flops(n, d, m)
                                                      : layer_flops_rows(1, n, d, m);
  };
  FlopsReport r;
  r.per_layer.assign(cfg.n_layers, layer_flops(cfg.n_prompt(), d, m));
  r.baseline = cfg.n_layers * layer_flops(cfg.n_prompt(), d, m);
  for (const auto& rec : schedule.steps) {
    if (rec.layer_tokens.size() != cfg.n_layers) {
      throw ConfigError("schedule step " + std::to_string(rec.step) + " lacks per-layer counts");
    }
    const std::size_t full = cfg.n_prompt() + rec.step;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const std::size_t n = rec.layer_tokens[l];
      if (n > full || n + cfg.n_visual < full) {
        throw ConfigError("schedule step " + std::to_string(rec.step) + " layer " +
                          std::to_string(l) + ": token count " + std::to_string(n) +
                          " inconsistent with context " + std::to_string(full));
      }
      r.per_layer[l] += step_cost(n);
      r.baseline += step_cost(full);
    }
  }
  for (auto v : r.per_layer) r.total += v;
  r.ratio_pct = 100.0 * static_cast<double>(r.total) / static_cast<double>(r.baseline);
  return r;
}

PruneSchedule analytic_schedule(const PruneStrategy& strategy, const CostConfig& cfg,
                                std::span<const double> dyrate_rates, std::size_t prune_layer) {
  cfg.validate();
  strategy.validate(cfg.n_layers);
  const std::size_t N = cfg.n_visual;
  const std::size_t steps = cfg.decode_steps();
  if (strategy.kind == StrategyKind::kDyRate && dyrate_rates.size() != steps) {
    throw ConfigError("dyrate schedule needs one rate per decode step (" +
                      std::to_string(steps) + ")");
  }
  PruneSchedule s;
  s.strategy = strategy.name();
  s.params = strategy.params();
  s.n_layers = cfg.n_layers;
  s.n_prompt = cfg.n_prompt();
  s.n_visual = N;

  // Dropped visual tokens per layer, carried across steps.
  std::vector<std::size_t> dead(cfg.n_layers, 0);
  for (std::size_t step = 1; step <= steps; ++step) {
    StepRecord rec;
    rec.step = step;
    rec.alive_before = N - dead.back();
    std::vector<std::size_t> target = dead;
    switch (strategy.kind) {
      case StrategyKind::kNone: break;
      case StrategyKind::kFastV:
      case StrategyKind::kFixedPrune: {
        const auto drop = static_cast<std::size_t>(std::floor(strategy.rate * N));
        for (std::size_t l = strategy.k_layer; l < cfg.n_layers; ++l) target[l] = drop;
        rec.rate = strategy.kind == StrategyKind::kFixedPrune || step == 1 ? strategy.rate : 0.0;
        break;
      }
      case StrategyKind::kVtw:
        for (std::size_t l = strategy.k_layer; l < cfg.n_layers; ++l) target[l] = N;
        rec.rate = 1.0;
        break;
      case StrategyKind::kDepthPrune:
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
          const double c = dp_retain_fraction(static_cast<int>(l) + 1, strategy.p_prune_4th,
                                              strategy.r_prime);
          target[l] = dp_drop_count(c, N);
        }
        rec.rate = 1.0 - dp_retain_fraction(static_cast<int>(cfg.n_layers), strategy.p_prune_4th,
                                            strategy.r_prime);
        break;
      case StrategyKind::kDyRate: {
        const double r = dyrate_rates[step - 1];
        const auto drop = static_cast<std::size_t>(std::floor(r * N));
        for (std::size_t l = prune_layer; l < cfg.n_layers; ++l) {
          target[l] = std::max(dead[l], drop);
        }
        rec.rate = r;
        break;
      }
    }
    for (std::size_t l = 0; l < cfg.n_layers; ++l) dead[l] = std::max(dead[l], target[l]);
    rec.alive_after = N - dead.back();
    rec.dropped = rec.alive_before - rec.alive_after;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      rec.layer_tokens.push_back(cfg.n_prompt() + step - dead[l]);
    }
    s.steps.push_back(std::move(rec));
  }
  const FlopsReport r = schedule_flops(s, cfg);
  s.total_flops = r.total;
  s.baseline_flops = r.baseline;
  return s;
}

double latency_proxy(const FlopsReport& report, double flops_per_second) {
  if (!(flops_per_second > 0.0)) throw ConfigError("latency budget must be positive");
  return static_cast<double>(report.total) / flops_per_second;
}

std::string flops_csv_header() { return "strategy,params,total_flops,ratio_pct,proxy_latency\n"; }

std::string flops_csv_row(const PruneSchedule& schedule, const FlopsReport& report,
                          double flops_per_second) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s,%s,%llu,%.4f,%.6g\n", schedule.strategy.c_str(),
                schedule.params.c_str(), static_cast<unsigned long long>(report.total),
                report.ratio_pct, latency_proxy(report, flops_per_second));
  return buf;
}

}  // namespace dyrate
