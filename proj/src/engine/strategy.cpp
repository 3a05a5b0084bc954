#include "dyrate/engine/strategy.hpp"

#include <charconv>
#include <cstdio>
#include <json.hpp>
#include <map>

#include "dyrate/error.hpp"

namespace dyrate {
namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::map<std::string, std::string> parse_args(const std::string& text, const std::string& args) {
  std::map<std::string, std::string> out;
  std::size_t at = 0;
  while (at < args.size()) {
    auto comma = args.find(',', at);
    if (comma == std::string::npos) comma = args.size();
    const std::string item = args.substr(at, comma - at);
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("strategy '" + text + "': expected name=value, got '" + item + "'");
    }
    out[item.substr(0, eq)] = item.substr(eq + 1);
    at = comma + 1;
  }
  return out;
}

double take_double(std::map<std::string, std::string>& args, const std::string& key,
                   const std::string& text) {
  const auto it = args.find(key);
  if (it == args.end()) throw ConfigError("strategy '" + text + "': missing " + key);
  double v = 0;
  const auto& s = it->second;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError("strategy '" + text + "': bad value for " + key);
  }
  args.erase(it);
  return v;
}

std::size_t take_size(std::map<std::string, std::string>& args, const std::string& key,
                      const std::string& text) {
  const auto it = args.find(key);
  if (it == args.end()) throw ConfigError("strategy '" + text + "': missing " + key);
  std::size_t v = 0;
  const auto& s = it->second;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError("strategy '" + text + "': bad value for " + key);
  }
  args.erase(it);
  return v;
}

}  // namespace

PruneStrategy PruneStrategy::parse(const std::string& text) {
  const auto colon = text.find(':');
  const std::string head = text.substr(0, colon);
  auto args = parse_args(text, colon == std::string::npos ? "" : text.substr(colon + 1));
  PruneStrategy s;
  if (head == "none") {
    s = none();
  } else if (head == "dyrate") {
    s = dyrate();
  } else if (head == "fastv") {
    s.kind = StrategyKind::kFastV;
    s.k_layer = take_size(args, "K", text);
    s.rate = take_double(args, "R", text);
  } else if (head == "vtw") {
    s = vtw(take_size(args, "K", text));
  } else if (head == "fp") {
    s.kind = StrategyKind::kFixedPrune;
    s.rate = take_double(args, "R", text);
    s.k_layer = take_size(args, "K", text);
  } else if (head == "dp") {
    const double p = take_double(args, "P", text);
    s = depth_prune(p, take_double(args, "R'", text));
  } else {
    throw ConfigError("unknown strategy '" + head + "'");
  }
  if (!args.empty()) {
    throw ConfigError("strategy '" + text + "': unexpected parameter " + args.begin()->first);
  }
  return s;
}

std::string PruneStrategy::name() const {
  switch (kind) {
    case StrategyKind::kNone: return "none";
    case StrategyKind::kDyRate: return "dyrate";
    case StrategyKind::kFastV: return "fastv";
    case StrategyKind::kVtw: return "vtw";
    case StrategyKind::kFixedPrune: return "fp";
    case StrategyKind::kDepthPrune: return "dp";
  }
  return "?";
}

std::string PruneStrategy::params() const {
  switch (kind) {
    case StrategyKind::kNone:
    case StrategyKind::kDyRate: return "";
    case StrategyKind::kFastV: return "K=" + std::to_string(k_layer) + " R=" + fmt(rate);
    case StrategyKind::kVtw: return "K=" + std::to_string(k_layer);
    case StrategyKind::kFixedPrune: return "R=" + fmt(rate) + " K=" + std::to_string(k_layer);
    case StrategyKind::kDepthPrune: return "P=" + fmt(p_prune_4th) + " R'=" + fmt(r_prime);
  }
  return "";
}

std::string PruneStrategy::to_string() const {
  std::string p = params();
  for (auto& c : p) c = c == ' ' ? ',' : c;
  return p.empty() ? name() : name() + ":" + p;
}

void PruneStrategy::validate(std::size_t n_layers) const {
  const auto check_rate = [this](double r, const char* what) {
    if (!(r >= 0.0 && r < 1.0)) {
      throw ConfigError(to_string() + ": " + what + " must lie in [0, 1)");
    }
  };
  switch (kind) {
    case StrategyKind::kFastV:
    case StrategyKind::kFixedPrune: check_rate(rate, "R"); [[fallthrough]];
    case StrategyKind::kVtw:
      if (k_layer < 1 || k_layer > n_layers) {
        throw ConfigError(to_string() + ": K must lie in [1, " + std::to_string(n_layers) + "]");
      }
      break;
    case StrategyKind::kDepthPrune:
      check_rate(p_prune_4th, "P");
      check_rate(r_prime, "R'");
      break;
    case StrategyKind::kNone:
    case StrategyKind::kDyRate: break;
  }
}

double PruneSchedule::mean_rate() const {
  if (steps.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : steps) s += r.rate;
  return s / static_cast<double>(steps.size());
}

std::string PruneSchedule::to_json() const {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& r : steps) {
    records.push_back({{"step", r.step},
                       {"rate", r.rate},
                       {"rate_index", r.rate_index},
                       {"alive_before", r.alive_before},
                       {"alive_after", r.alive_after},
                       {"dropped", r.dropped},
                       {"pi", r.pi},
                       {"layer_tokens", r.layer_tokens}});
  }
  const nlohmann::json j = {{"strategy", strategy},
                            {"params", params},
                            {"n_layers", n_layers},
                            {"n_prompt", n_prompt},
                            {"n_visual", n_visual},
                            {"steps", records},
                            {"totals",
                             {{"flops", total_flops},
                              {"baseline_flops", baseline_flops},
                              {"mean_rate", mean_rate()}}}};
  return j.dump();
}

std::string schedules_ndjson(const std::vector<PruneSchedule>& schedules) {
  std::string out;
  for (const auto& s : schedules) out += s.to_json() + "\n";
  return out;
}

}  // namespace dyrate
