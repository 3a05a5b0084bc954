#include "dyrate/workload/task.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "dyrate/error.hpp"
#include "dyrate/numerics/rng.hpp"

namespace dyrate {

void SyntheticTask::validate() const {
  if (n_img < 1) throw ConfigError("task: n_img must be at least 1");
  if (response_length < 1) throw ConfigError("task: response_length must be at least 1");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("task: lambda must be >= 0");
  if (!(salient_fraction > 0.0 && salient_fraction <= 1.0)) {
    throw ConfigError("task: salient_fraction must lie in (0, 1]");
  }
  if (n_sys > static_cast<std::size_t>(vocab::kMarkBase - vocab::kSysBase)) {
    throw ConfigError("task: n_sys exceeds the system vocabulary");
  }
  const std::size_t n_sal = salient_count(*this);
  if (2 * n_sal > n_img) {
    throw ConfigError("task: salient_fraction too large, 2 * floor(s * n_img) must fit in n_img");
  }
  if (n_sal > static_cast<std::size_t>(vocab::kMaxRanks)) {
    throw ConfigError("task: too many salient pairs for the marker vocabulary");
  }
}

std::size_t salient_count(const SyntheticTask& task) {
  const double raw = std::floor(task.salient_fraction * static_cast<double>(task.n_img));
  return std::max<std::size_t>(1, static_cast<std::size_t>(raw));
}

std::size_t needed_visual(const SyntheticTask& task, std::size_t t) {
  const double raw = std::floor(std::exp(-task.lambda * static_cast<double>(t)) *
                                task.salient_fraction * static_cast<double>(task.n_img));
  const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(raw));
  return std::min(n, salient_count(task));
}

Example gen_synthetic(const SyntheticTask& task, std::uint64_t index) {
  task.validate();
  CounterRng rng(task.seed, index);
  const std::size_t n_sal = salient_count(task);

  std::vector<int> values(n_sal);
  for (auto& v : values) v = static_cast<int>(rng.below(vocab::kValues));

  // Slot layout: one entry per pair or noise token, shuffled.
  std::vector<std::ptrdiff_t> items(task.n_img - n_sal, -1);
  for (std::size_t r = 0; r < n_sal; ++r) items[r] = static_cast<std::ptrdiff_t>(r);
  for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[rng.below(i)]);

  Example ex;
  ex.prompt.reserve(task.prompt_length());
  for (std::size_t i = 0; i < task.n_sys; ++i) {
    ex.prompt.push_back(vocab::kSysBase + static_cast<int>(i));
  }
  for (const auto item : items) {
    if (item >= 0) {
      ex.prompt.push_back(vocab::kMarkBase + static_cast<int>(item));
      ex.prompt.push_back(vocab::kValueBase + values[item]);
    } else {
      ex.prompt.push_back(vocab::kNoiseBase + static_cast<int>(rng.below(vocab::kNoise)));
    }
  }
  int op = 0;
  if (task.n_ins > 0) {
    op = static_cast<int>(rng.below(vocab::kOps));
    ex.prompt.push_back(vocab::kOpBase + op);
    for (std::size_t i = 1; i < task.n_ins; ++i) {
      ex.prompt.push_back(vocab::kFillBase + static_cast<int>(rng.below(vocab::kFill)));
    }
  }
  ex.segmentation = TokenSegmentation::from_lengths(task.n_sys, task.n_img, task.n_ins);
  for (std::size_t t = 0; t < task.response_length; ++t) {
    ex.targets.push_back(vocab::kAnswerBase + op * vocab::kValues +
                         values[needed_visual(task, t) - 1]);
  }
  return ex;
}

std::vector<Example> make_dataset(const SyntheticTask& task, std::size_t count,
                                  std::uint64_t first_index) {
  std::vector<Example> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(gen_synthetic(task, first_index + i));
  return out;
}

SyntheticTask task_from_config(const KeyValueConfig& cfg) {
  cfg.require_known({"seed", "n_sys", "n_img", "n_ins", "response_length", "lambda",
                     "salient_fraction"});
  SyntheticTask t;
  t.seed = cfg.get_u64("seed", t.seed);
  t.n_sys = cfg.get_size("n_sys", t.n_sys);
  t.n_img = cfg.get_size("n_img", t.n_img);
  t.n_ins = cfg.get_size("n_ins", t.n_ins);
  t.response_length = cfg.get_size("response_length", t.response_length);
  t.lambda = cfg.get_double("lambda", t.lambda);
  t.salient_fraction = cfg.get_double("salient_fraction", t.salient_fraction);
  t.validate();
  return t;
}

KeyValueConfig task_to_config(const SyntheticTask& task) {
  KeyValueConfig cfg;
  cfg.set("seed", std::to_string(task.seed));
  cfg.set("n_sys", std::to_string(task.n_sys));
  cfg.set("n_img", std::to_string(task.n_img));
  cfg.set("n_ins", std::to_string(task.n_ins));
  cfg.set("response_length", std::to_string(task.response_length));
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", task.lambda);
  cfg.set("lambda", buf);
  std::snprintf(buf, sizeof buf, "%.17g", task.salient_fraction);
  cfg.set("salient_fraction", buf);
  return cfg;
}

SyntheticTask load_task(const std::filesystem::path& path) {
  return task_from_config(KeyValueConfig::load(path));
}

}  // namespace dyrate
