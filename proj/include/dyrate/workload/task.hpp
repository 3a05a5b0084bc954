#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dyrate/config.hpp"
#include "dyrate/model/segmentation.hpp"

namespace dyrate {

// Retrieval task with a shrinking visual working set.
//
// The img segment holds n_sal (marker, value) pairs at random slots, the
// rest is noise. Marker MARK+r announces that the next token is the value
// of rank r. The instruction opens with an operator token. Response step t
// must emit ANS + op * kValues + value[needed(t) - 1], and
// needed(t) = max(1, floor(exp(-lambda t) * s * n_img)), capped at n_sal,
// never grows: once step t is reached, ranks >= needed(t) are never read
// again. Only the pairs of ranks below needed(t) stay useful.
struct SyntheticTask {
  std::uint64_t seed = 0;
  std::size_t n_sys = 4;
  std::size_t n_img = 32;
  std::size_t n_ins = 4;
  std::size_t response_length = 24;
  double lambda = 0.5;
  double salient_fraction = 0.25;

  // Throws ConfigError. Each salient token needs a marker slot, so
  // 2 * n_sal <= n_img.
  void validate() const;
  std::size_t prompt_length() const { return n_sys + n_img + n_ins; }
  // Prompt plus the teacher-forced response inputs.
  std::size_t sequence_length() const { return prompt_length() + response_length; }
  bool operator==(const SyntheticTask&) const = default;
};

namespace vocab {
inline constexpr int kSysBase = 1;
inline constexpr int kMarkBase = 32;
inline constexpr int kMaxRanks = 128;
inline constexpr int kValueBase = 160;
inline constexpr int kValues = 8;
inline constexpr int kNoiseBase = 168;
inline constexpr int kNoise = 32;
inline constexpr int kOpBase = 200;
inline constexpr int kOps = 4;
inline constexpr int kFillBase = 204;
inline constexpr int kFill = 16;
inline constexpr int kAnswerBase = 220;
// Smallest vocabulary that holds every token.
inline constexpr int kMinVocab = kAnswerBase + kOps * kValues;
}  // namespace vocab

// max(1, floor(s * n_img)).
std::size_t salient_count(const SyntheticTask& task);
// Visual pairs the target at response step t (0-based) depends on.
std::size_t needed_visual(const SyntheticTask& task, std::size_t t);

struct Example {
  std::vector<int> prompt;
  TokenSegmentation segmentation;
  std::vector<int> targets;  // response_length ids
};

// Example `index` of the task's stream; a pure function of (seed, index).
Example gen_synthetic(const SyntheticTask& task, std::uint64_t index = 0);
std::vector<Example> make_dataset(const SyntheticTask& task, std::size_t count,
                                  std::uint64_t first_index = 0);

// Reads the keys seed, n_sys, n_img, n_ins, response_length, lambda and
// salient_fraction, falling back to defaults.
SyntheticTask task_from_config(const KeyValueConfig& cfg);
KeyValueConfig task_to_config(const SyntheticTask& task);
SyntheticTask load_task(const std::filesystem::path& path);

}  // namespace dyrate
