#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dyrate/config.hpp"
#include "dyrate/engine/engine.hpp"
#include "dyrate/harness/train.hpp"
#include "dyrate/workload/task.hpp"
#include "dyrate/workload/trace.hpp"

namespace dyrate {

// Section readers for `model.*`, `train.*` and `decode.*` keys. Unknown
// keys raise ConfigError.
ModelConfig model_config_from(const KeyValueConfig& section, ModelConfig base = {});
TrainConfig train_config_from(const KeyValueConfig& section, TrainConfig base = {});
DecodeConfig decode_config_from(const KeyValueConfig& section, DecodeConfig base = {});

struct ExperimentSpec {
  std::filesystem::path model_path;
  // Required when the strategy list holds dyrate.
  std::filesystem::path predictor_path;
  std::vector<PruneStrategy> strategies;
  SyntheticTask task;
  std::size_t examples = 128;
  DecodeConfig decode;
  TrainConfig train;  // only reported in the CSV header
  double flops_per_second = 1e9;
  std::filesystem::path out_csv;
  std::filesystem::path schedule_out;

  // Keys: model, predictor, strategies (';' separated), examples,
  // flops_per_second, out, schedules, plus task.*, decode.* and train.*
  // sections. Relative paths resolve against base_dir.
  static ExperimentSpec from_config(const KeyValueConfig& cfg,
                                    const std::filesystem::path& base_dir = {});
  // Throws ConfigError for an empty strategy list, IoError for missing files.
  void validate() const;
};

struct ExperimentRow {
  std::string strategy;
  std::string params;
  double accuracy = 0.0;
  double flops_pct = 0.0;
  double latency_proxy = 0.0;
  double mean_rate = 0.0;
  std::vector<double> step_rate;
};

// One row per entry of spec.strategies, in order. Writes out_csv and schedule_out
// when set.
std::vector<ExperimentRow> run_experiment(const ExperimentSpec& spec);
std::vector<ExperimentRow> run_experiment(const ExperimentSpec& spec, const ModelParams& params,
                                          const PredictorParams* predictor);

// A '#' comment line with the objective, then
// strategy,params,accuracy,flops_pct,latency_proxy,mean_rate.
std::string experiment_csv(const std::vector<ExperimentRow>& rows, const std::string& objective);

// Teacher-forced attention of every response query of `example`, one
// record per (step, layer) over all earlier keys.
AttentionTrace teacher_trace(const ModelParams& params, const Example& example);

}  // namespace dyrate
