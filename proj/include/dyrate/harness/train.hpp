#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dyrate/engine/engine.hpp"
#include "dyrate/model/model.hpp"
#include "dyrate/pruner/pruner.hpp"
#include "dyrate/workload/task.hpp"

namespace dyrate {

enum class Anneal { kConstant, kLinear };

struct TauSchedule {
  double start = 1.0;
  double end = 1.0;
  Anneal anneal = Anneal::kConstant;

  // Temperature at `step` of `steps`.
  double at(std::size_t step, std::size_t steps) const;
};

enum class OptimizerKind { kSgd, kAdam };

struct TrainConfig {
  double lr = 1e-3;
  std::size_t steps = 2000;
  std::size_t batch = 16;
  TauSchedule tau;
  // Desired mean drop fraction B.
  double budget = 0.0;
  double lambda_b = 1.0;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  // Straight-through hard samples during predictor training.
  bool hard = true;
  // Held-out examples scored after training.
  std::size_t eval_examples = 128;
  // Progress callback period in steps; 0 disables it.
  std::size_t log_every = 0;

  // Throws ConfigError.
  void validate() const;
};

// Human-readable statement of the objective, written into report headers.
std::string objective_description(const TrainConfig& cfg);

// Adam (beta 0.9 / 0.999, eps 1e-8) or plain SGD over a fixed set of tensors.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr, std::vector<Tensor*> params);
  void step(const std::vector<Tensor>& grads);

 private:
  OptimizerKind kind_;
  double lr_;
  std::vector<Tensor*> params_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

// sum_k pi_k r_k.
Var expected_rate(Var pi, std::span<const double> rates);

// cross_entropy(logits, targets) + lambda_B (mean_t E_pi_t[r] - B)^2, the
// budget term on the soft distributions. An empty pi list drops the term.
Var total_loss(Var logits, std::span<const int> targets, const std::vector<Var>& pis,
               std::span<const double> rates, const TrainConfig& cfg);

// Decoder inputs and targets for teacher forcing: prompt followed by all
// but the last target; targets at the response positions, -1 elsewhere.
struct TeacherBatch {
  std::vector<int> ids;
  std::vector<int> targets;
  std::size_t batch = 0;
  std::size_t length = 0;
};
TeacherBatch teacher_batch(const std::vector<Example>& examples);

// First example index of the held-out range of a task stream.
inline constexpr std::uint64_t kHeldOutIndex = std::uint64_t{1} << 40;

using ProgressFn = std::function<void(std::size_t step, double loss)>;

struct ModelTraining {
  ModelParams params;
  std::vector<double> loss;
  double heldout_accuracy = 0.0;
};

// Response-token cross-entropy on batches drawn from the task stream.
// Throws NumericError naming the step when the loss stops being finite.
ModelTraining train_toy_model(const ModelConfig& model, const SyntheticTask& task,
                              const TrainConfig& cfg, const ProgressFn& progress = {});

struct Evaluation {
  double accuracy = 0.0;   // fraction of response tokens equal to the targets
  double flops_pct = 0.0;  // aggregate FLOPs over the aggregate baseline
  double mean_rate = 0.0;  // mean of the schedules' nominal rates
  std::uint64_t total_flops = 0;
  // Mean nominal rate per decode step across examples.
  std::vector<double> step_rate;
  std::vector<PruneSchedule> schedules;
};

// Free-running generation of the held-out examples [first, first + count).
Evaluation evaluate(const ModelParams& params, const PredictorParams* predictor,
                    const SyntheticTask& task, const PruneStrategy& strategy,
                    const DecodeConfig& decode, std::size_t count,
                    std::uint64_t first = kHeldOutIndex);

// Teacher-forced soft-mask pass used to train the predictor. Layers below
// prune_layer run once; at every response step the probe row of the
// previous query at prune_layer (under the masks chosen so far) yields
// features and importance, the predictor picks a rate through
// gumbel_softmax, and the mixed mask joins the running keep weights of the
// later queries. Layers from prune_layer on then run with these per-row
// masks.
struct SoftPass {
  Var loss;
  Var logits;
  std::vector<Var> pis;        // per (example, step)
  std::vector<std::size_t> choices;
  double expected_rate = 0.0;  // mean over pis
};
// noise(example, step) supplies the Gumbel noise of each decision.
using NoiseFn = std::function<std::vector<double>(std::size_t example, std::size_t step)>;
SoftPass soft_pass(const BoundModel& model, Var weight, Var bias,
                   const std::vector<Example>& examples, std::size_t prune_layer,
                   const GumbelConfig& gumbel, const NoiseFn& noise, const TrainConfig& cfg);

// Attention weights [H, n] of one query with keep weights `mask` [1, n]
// multiplying the softmax numerators, given its pre-softmax scores [H, n].
// Differentiable in the mask; keys with mask <= 0 get exactly 0.
Var masked_attention_row(const Tensor& scores, Var mask);

struct PredictorTraining {
  PredictorParams predictor;
  std::vector<double> loss;
  std::vector<double> expected_rate;  // per training step
  // Mean E_pi[r] per response step on held-out teacher-forced batches.
  std::vector<double> step_rate;
  double mean_rate = 0.0;
};

// Frozen-model predictor training. decode supplies prune_layer and K.
PredictorTraining train_predictor(const ModelParams& frozen, const SyntheticTask& task,
                                  const TrainConfig& cfg, const DecodeConfig& decode,
                                  const ProgressFn& progress = {});

}  // namespace dyrate
