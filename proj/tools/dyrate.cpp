// dyrate command-line front end.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "dyrate/config.hpp"
#include "dyrate/costing/costing.hpp"
#include "dyrate/error.hpp"
#include "dyrate/harness/experiment.hpp"
#include "dyrate/harness/train.hpp"
#include "dyrate/workload/trace.hpp"

namespace fs = std::filesystem;
using namespace dyrate;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

KeyValueConfig load_config(const Globals& g) {
  return g.config.empty() ? KeyValueConfig{} : KeyValueConfig::load(g.config);
}

fs::path config_dir(const Globals& g) {
  return g.config.empty() ? fs::path{} : fs::path(g.config).parent_path();
}

void write_or_print(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  if (!out) throw IoError("write failed for " + path);
}

void require_out(const Globals& g, const char* what) {
  if (g.out.empty()) throw ConfigError(std::string(what) + " needs --out");
}

// Only the sections a subcommand understands may appear in its config.
void require_sections(const KeyValueConfig& cfg, std::initializer_list<std::string_view> prefixes) {
  for (const auto& [key, value] : cfg.entries()) {
    bool ok = false;
    for (auto p : prefixes) ok |= key.starts_with(p);
    if (!ok) throw ConfigError("unknown key '" + key + "'");
  }
}

int train_model_cmd(const Globals& g) {
  const KeyValueConfig cfg = load_config(g);
  require_sections(cfg, {"task.", "model.", "train."});
  require_out(g, "train-model");
  const SyntheticTask task = task_from_config(cfg.section("task"));
  ModelConfig model = model_config_from(cfg.section("model"));
  TrainConfig train = train_config_from(cfg.section("train"));
  if (g.seed) {
    model.seed = *g.seed;
    train.seed = *g.seed;
  }
  if (train.log_every == 0) train.log_every = 100;
  std::cerr << "objective: response cross-entropy, " << train.steps << " steps\n";
  const ModelTraining r = train_toy_model(model, task, train, [](std::size_t step, double loss) {
    std::fprintf(stderr, "step %zu loss %.4f\n", step, loss);
  });
  save_model(r.params, g.out);
  std::printf("heldout_accuracy %.4f\nwrote %s\n", r.heldout_accuracy, g.out.c_str());
  return 0;
}

int train_predictor_cmd(const Globals& g, const std::string& model_path) {
  const KeyValueConfig cfg = load_config(g);
  require_sections(cfg, {"task.", "train.", "decode."});
  require_out(g, "train-predictor");
  const SyntheticTask task = task_from_config(cfg.section("task"));
  TrainConfig train = train_config_from(cfg.section("train"));
  const DecodeConfig decode = decode_config_from(cfg.section("decode"));
  if (g.seed) train.seed = *g.seed;
  if (train.log_every == 0) train.log_every = 50;
  const ModelParams frozen = load_model(model_path);
  std::cerr << "objective: " << objective_description(train) << "\n";
  const PredictorTraining r =
      train_predictor(frozen, task, train, decode, [](std::size_t step, double loss) {
        std::fprintf(stderr, "step %zu loss %.4f\n", step, loss);
      });
  save_predictor(r.predictor, g.out);
  std::printf("mean_rate %.4f\nstep_rate", r.mean_rate);
  for (double v : r.step_rate) std::printf(" %.3f", v);
  std::printf("\nwrote %s\n", g.out.c_str());
  return 0;
}

int generate_cmd(const Globals& g, const std::string& model_path, const std::string& predictor_path,
                 const std::string& strategy_text, std::uint64_t index, const std::string& trace_path) {
  const KeyValueConfig cfg = load_config(g);
  require_sections(cfg, {"task.", "decode."});
  const SyntheticTask task = task_from_config(cfg.section("task"));
  DecodeConfig decode = decode_config_from(cfg.section("decode"));
  if (g.seed) decode.seed = *g.seed;
  decode.max_new_tokens = task.response_length;
  const PruneStrategy strategy = PruneStrategy::parse(strategy_text);
  const ModelParams params = load_model(model_path);
  std::optional<PredictorParams> predictor;
  if (strategy.kind == StrategyKind::kDyRate) {
    if (predictor_path.empty()) throw ConfigError("dyrate needs --predictor");
    predictor = load_predictor(predictor_path);
  }
  const Example ex = gen_synthetic(task, index);
  const GenerationResult r = generate(params, predictor ? &*predictor : nullptr, ex.prompt,
                                      ex.segmentation, decode, strategy, GenerationMode::kInferHard);
  std::size_t correct = 0;
  std::printf("generated");
  for (std::size_t i = 0; i < r.tokens.size(); ++i) {
    std::printf(" %d", r.tokens[i]);
    correct += i < ex.targets.size() && r.tokens[i] == ex.targets[i];
  }
  std::printf("\ntarget   ");
  for (int t : ex.targets) std::printf(" %d", t);
  std::printf("\naccuracy %.4f flops_pct %.3f mean_rate %.4f\n",
              static_cast<double>(correct) / static_cast<double>(ex.targets.size()),
              100.0 * static_cast<double>(r.schedule.total_flops) /
                  static_cast<double>(r.schedule.baseline_flops),
              r.schedule.mean_rate());
  if (!g.out.empty()) write_or_print(g.out, schedules_ndjson({r.schedule}));
  if (!trace_path.empty()) {
    write_trace(teacher_trace(params, ex), trace_path);
    std::printf("wrote trace %s\n", trace_path.c_str());
  }
  return 0;
}

int bench_cmd(const Globals& g) {
  if (g.config.empty()) throw ConfigError("bench needs --config");
  ExperimentSpec spec = ExperimentSpec::from_config(load_config(g), config_dir(g));
  if (g.seed) spec.decode.seed = *g.seed;
  if (!g.out.empty()) spec.out_csv = g.out;
  const auto rows = run_experiment(spec);
  if (spec.out_csv.empty()) {
    std::cout << experiment_csv(rows, objective_description(spec.train));
  } else {
    std::printf("wrote %s\n", spec.out_csv.string().c_str());
  }
  return 0;
}

int analyze_trace_cmd(const Globals& g, const std::string& trace_path) {
  const AttentionTrace trace = read_trace(trace_path);
  write_or_print(g.out, share_table_csv(trace_shares(trace)));
  return 0;
}

int flops_cmd(const Globals& g, const std::vector<std::string>& strategies,
              const std::vector<double>& rates, std::size_t prune_layer, double flops_per_second) {
  const KeyValueConfig cfg = load_config(g);
  require_sections(cfg, {"cost."});
  const KeyValueConfig s = cfg.section("cost");
  s.require_known({"n_layers", "d_model", "d_ffn", "n_sys", "n_visual", "n_ins", "n_generated"});
  CostConfig cc = CostConfig::llava_7b();
  cc.n_layers = s.get_size("n_layers", cc.n_layers);
  cc.d_model = s.get_size("d_model", cc.d_model);
  cc.d_ffn = s.get_size("d_ffn", cc.d_ffn);
  cc.n_sys = s.get_size("n_sys", cc.n_sys);
  cc.n_visual = s.get_size("n_visual", cc.n_visual);
  cc.n_ins = s.get_size("n_ins", cc.n_ins);
  cc.n_generated = s.get_size("n_generated", cc.n_generated);
  cc.validate();
  std::vector<std::string> list = strategies;
  if (list.empty()) list = {"none", "fastv:K=3,R=0.5", "fp:R=0.5,K=3", "dp:P=0.3,R'=0.2"};
  std::string csv = flops_csv_header();
  for (const auto& text : list) {
    const PruneStrategy st = PruneStrategy::parse(text);
    std::vector<double> per_step = rates;
    if (st.kind == StrategyKind::kDyRate && per_step.size() == 1) {
      per_step.assign(cc.decode_steps(), rates.front());
    }
    const PruneSchedule sch = analytic_schedule(st, cc, per_step, prune_layer);
    csv += flops_csv_row(sch, schedule_flops(sch, cc), flops_per_second);
  }
  write_or_print(g.out, csv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic visual-token pruning toolkit"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed_value = 0;
  app.add_option("--config", g.config, "key = value config file");
  auto* seed_opt = app.add_option("--seed", seed_value, "seed override");
  app.add_option("--out", g.out, "output path");

  auto* tm = app.add_subcommand("train-model", "train the toy decoder on a synthetic task");

  std::string model_path, predictor_path, strategy = "none", trace_path;
  std::uint64_t index = 0;
  auto* tp = app.add_subcommand("train-predictor", "train the rate predictor on a frozen model");
  tp->add_option("--model", model_path, "model checkpoint")->required();

  auto* gen = app.add_subcommand("generate", "decode one held-out example");
  gen->add_option("--model", model_path, "model checkpoint")->required();
  gen->add_option("--predictor", predictor_path, "predictor checkpoint");
  gen->add_option("--strategy", strategy, "none, dyrate, fastv:K=..,R=.., vtw:K=.., fp:R=..,K=.., dp:P=..,R'=..");
  gen->add_option("--index", index, "example index in the task stream");
  gen->add_option("--trace", trace_path, "also write the teacher-forced attention trace");

  auto* bench = app.add_subcommand("bench", "strategy sweep to CSV");

  std::string trace_in;
  auto* at = app.add_subcommand("analyze-trace", "trace file to segment-share CSV");
  at->add_option("trace", trace_in, "trace file")->required();

  std::vector<std::string> strategies;
  std::vector<double> rates;
  std::size_t prune_layer = 3;
  double flops_per_second = 1e12;
  auto* fl = app.add_subcommand("flops", "analytic FLOPs of pruning strategies");
  fl->add_option("--strategy", strategies, "strategy (repeatable)");
  fl->add_option("--rates", rates, "dyrate rate per decode step, or one constant rate")->delimiter(',');
  fl->add_option("--prune-layer", prune_layer, "first pruned layer for dyrate");
  fl->add_option("--flops-per-second", flops_per_second, "latency proxy budget");

  for (auto* sub : {tm, tp, gen, bench, at, fl}) {
    sub->add_option("--config", g.config, "key = value config file");
    sub->add_option("--seed", seed_value, "seed override")->each([&](const std::string&) {
      g.seed = seed_value;
    });
    sub->add_option("--out", g.out, "output path");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }
  if (*seed_opt) g.seed = seed_value;

  try {
    if (*tm) return train_model_cmd(g);
    if (*tp) return train_predictor_cmd(g, model_path);
    if (*gen) return generate_cmd(g, model_path, predictor_path, strategy, index, trace_path);
    if (*bench) return bench_cmd(g);
    if (*at) return analyze_trace_cmd(g, trace_in);
    if (*fl) return flops_cmd(g, strategies, rates, prune_layer, flops_per_second);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  }
  return 0;
}
