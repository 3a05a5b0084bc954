#include "dyrate/harness/experiment.hpp"

#include <cstdio>
#include <fstream>

#include "dyrate/binary_io.hpp"
#include "dyrate/costing/costing.hpp"
#include "dyrate/error.hpp"

namespace dyrate {
namespace {

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  if (p.empty()) return {};
  const std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::size_t at = 0;
  while (at <= text.size()) {
    auto end = text.find(sep, at);
    if (end == std::string::npos) end = text.size();
    std::string item = text.substr(at, end - at);
    const auto first = item.find_first_not_of(" \t");
    const auto last = item.find_last_not_of(" \t");
    if (first != std::string::npos) out.push_back(item.substr(first, last - first + 1));
    at = end + 1;
  }
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

ModelConfig model_config_from(const KeyValueConfig& s, ModelConfig c) {
  s.require_known({"n_layers", "n_heads", "d_model", "d_ffn", "vocab_size", "max_seq", "seed"});
  c.n_layers = s.get_size("n_layers", c.n_layers);
  c.n_heads = s.get_size("n_heads", c.n_heads);
  c.d_model = s.get_size("d_model", c.d_model);
  c.d_ffn = s.get_size("d_ffn", c.d_ffn);
  c.vocab_size = s.get_size("vocab_size", c.vocab_size);
  c.max_seq = s.get_size("max_seq", c.max_seq);
  c.seed = s.get_u64("seed", c.seed);
  c.validate();
  return c;
}

TrainConfig train_config_from(const KeyValueConfig& s, TrainConfig c) {
  s.require_known({"lr", "steps", "batch", "tau_start", "tau_end", "anneal", "budget",
                   "lambda_b", "seed", "optimizer", "hard", "eval_examples", "log_every"});
  c.lr = s.get_double("lr", c.lr);
  c.steps = s.get_size("steps", c.steps);
  c.batch = s.get_size("batch", c.batch);
  c.tau.start = s.get_double("tau_start", c.tau.start);
  c.tau.end = s.get_double("tau_end", s.has("tau_start") ? c.tau.start : c.tau.end);
  const std::string anneal = s.get_string("anneal", "constant");
  if (anneal == "constant") {
    c.tau.anneal = Anneal::kConstant;
  } else if (anneal == "linear") {
    c.tau.anneal = Anneal::kLinear;
  } else {
    throw ConfigError("train.anneal must be constant or linear");
  }
  c.budget = s.get_double("budget", c.budget);
  c.lambda_b = s.get_double("lambda_b", c.lambda_b);
  c.seed = s.get_u64("seed", c.seed);
  const std::string opt = s.get_string("optimizer", c.optimizer == OptimizerKind::kAdam ? "adam" : "sgd");
  if (opt == "adam") {
    c.optimizer = OptimizerKind::kAdam;
  } else if (opt == "sgd") {
    c.optimizer = OptimizerKind::kSgd;
  } else {
    throw ConfigError("train.optimizer must be adam or sgd");
  }
  c.hard = s.get_bool("hard", c.hard);
  c.eval_examples = s.get_size("eval_examples", c.eval_examples);
  c.log_every = s.get_size("log_every", c.log_every);
  c.validate();
  return c;
}

DecodeConfig decode_config_from(const KeyValueConfig& s, DecodeConfig c) {
  s.require_known({"sampling", "top_p", "seed", "max_new_tokens", "prune_layer", "K",
                   "temperature", "hard", "sample_rate"});
  const std::string sampling = s.get_string("sampling", c.sampling == SamplingKind::kGreedy ? "greedy" : "top_p");
  if (sampling == "greedy") {
    c.sampling = SamplingKind::kGreedy;
  } else if (sampling == "top_p") {
    c.sampling = SamplingKind::kTopP;
  } else {
    throw ConfigError("decode.sampling must be greedy or top_p");
  }
  c.top_p = s.get_double("top_p", c.top_p);
  c.seed = s.get_u64("seed", c.seed);
  c.max_new_tokens = s.get_size("max_new_tokens", c.max_new_tokens);
  c.prune_layer = s.get_size("prune_layer", c.prune_layer);
  c.K = s.get_size("K", c.K);
  c.gumbel.temperature = s.get_double("temperature", c.gumbel.temperature);
  c.gumbel.hard = s.get_bool("hard", c.gumbel.hard);
  c.sample_rate = s.get_bool("sample_rate", c.sample_rate);
  return c;
}

ExperimentSpec ExperimentSpec::from_config(const KeyValueConfig& cfg,
                                           const std::filesystem::path& base_dir) {
  for (const auto& [k, v] : cfg.entries()) {
    const bool sectioned = k.starts_with("task.") || k.starts_with("decode.") || k.starts_with("train.");
    const bool plain = k == "model" || k == "predictor" || k == "strategies" || k == "examples" ||
                       k == "flops_per_second" || k == "out" || k == "schedules";
    if (!sectioned && !plain) throw ConfigError("experiment: unknown key '" + k + "'");
  }
  ExperimentSpec spec;
  spec.model_path = resolve(base_dir, cfg.get_string("model", ""));
  spec.predictor_path = resolve(base_dir, cfg.get_string("predictor", ""));
  for (const auto& s : split(cfg.get_string("strategies", ""), ';')) {
    spec.strategies.push_back(PruneStrategy::parse(s));
  }
  spec.examples = cfg.get_size("examples", spec.examples);
  spec.flops_per_second = cfg.get_double("flops_per_second", spec.flops_per_second);
  spec.out_csv = resolve(base_dir, cfg.get_string("out", ""));
  spec.schedule_out = resolve(base_dir, cfg.get_string("schedules", ""));
  spec.task = task_from_config(cfg.section("task"));
  spec.decode = decode_config_from(cfg.section("decode"));
  spec.train = train_config_from(cfg.section("train"));
  return spec;
}

void ExperimentSpec::validate() const {
  if (strategies.empty()) throw ConfigError("experiment: no strategies");
  if (!(flops_per_second > 0.0)) throw ConfigError("experiment: flops_per_second must be positive");
  task.validate();
  if (model_path.empty() || !std::filesystem::exists(model_path)) {
    throw IoError("experiment: model checkpoint not found: " + model_path.string());
  }
  for (const auto& s : strategies) {
    if (s.kind == StrategyKind::kDyRate &&
        (predictor_path.empty() || !std::filesystem::exists(predictor_path))) {
      throw IoError("experiment: predictor checkpoint not found: " + predictor_path.string());
    }
  }
}

std::vector<ExperimentRow> run_experiment(const ExperimentSpec& spec) {
  spec.validate();
  const ModelParams params = load_model(spec.model_path);
  PredictorParams predictor;
  bool need_predictor = false;
  for (const auto& s : spec.strategies) need_predictor |= s.kind == StrategyKind::kDyRate;
  if (need_predictor) predictor = load_predictor(spec.predictor_path);
  return run_experiment(spec, params, need_predictor ? &predictor : nullptr);
}

std::vector<ExperimentRow> run_experiment(const ExperimentSpec& spec, const ModelParams& params,
                                          const PredictorParams* predictor) {
  if (spec.strategies.empty()) throw ConfigError("experiment: no strategies");
  std::vector<ExperimentRow> rows;
  std::vector<PruneSchedule> schedules;
  for (const auto& s : spec.strategies) {
    const PredictorParams* p = s.kind == StrategyKind::kDyRate ? predictor : nullptr;
    if (s.kind == StrategyKind::kDyRate && !p) {
      throw ConfigError("experiment: dyrate needs a predictor");
    }
    Evaluation ev = evaluate(params, p, spec.task, s, spec.decode, spec.examples);
    FlopsReport total;
    total.total = ev.total_flops;
    rows.push_back({s.name(), s.params(), ev.accuracy, ev.flops_pct,
                    latency_proxy(total, spec.flops_per_second), ev.mean_rate, ev.step_rate});
    for (auto& sch : ev.schedules) schedules.push_back(std::move(sch));
  }
  if (!spec.out_csv.empty()) {
    write_text(spec.out_csv, experiment_csv(rows, objective_description(spec.train)));
  }
  if (!spec.schedule_out.empty()) write_text(spec.schedule_out, schedules_ndjson(schedules));
  return rows;
}

std::string experiment_csv(const std::vector<ExperimentRow>& rows, const std::string& objective) {
  std::string out = "# " + objective + "\n";
  out += "strategy,params,accuracy,flops_pct,latency_proxy,mean_rate\n";
  char buf[320];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%s,%.6f,%.4f,%.6g,%.6f\n", r.strategy.c_str(),
                  r.params.c_str(), r.accuracy, r.flops_pct, r.latency_proxy, r.mean_rate);
    out += buf;
  }
  return out;
}

AttentionTrace teacher_trace(const ModelParams& params, const Example& example) {
  const TeacherBatch tb = teacher_batch({example});
  GradTape tape;
  BoundModel bm(params, tape, false);
  const ForwardResult fr = forward(bm, tb.ids, 1);
  const std::size_t n = tb.length;
  const std::size_t H = params.config.n_heads;
  const std::size_t n_prompt = example.prompt.size();

  AttentionTrace trace;
  trace.n_heads = H;
  trace.n_layers = params.config.n_layers;
  trace.steps = example.targets.size();
  trace.segmentation = example.segmentation;
  if (trace.steps > 1) trace.segmentation.extend_response(trace.steps - 1);
  for (std::size_t s = 0; s < trace.steps; ++s) {
    const std::size_t q = n_prompt - 1 + s;
    for (std::size_t l = 0; l < trace.n_layers; ++l) {
      TraceRecord rec;
      rec.positions.resize(q + 1);
      for (std::size_t j = 0; j <= q; ++j) rec.positions[j] = j;
      rec.weights = Tensor({H, q + 1});
      const auto& att = fr.attention[l];
      for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t j = 0; j <= q; ++j) {
          // f32 storage
          rec.weights.at(h, j) = static_cast<float>(att[(h * n + q) * n + j]);
        }
      }
      trace.records.push_back(std::move(rec));
    }
  }
  return trace;
}

}  // namespace dyrate
