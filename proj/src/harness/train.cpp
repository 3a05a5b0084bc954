#include "dyrate/harness/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "dyrate/error.hpp"
#include "dyrate/numerics/ops.hpp"

namespace dyrate {
namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

void check_model_fits_task(const ModelConfig& model, const SyntheticTask& task) {
  model.validate();
  task.validate();
  if (model.vocab_size < static_cast<std::size_t>(vocab::kMinVocab)) {
    throw ConfigError("model vocabulary smaller than the task's " +
                      std::to_string(vocab::kMinVocab) + " tokens");
  }
  if (model.max_seq < task.sequence_length()) {
    throw ConfigError("model max_seq shorter than the task sequence");
  }
}

std::uint64_t stream_start(std::uint64_t seed, std::size_t step, std::size_t batch) {
  return (seed << 32) + static_cast<std::uint64_t>(step) * batch;
}

}  // namespace

double TauSchedule::at(std::size_t step, std::size_t steps) const {
  if (anneal == Anneal::kConstant || steps <= 1) return start;
  const double f = static_cast<double>(step) / static_cast<double>(steps - 1);
  return start + (end - start) * f;
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
  if (batch == 0) throw ConfigError("train: batch must be positive");
  if (!(tau.start > 0.0 && tau.end > 0.0)) throw ConfigError("train: tau must be positive");
  if (!(budget >= 0.0 && budget < 1.0)) throw ConfigError("train: budget must lie in [0, 1)");
  if (!(lambda_b >= 0.0)) throw ConfigError("train: lambda_b must be >= 0");
}

std::string objective_description(const TrainConfig& cfg) {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "objective=cross_entropy + lambda_b*(mean E_pi[r] - B)^2; lambda_b=%g; B=%g; "
                "optimizer=%s; lr=%g; steps=%zu; batch=%zu; tau=%g..%g %s",
                cfg.lambda_b, cfg.budget, cfg.optimizer == OptimizerKind::kAdam ? "adam" : "sgd",
                cfg.lr, cfg.steps, cfg.batch, cfg.tau.start, cfg.tau.end,
                cfg.tau.anneal == Anneal::kConstant ? "constant" : "linear");
  return buf;
}

Optimizer::Optimizer(OptimizerKind kind, double lr, std::vector<Tensor*> params)
    : kind_(kind), lr_(lr), params_(std::move(params)) {
  for (const Tensor* p : params_) {
    m_.push_back(Tensor::zeros_like(*p));
    v_.push_back(Tensor::zeros_like(*p));
  }
}

void Optimizer::step(const std::vector<Tensor>& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto p = params_[i]->data();
    const auto g = grads[i].data();
    if (kind_ == OptimizerKind::kSgd) {
      for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr_ * g[j];
      continue;
    }
    auto m = m_[i].data();
    auto v = v_[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = kBeta1 * m[j] + (1 - kBeta1) * g[j];
      v[j] = kBeta2 * v[j] + (1 - kBeta2) * g[j] * g[j];
      p[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + kAdamEps);
    }
  }
}

Var expected_rate(Var pi, std::span<const double> rates) {
  Var r = pi.tape->constant(Tensor({rates.size()}, std::vector<double>(rates.begin(), rates.end())));
  return ops::dot(ops::reshape(pi, {rates.size()}), r);
}

Var total_loss(Var logits, std::span<const int> targets, const std::vector<Var>& pis,
               std::span<const double> rates, const TrainConfig& cfg) {
  Var ce = ops::cross_entropy(logits, targets);
  if (pis.empty() || cfg.lambda_b == 0.0) return ce;
  std::vector<Var> er;
  er.reserve(pis.size());
  for (Var pi : pis) er.push_back(ops::reshape(expected_rate(pi, rates), {1, 1}));
  Var mean = ops::mean(ops::concat_rows(er));
  Var gap = ops::add_scalar(mean, -cfg.budget);
  return ops::add(ce, ops::scale(ops::mul(gap, gap), cfg.lambda_b));
}

TeacherBatch teacher_batch(const std::vector<Example>& examples) {
  if (examples.empty()) throw ConfigError("empty batch");
  TeacherBatch tb;
  tb.batch = examples.size();
  const std::size_t P = examples[0].prompt.size();
  const std::size_t T = examples[0].targets.size();
  tb.length = P + T - 1;
  for (const auto& ex : examples) {
    if (ex.prompt.size() != P || ex.targets.size() != T) {
      throw ConfigError("batch examples differ in shape");
    }
    tb.ids.insert(tb.ids.end(), ex.prompt.begin(), ex.prompt.end());
    tb.ids.insert(tb.ids.end(), ex.targets.begin(), ex.targets.end() - 1);
    tb.targets.insert(tb.targets.end(), P - 1, -1);
    tb.targets.insert(tb.targets.end(), ex.targets.begin(), ex.targets.end());
  }
  return tb;
}

Evaluation evaluate(const ModelParams& params, const PredictorParams* predictor,
                    const SyntheticTask& task, const PruneStrategy& strategy,
                    const DecodeConfig& decode, std::size_t count, std::uint64_t first) {
  Evaluation ev;
  std::uint64_t baseline = 0;
  std::size_t correct = 0, total = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const Example ex = gen_synthetic(task, first + i);
    DecodeConfig d = decode;
    d.max_new_tokens = task.response_length;
    d.seed = splitmix64(decode.seed + i);
    GenerationResult r = generate(params, predictor, ex.prompt, ex.segmentation, d, strategy,
                                  GenerationMode::kInferHard);
    for (std::size_t t = 0; t < ex.targets.size(); ++t) correct += r.tokens[t] == ex.targets[t];
    total += ex.targets.size();
    ev.total_flops += r.schedule.total_flops;
    baseline += r.schedule.baseline_flops;
    ev.mean_rate += r.schedule.mean_rate();
    if (ev.step_rate.empty()) ev.step_rate.assign(r.schedule.steps.size(), 0.0);
    for (std::size_t s = 0; s < r.schedule.steps.size(); ++s) ev.step_rate[s] += r.schedule.steps[s].rate;
    ev.schedules.push_back(std::move(r.schedule));
  }
  if (count > 0) {
    ev.accuracy = static_cast<double>(correct) / static_cast<double>(total);
    ev.flops_pct = 100.0 * static_cast<double>(ev.total_flops) / static_cast<double>(baseline);
    ev.mean_rate /= static_cast<double>(count);
    for (auto& v : ev.step_rate) v /= static_cast<double>(count);
  }
  return ev;
}

ModelTraining train_toy_model(const ModelConfig& model, const SyntheticTask& task,
                              const TrainConfig& cfg, const ProgressFn& progress) {
  cfg.validate();
  check_model_fits_task(model, task);
  ModelTraining out;
  out.params = init_model(model);
  std::vector<Tensor*> ptrs;
  for (auto& t : out.params.tensors) ptrs.push_back(&t);
  Optimizer opt(cfg.optimizer, cfg.lr, ptrs);

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto examples = make_dataset(task, cfg.batch, stream_start(cfg.seed, step, cfg.batch));
    const TeacherBatch tb = teacher_batch(examples);
    GradTape tape;
    BoundModel bm(out.params, tape, true);
    const ForwardResult fr = forward(bm, tb.ids, tb.batch);
    Var loss = ops::cross_entropy(fr.logits, tb.targets);
    const double lv = loss.value()[0];
    if (!std::isfinite(lv)) {
      throw NumericError("model training diverged at step " + std::to_string(step));
    }
    tape.backward(loss);
    std::vector<Tensor> grads;
    grads.reserve(bm.all.size());
    for (Var v : bm.all) grads.push_back(tape.grad(v));
    opt.step(grads);
    out.loss.push_back(lv);
    if (progress && cfg.log_every && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) {
      progress(step, lv);
    }
  }
  DecodeConfig greedy;
  greedy.prune_layer = 0;
  out.heldout_accuracy =
      evaluate(out.params, nullptr, task, PruneStrategy::none(), greedy, cfg.eval_examples).accuracy;
  return out;
}

Var masked_attention_row(const Tensor& scores, Var mask) {
  const Tensor& m = mask.value();
  const std::size_t H = scores.rows(), n = scores.cols();
  if (m.size() != n) throw ConfigError("mask row must match the score columns");
  Tensor a({H, n});
  Tensor share({H, n});  // exp(s_j - max) / Z for every key
  for (std::size_t h = 0; h < H; ++h) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) {
      if (m[j] > 0.0) mx = std::max(mx, scores.at(h, j));
    }
    if (mx == -INFINITY) throw NumericError("query fully masked");
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (m[j] > 0.0) z += m[j] * std::exp(scores.at(h, j) - mx);
    }
    for (std::size_t j = 0; j < n; ++j) {
      const double u = std::exp(std::min(scores.at(h, j) - mx, 700.0)) / z;
      share.at(h, j) = u;
      a.at(h, j) = m[j] > 0.0 ? m[j] * u : 0.0;
    }
  }
  Tensor a_saved = a;
  return mask.tape->record(
      std::move(a), {mask},
      [mask, H, n, a_saved = std::move(a_saved), share = std::move(share)](
          GradTape& tape, const Tensor& g) {
        if (!tape.requires_grad(mask)) return;
        Tensor& gm = tape.grad_buffer(mask);
        for (std::size_t h = 0; h < H; ++h) {
          double c = 0.0;
          for (std::size_t j = 0; j < n; ++j) c += g.at(h, j) * a_saved.at(h, j);
          for (std::size_t j = 0; j < n; ++j) gm[j] += share.at(h, j) * (g.at(h, j) - c);
        }
      });
}

SoftPass soft_pass(const BoundModel& model, Var weight, Var bias,
                   const std::vector<Example>& examples, std::size_t prune_layer,
                   const GumbelConfig& gumbel, const NoiseFn& noise, const TrainConfig& cfg) {
  const ModelConfig& c = model.config();
  GradTape& tape = model.tape();
  if (prune_layer >= c.n_layers) throw ConfigError("prune_layer outside the model");
  const TeacherBatch tb = teacher_batch(examples);
  const std::size_t B = tb.batch, n = tb.length;
  const std::size_t P = examples[0].prompt.size();
  const std::size_t T = examples[0].targets.size();
  TokenSegmentation seg = examples[0].segmentation;
  if (T > 1) seg.extend_response(T - 1);
  const auto img = seg.find(Segment::kImg);
  if (!img) throw ConfigError("predictor training needs a visual segment");
  const std::size_t img0 = img->start, N = img->size();
  const std::size_t K = weight.value().rows();
  const std::vector<double> rates = rate_set(K);
  const std::size_t H = c.n_heads, dh = c.d_head();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Var h = embed(model, tb.ids, B);
  Var causal = tape.constant(causal_mask(n));
  for (std::size_t l = 0; l < prune_layer; ++l) {
    h = apply_layer(model, l, h, project_qkv(model, l, h), causal, B).hidden;
  }
  const Projections qkv = project_qkv(model, prune_layer, h);
  const Tensor& Q = qkv.q.value();
  const Tensor& Kt = qkv.k.value();

  Tensor select({N, n});
  for (std::size_t j = 0; j < N; ++j) select.at(j, img0 + j) = 1.0;
  Var select_v = tape.constant(std::move(select));
  std::vector<std::size_t> positions(n);
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  const Tensor causal_rows = [&] {
    Tensor t({P, n});
    for (std::size_t q = 0; q < P; ++q) {
      for (std::size_t j = 0; j <= q; ++j) t.at(q, j) = 1.0;
    }
    return t;
  }();

  SoftPass out;
  std::vector<Var> rows;
  for (std::size_t b = 0; b < B; ++b) {
    rows.push_back(tape.constant(causal_rows));
    Var w;  // [1, N] running keep weights of the visual tokens
    Var prev_row;
    for (std::size_t t = 1; t < T; ++t) {
      const std::size_t qp = P + t - 2;
      Var probe_mask = prev_row;
      if (!probe_mask.valid()) {
        Tensor r({1, n});
        for (std::size_t j = 0; j <= qp; ++j) r[j] = 1.0;
        probe_mask = tape.constant(std::move(r));
      }
      Tensor scores({H, n});
      for (std::size_t hh = 0; hh < H; ++hh) {
        const auto q = Q.row(b * n + qp).subspan(hh * dh, dh);
        for (std::size_t j = 0; j <= qp; ++j) {
          const auto k = Kt.row(b * n + j).subspan(hh * dh, dh);
          double s = 0.0;
          for (std::size_t e = 0; e < dh; ++e) s += q[e] * k[e];
          scores.at(hh, j) = s * scale;
        }
      }
      Var att = masked_attention_row(scores, probe_mask);
      Var v = segment_shares(att, positions, seg);
      std::vector<bool> alive(N, true);
      if (w.valid()) {
        for (std::size_t j = 0; j < N; ++j) alive[j] = w.value()[j] > 0.0;
      }
      const CandidateMaskSet cms =
          build_candidate_masks(score_visual_tokens(att.value(), positions, seg), seg, K, alive);
      Var pi = predict_rate_distribution(v, weight, bias);
      const GumbelVar g = gumbel_softmax(pi, gumbel, noise(b, t));
      Var m = mix_masks(g.y, cms);
      Var m_img = ops::reshape(ops::slice_rows(ops::reshape(m, {n, 1}), img0, img0 + N), {1, N});
      w = w.valid() ? ops::mul(w, m_img) : m_img;

      const std::size_t q = P - 1 + t;
      Tensor base({1, n});
      for (std::size_t j = 0; j <= q; ++j) base[j] = j >= img0 && j < img0 + N ? 0.0 : 1.0;
      Var row = ops::add(tape.constant(std::move(base)), ops::matmul(w, select_v));
      rows.push_back(row);
      prev_row = row;
      out.pis.push_back(pi);
      out.choices.push_back(g.index);
      double er = 0.0;
      for (std::size_t k = 0; k < K; ++k) er += pi.value()[k] * rates[k];
      out.expected_rate += er;
    }
  }
  if (!out.pis.empty()) out.expected_rate /= static_cast<double>(out.pis.size());
  Var mask = ops::concat_rows(rows);
  std::vector<Var> masks(c.n_layers);
  for (std::size_t l = prune_layer; l < c.n_layers; ++l) masks[l] = mask;
  const ForwardResult fr = forward(model, tb.ids, B, masks, prune_layer, h);
  out.logits = fr.logits;
  out.loss = total_loss(fr.logits, tb.targets, out.pis, rates, cfg);
  return out;
}

PredictorTraining train_predictor(const ModelParams& frozen, const SyntheticTask& task,
                                  const TrainConfig& cfg, const DecodeConfig& decode,
                                  const ProgressFn& progress) {
  cfg.validate();
  check_model_fits_task(frozen.config, task);
  decode.validate(frozen.config);
  PredictorTraining out;
  out.predictor = init_predictor(decode.K, frozen.config.n_heads);
  Optimizer opt(cfg.optimizer, cfg.lr, {&out.predictor.weight, &out.predictor.bias});
  const std::size_t K = decode.K;

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto examples = make_dataset(task, cfg.batch, stream_start(cfg.seed, step, cfg.batch));
    GradTape tape;
    BoundModel bm(frozen, tape, false);
    Var w = tape.leaf(out.predictor.weight);
    Var b = tape.leaf(out.predictor.bias);
    const std::uint64_t noise_seed = splitmix64(cfg.seed ^ 0x5eedULL) + step;
    const NoiseFn noise = [&](std::size_t ex, std::size_t t) {
      CounterRng rng(noise_seed, ex * 4096 + t);
      return gumbel_noise(K, rng);
    };
    const GumbelConfig g{cfg.tau.at(step, cfg.steps), cfg.hard};
    const SoftPass sp = soft_pass(bm, w, b, examples, decode.prune_layer, g, noise, cfg);
    const double lv = sp.loss.value()[0];
    if (!std::isfinite(lv)) {
      throw NumericError("predictor training diverged at step " + std::to_string(step));
    }
    tape.backward(sp.loss);
    opt.step({tape.grad(w), tape.grad(b)});
    out.loss.push_back(lv);
    out.expected_rate.push_back(sp.expected_rate);
    if (progress && cfg.log_every && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) {
      progress(step, lv);
    }
  }

  // Held-out expected rate per response step.
  const std::size_t T = task.response_length;
  out.step_rate.assign(T > 0 ? T - 1 : 0, 0.0);
  const std::vector<double> rates = rate_set(K);
  std::size_t seen = 0;
  for (std::size_t start = 0; start < cfg.eval_examples; start += cfg.batch) {
    const std::size_t count = std::min(cfg.batch, cfg.eval_examples - start);
    const auto examples = make_dataset(task, count, kHeldOutIndex + start);
    GradTape tape;
    BoundModel bm(frozen, tape, false);
    Var w = tape.constant(out.predictor.weight);
    Var b = tape.constant(out.predictor.bias);
    const NoiseFn noise = [&](std::size_t ex, std::size_t t) {
      CounterRng rng(splitmix64(cfg.seed) ^ kHeldOutIndex, (start + ex) * 4096 + t);
      return gumbel_noise(K, rng);
    };
    const SoftPass sp = soft_pass(bm, w, b, examples, decode.prune_layer,
                                  GumbelConfig{cfg.tau.end, true}, noise, cfg);
    for (std::size_t i = 0; i < sp.pis.size(); ++i) {
      double er = 0.0;
      for (std::size_t k = 0; k < K; ++k) er += sp.pis[i].value()[k] * rates[k];
      out.step_rate[i % (T - 1)] += er;
    }
    seen += count;
  }
  for (auto& v : out.step_rate) v /= static_cast<double>(std::max<std::size_t>(seen, 1));
  if (!out.step_rate.empty()) {
    out.mean_rate = std::accumulate(out.step_rate.begin(), out.step_rate.end(), 0.0) /
                    static_cast<double>(out.step_rate.size());
  }
  return out;
}

}  // namespace dyrate
