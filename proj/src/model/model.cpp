#include "dyrate/model/model.hpp"

#include <cmath>
#include <cstring>
#include <json.hpp>
#include <numeric>
#include <string>

#include "dyrate/binary_io.hpp"
#include "dyrate/error.hpp"
#include "dyrate/numerics/ops.hpp"
#include "dyrate/numerics/rng.hpp"

namespace dyrate {
namespace {

constexpr std::array<char, 4> kModelMagic = {'D', 'Y', 'C', 'K'};
constexpr std::uint16_t kModelVersion = 1;

struct ParamSpec {
  std::string name;
  std::vector<std::size_t> shape;
  enum class Init { kXavier, kZero, kOne } init;
};

std::vector<ParamSpec> manifest(const ModelConfig& c) {
  using I = ParamSpec::Init;
  const std::size_t d = c.d_model;
  const std::size_t m = c.d_ffn;
  std::vector<ParamSpec> specs = {
      {"tok_emb", {c.vocab_size, d}, I::kXavier},
      {"pos_emb", {c.max_seq, d}, I::kXavier},
  };
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    specs.push_back({p + "ln1.gain", {d}, I::kOne});
    specs.push_back({p + "ln1.bias", {d}, I::kZero});
    for (const char* w : {"q", "k", "v", "o"}) {
      specs.push_back({p + "w" + w, {d, d}, I::kXavier});
      specs.push_back({p + "b" + w, {d}, I::kZero});
    }
    specs.push_back({p + "ln2.gain", {d}, I::kOne});
    specs.push_back({p + "ln2.bias", {d}, I::kZero});
    specs.push_back({p + "w1", {d, m}, I::kXavier});
    specs.push_back({p + "b1", {m}, I::kZero});
    specs.push_back({p + "w2", {m, d}, I::kXavier});
    specs.push_back({p + "b2", {d}, I::kZero});
  }
  specs.push_back({"lnf.gain", {d}, I::kOne});
  specs.push_back({"lnf.bias", {d}, I::kZero});
  specs.push_back({"w_out", {d, c.vocab_size}, I::kXavier});
  return specs;
}

nlohmann::json config_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers}, {"n_heads", c.n_heads},
          {"d_model", c.d_model},   {"d_ffn", c.d_ffn},
          {"vocab_size", c.vocab_size}, {"max_seq", c.max_seq},
          {"seed", c.seed}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.d_ffn = j.at("d_ffn").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_seq = j.at("max_seq").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace

void ModelConfig::validate() const {
  if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_ffn == 0 ||
      vocab_size == 0 || max_seq == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) +
                      " is not divisible by n_heads " + std::to_string(n_heads));
  }
}

std::size_t ModelParams::count() const {
  std::size_t n = 0;
  for (const Tensor& t : tensors) n += t.size();
  return n;
}

const Tensor& ModelParams::get(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return tensors[i];
  }
  throw ConfigError("no parameter named " + name);
}

std::vector<std::uint8_t> ModelParams::bytes() const {
  ByteWriter w;
  for (const Tensor& t : tensors)
    for (double v : t.data()) w.f64(v);
  return w.bytes();
}

ModelParams init_model(const ModelConfig& config) {
  config.validate();
  ModelParams params;
  params.config = config;
  std::uint64_t stream = 0;
  for (const ParamSpec& spec : manifest(config)) {
    Tensor t(spec.shape);
    switch (spec.init) {
      case ParamSpec::Init::kXavier: {
        const double a = std::sqrt(6.0 / static_cast<double>(spec.shape[0] + spec.shape[1]));
        CounterRng rng(config.seed, stream);
        for (double& v : t.data()) v = rng.uniform(-a, a);
        break;
      }
      case ParamSpec::Init::kOne:
        for (double& v : t.data()) v = 1.0;
        break;
      case ParamSpec::Init::kZero:
        break;
    }
    ++stream;
    params.names.push_back(spec.name);
    params.tensors.push_back(std::move(t));
  }
  return params;
}

std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  const std::size_t m = c.d_ffn;
  const std::size_t per_layer = 4 * (d * d + d) + 2 * d * m + m + d + 4 * d;
  return c.vocab_size * d + c.max_seq * d + c.n_layers * per_layer + 2 * d +
         d * c.vocab_size;
}

BoundModel::BoundModel(const ModelParams& params, GradTape& tape, bool trainable)
    : config_(&params.config), tape_(&tape) {
  for (const Tensor& t : params.tensors) all.push_back(tape.leaf(t, trainable));
  std::size_t i = 0;
  tok_emb = all[i++];
  pos_emb = all[i++];
  layers.resize(params.config.n_layers);
  for (Layer& l : layers) {
    l.ln1_gain = all[i++];
    l.ln1_bias = all[i++];
    l.wq = all[i++];
    l.bq = all[i++];
    l.wk = all[i++];
    l.bk = all[i++];
    l.wv = all[i++];
    l.bv = all[i++];
    l.wo = all[i++];
    l.bo = all[i++];
    l.ln2_gain = all[i++];
    l.ln2_bias = all[i++];
    l.w1 = all[i++];
    l.b1 = all[i++];
    l.w2 = all[i++];
    l.b2 = all[i++];
  }
  lnf_gain = all[i++];
  lnf_bias = all[i++];
  w_out = all[i++];
}

std::pair<Tensor, Tensor> attention_with_mask(const Tensor& q, const Tensor& k,
                                              const Tensor& v, const Tensor& mask,
                                              std::size_t heads) {
  GradTape tape;
  ops::AttentionResult r = ops::attention(tape.constant(q), tape.constant(k),
                                          tape.constant(v), tape.constant(mask), heads, 1);
  Tensor w = r.weights.reshaped({heads, q.rows(), k.rows()});
  return {r.out.value(), std::move(w)};
}

Tensor causal_mask(std::size_t n) {
  Tensor m({n, n});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c <= r; ++c) m.at(r, c) = 1.0;
  return m;
}

Projections project_qkv(const BoundModel& model, std::size_t layer, Var hidden) {
  const BoundModel::Layer& p = model.layers.at(layer);
  Var a = ops::layer_norm(hidden, p.ln1_gain, p.ln1_bias);
  return {ops::add_bias(ops::matmul(a, p.wq), p.bq),
          ops::add_bias(ops::matmul(a, p.wk), p.bk),
          ops::add_bias(ops::matmul(a, p.wv), p.bv)};
}

LayerOutput apply_layer(const BoundModel& model, std::size_t layer, Var hidden,
                        const Projections& qkv, Var mask, std::size_t batch) {
  const BoundModel::Layer& p = model.layers.at(layer);
  ops::AttentionResult att =
      ops::attention(qkv.q, qkv.k, qkv.v, mask, model.config().n_heads, batch);
  Var h = ops::add(hidden, ops::add_bias(ops::matmul(att.out, p.wo), p.bo));
  Var f = ops::layer_norm(h, p.ln2_gain, p.ln2_bias);
  f = ops::gelu(ops::add_bias(ops::matmul(f, p.w1), p.b1));
  f = ops::add_bias(ops::matmul(f, p.w2), p.b2);
  return {ops::add(h, f), std::move(att.weights)};
}

Var lm_head(const BoundModel& model, Var hidden) {
  return ops::matmul(ops::layer_norm(hidden, model.lnf_gain, model.lnf_bias),
                     model.w_out);
}

Var embed(const BoundModel& model, std::span<const int> ids, std::size_t batch) {
  const std::size_t n = ids.size() / batch;
  std::vector<int> positions(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) positions[i] = static_cast<int>(i % n);
  return ops::add(ops::embedding(model.tok_emb, ids), ops::embedding(model.pos_emb, positions));
}

ForwardResult forward(const BoundModel& model, std::span<const int> ids,
                      std::size_t batch, const std::vector<Var>& masks,
                      std::size_t first_layer, Var start_hidden) {
  const ModelConfig& c = model.config();
  GradTape& tape = model.tape();
  if (batch == 0 || ids.size() % batch != 0) {
    throw ConfigError("forward: ids do not split into the batch");
  }
  const std::size_t n = ids.size() / batch;
  if (n > c.max_seq) {
    throw ConfigError("sequence length " + std::to_string(n) + " exceeds max_seq " +
                      std::to_string(c.max_seq));
  }
  ForwardResult result;
  result.attention.resize(c.n_layers);
  result.hidden.resize(c.n_layers + 1);
  result.keys.resize(c.n_layers);
  result.values.resize(c.n_layers);

  Var h = start_hidden;
  if (first_layer == 0) {
    h = embed(model, ids, batch);
  } else if (!h.valid()) {
    throw ConfigError("forward: starting past layer 0 needs a hidden state");
  }
  Var causal = tape.constant(causal_mask(n));
  for (std::size_t l = first_layer; l < c.n_layers; ++l) {
    result.hidden[l] = h;
    Var mask = l < masks.size() && masks[l].valid() ? masks[l] : causal;
    Projections qkv = project_qkv(model, l, h);
    result.keys[l] = qkv.k;
    result.values[l] = qkv.v;
    LayerOutput out = apply_layer(model, l, h, qkv, mask, batch);
    h = out.hidden;
    result.attention[l] = std::move(out.attention);
  }
  result.hidden[c.n_layers] = h;
  result.logits = lm_head(model, h);
  return result;
}

Decoder::Decoder(const ModelParams& params)
    : params_(&params), bound_(params, tape_, false), mark_(tape_.size()) {}

StepOutput Decoder::prefill(std::span<const int> prompt, KVCache& cache) {
  const ModelConfig& c = params_->config;
  if (prompt.empty()) throw ConfigError("prefill needs at least one token");
  const std::size_t n = prompt.size();
  ForwardResult fr = forward(bound_, prompt, 1);
  cache = KVCache{};
  cache.layers.resize(c.n_layers);
  StepOutput out;
  out.attention.weights.resize(c.n_layers);
  out.attention.key_positions.resize(c.n_layers);
  std::vector<std::size_t> positions(n);
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    LayerCache& lc = cache.layers[l];
    lc.keys = fr.keys[l].value();
    lc.values = fr.values[l].value();
    lc.positions = positions;
    lc.alive.assign(n, true);
    Tensor w({c.n_heads, n});
    const Tensor& full = fr.attention[l];
    for (std::size_t h = 0; h < c.n_heads; ++h)
      for (std::size_t j = 0; j < n; ++j) w.at(h, j) = full[(h * n + (n - 1)) * n + j];
    out.attention.weights[l] = std::move(w);
    out.attention.key_positions[l] = positions;
  }
  auto last = fr.logits.value().row(n - 1);
  out.logits = Tensor({c.vocab_size}, std::vector<double>(last.begin(), last.end()));
  cache.next_position = n;
  tape_.truncate(mark_);
  return out;
}

StepOutput Decoder::decode_step(int token, KVCache& cache, const PruneMasks& masks) {
  const ModelConfig& c = params_->config;
  if (cache.layers.size() != c.n_layers) throw ConfigError("cache has wrong layer count");
  if (!masks.empty() && masks.size() != c.n_layers) {
    throw ConfigError("prune masks must cover every layer");
  }
  const std::size_t pos = cache.next_position;
  if (pos >= c.max_seq) {
    throw ConfigError("sequence overflow: position " + std::to_string(pos) +
                      " reaches max_seq " + std::to_string(c.max_seq));
  }
  const int tok[] = {token};
  const int at[] = {static_cast<int>(pos)};
  Var h = ops::add(ops::embedding(bound_.tok_emb, tok), ops::embedding(bound_.pos_emb, at));

  StepOutput out;
  out.attention.weights.resize(c.n_layers);
  out.attention.key_positions.resize(c.n_layers);
  const std::size_t d = c.d_model;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    LayerCache& lc = cache.layers[l];
    const std::size_t n = lc.size();
    if (!masks.empty() && !masks[l].empty() && masks[l].size() != n) {
      throw ConfigError("prune mask for layer " + std::to_string(l) + " has " +
                        std::to_string(masks[l].size()) + " entries, cache has " +
                        std::to_string(n));
    }
    Projections qkv = project_qkv(bound_, l, h);
    const auto append = [d, n](const Tensor& old, const Tensor& row) {
      std::vector<double> data(old.values());
      data.insert(data.end(), row.data().begin(), row.data().end());
      return Tensor({n + 1, d}, std::move(data));
    };
    lc.keys = append(lc.keys, qkv.k.value());
    lc.values = append(lc.values, qkv.v.value());
    lc.positions.push_back(pos);
    lc.alive.push_back(true);

    Tensor keep({1, n + 1});
    for (std::size_t j = 0; j < n; ++j) {
      const double m = masks.empty() || masks[l].empty() ? 1.0 : masks[l][j];
      keep[j] = lc.alive[j] ? m : 0.0;
    }
    keep[n] = 1.0;
    Projections cached{qkv.q, tape_.constant(lc.keys), tape_.constant(lc.values)};
    LayerOutput lo = apply_layer(bound_, l, h, cached, tape_.constant(std::move(keep)), 1);
    h = lo.hidden;
    out.attention.weights[l] = lo.attention.reshaped({c.n_heads, n + 1});
    out.attention.key_positions[l] = lc.positions;
  }
  out.logits = lm_head(bound_, h).value().reshaped({c.vocab_size});
  cache.next_position = pos + 1;
  tape_.truncate(mark_);
  return out;
}

void save_model(const ModelParams& params, const std::filesystem::path& path) {
  nlohmann::json header;
  header["format_version"] = kModelVersion;
  header["config"] = config_json(params.config);
  nlohmann::json manifest_json = nlohmann::json::array();
  for (std::size_t i = 0; i < params.names.size(); ++i) {
    manifest_json.push_back({{"name", params.names[i]}, {"shape", params.tensors[i].shape()}});
  }
  header["parameters"] = manifest_json;
  write_file(path, make_container(kModelMagic, kModelVersion, header.dump(), params.bytes()));
}

ModelParams load_model(const std::filesystem::path& path) {
  Container c = parse_container(read_file(path), kModelMagic,
                                "not a model checkpoint: " + path.string());
  if (c.version != kModelVersion) {
    throw IoError("unsupported model checkpoint version " + std::to_string(c.version));
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(c.header);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  ModelParams params;
  try {
    params = init_model(config_from_json(header.at("config")));
    const auto& entries = header.at("parameters");
    if (entries.size() != params.names.size()) throw IoError("parameter manifest mismatch");
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].at("name").get<std::string>() != params.names[i] ||
          entries[i].at("shape").get<std::vector<std::size_t>>() != params.tensors[i].shape()) {
        throw IoError("parameter manifest mismatch at " + params.names[i]);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  ByteReader r(c.bytes, c.payload_offset);
  r.set_truncated_message("truncated payload");
  for (Tensor& t : params.tensors)
    for (double& v : t.data()) v = r.f64();
  if (r.remaining() != 0) throw IoError("trailing bytes in " + path.string());
  return params;
}

}  // namespace dyrate
