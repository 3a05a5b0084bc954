#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dyrate/model/segmentation.hpp"
#include "dyrate/numerics/tape.hpp"

namespace dyrate {

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_model = 64;
  std::size_t d_ffn = 256;
  std::size_t vocab_size = 512;
  std::size_t max_seq = 512;
  std::uint64_t seed = 0;

  std::size_t d_head() const { return d_model / n_heads; }
  // Throws ConfigError on a zero dimension or d_model % n_heads != 0.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Named parameter tensors in a fixed manifest order:
//   tok_emb, pos_emb,
//   per layer: ln1.gain, ln1.bias, wq, bq, wk, bk, wv, bv, wo, bo,
//              ln2.gain, ln2.bias, w1, b1, w2, b2,
//   lnf.gain, lnf.bias, w_out.
struct ModelParams {
  ModelConfig config;
  std::vector<std::string> names;
  std::vector<Tensor> tensors;

  std::size_t count() const;
  const Tensor& get(const std::string& name) const;
  std::vector<std::uint8_t> bytes() const;
};

// Xavier-uniform weights (a = sqrt(6 / (fan_in + fan_out))), zero biases,
// unit layer-norm gains. Bit-identical for equal configs.
ModelParams init_model(const ModelConfig& config);

// Closed form of the parameter count for a config.
std::size_t parameter_count(const ModelConfig& config);

// Parameters placed on a tape, either as trainable leaves or as constants.
class BoundModel {
 public:
  BoundModel(const ModelParams& params, GradTape& tape, bool trainable);

  struct Layer {
    Var ln1_gain, ln1_bias, wq, bq, wk, bk, wv, bv, wo, bo;
    Var ln2_gain, ln2_bias, w1, b1, w2, b2;
  };

  const ModelConfig& config() const { return *config_; }
  GradTape& tape() const { return *tape_; }
  Var tok_emb, pos_emb, lnf_gain, lnf_bias, w_out;
  std::vector<Layer> layers;
  // In manifest order, parallel to ModelParams::tensors.
  std::vector<Var> all;

 private:
  const ModelConfig* config_;
  GradTape* tape_;
};

// Attention of one query against the keys of every layer.
struct AttentionMaps {
  // Per layer [H, n_keys] post-softmax weights.
  std::vector<Tensor> weights;
  // Per layer, original absolute position of each key.
  std::vector<std::vector<std::size_t>> key_positions;
};

struct LayerCache {
  Tensor keys;    // [n_cached, d_model], head h in columns [h*d_head, (h+1)*d_head)
  Tensor values;  // same layout as keys
  std::vector<std::size_t> positions;
  // Soft deletion: false entries are excluded from attention without being
  // compacted away.
  std::vector<bool> alive;

  std::size_t size() const { return positions.size(); }
};

struct KVCache {
  std::vector<LayerCache> layers;
  // Absolute position the next token will occupy.
  std::size_t next_position = 0;
};

struct StepOutput {
  Tensor logits;  // [vocab]
  AttentionMaps attention;
};

// Per-layer keep weights over the layer's cached entries (before the new
// token is appended). An empty vector keeps every entry. Entries multiply
// the softmax numerators; 0 removes the key.
using PruneMasks = std::vector<std::vector<double>>;

// Inference session over frozen parameters. Holds the parameters as tape
// constants so each step only records its own activations.
class Decoder {
 public:
  explicit Decoder(const ModelParams& params);

  const ModelParams& params() const { return *params_; }

  // Runs the prompt as one causal pass, filling a fresh cache. Returns the
  // logits and attention of the final prompt position.
  StepOutput prefill(std::span<const int> prompt, KVCache& cache);

  // Appends one token. The new query attends to its own key plus every
  // alive cached key, weighted by masks[layer][entry].
  StepOutput decode_step(int token, KVCache& cache, const PruneMasks& masks = {});

 private:
  const ModelParams* params_;
  GradTape tape_;
  BoundModel bound_;
  std::size_t mark_;
};

// Full-sequence pass on a tape. ids holds `batch` sequences of equal length
// n, stacked. masks[l] is an [n, n] or [batch*n, n] keep mask for layer l;
// an invalid Var (or a short vector) selects the plain causal mask. With
// first_layer > 0 the pass starts from start_hidden, the residual stream
// entering that layer.
struct ForwardResult {
  Var logits;  // [batch*n, vocab]
  // Per layer attention weights [batch, H, n, n].
  std::vector<Tensor> attention;
  // Hidden state entering each layer, [batch*n, d_model]; the entry at
  // n_layers is the final residual stream.
  std::vector<Var> hidden;
  // Per layer key/value projections [batch*n, d_model].
  std::vector<Var> keys;
  std::vector<Var> values;
};
ForwardResult forward(const BoundModel& model, std::span<const int> ids,
                      std::size_t batch, const std::vector<Var>& masks = {},
                      std::size_t first_layer = 0, Var start_hidden = {});

// Token plus positional embedding of `batch` stacked sequences.
Var embed(const BoundModel& model, std::span<const int> ids, std::size_t batch);

// Query/key/value projections of a layer for the given hidden states.
struct Projections {
  Var q, k, v;
};
Projections project_qkv(const BoundModel& model, std::size_t layer, Var hidden);

// One pre-norm block: attention over (k, v) with `mask`, then the GELU FFN.
// q, k and v come from project_qkv; hidden is the residual stream of the
// query rows.
struct LayerOutput {
  Var hidden;
  Tensor attention;  // [batch, H, n_q, n_k]
};
LayerOutput apply_layer(const BoundModel& model, std::size_t layer, Var hidden,
                        const Projections& qkv, Var mask, std::size_t batch);

// Final layer norm and vocabulary projection.
Var lm_head(const BoundModel& model, Var hidden);

// Plain-tensor masked attention for a single sequence: q [n_q, d],
// k and v [n_k, d], mask [n_q, n_k]. Returns the output [n_q, d] and the
// weights [H, n_q, n_k].
std::pair<Tensor, Tensor> attention_with_mask(const Tensor& q, const Tensor& k,
                                              const Tensor& v, const Tensor& mask,
                                              std::size_t heads);

// Causal keep mask [n, n].
Tensor causal_mask(std::size_t n);

void save_model(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_model(const std::filesystem::path& path);

}  // namespace dyrate
