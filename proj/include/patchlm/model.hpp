#pragma once

#include <cstddef>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "patchlm/autodiff.hpp"
#include "patchlm/patchifier.hpp"
#include "patchlm/tensor.hpp"

namespace patchlm {

struct LoraAdapters;

struct ModelConfig {
  std::size_t hidden = 128;
  std::size_t n_heads = 4;
  std::size_t n_layers = 4;
  std::size_t vocab = 512;
  std::size_t patch_dim = kPatchDim;
  std::size_t ff_multiplier = 4;
  std::size_t max_seq = 4096;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;

  std::size_t head_dim() const { return hidden / n_heads; }
  std::size_t ff_dim() const { return hidden * ff_multiplier; }

  // Throws ConfigError (hidden % heads, odd head_dim, zero sizes).
  void validate() const;

  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);

  bool operator==(const ModelConfig&) const = default;
};

// Canonical parameter names for a config, in a stable order.
std::vector<std::string> parameter_names(const ModelConfig& config);
Shape parameter_shape(const ModelConfig& config, const std::string& name);

// Names of the weight matrices that act as linear maps (LoRA candidates).
std::vector<std::string> linear_map_names(const ModelConfig& config);

// Closed-form total parameter count.
std::size_t parameter_count_formula(const ModelConfig& config);

struct ModelParams {
  ModelConfig config;
  std::map<std::string, Tensor> tensors;

  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  std::size_t parameter_count() const;

  // Shapes and finiteness against the config; throws DimensionError/NumericError.
  void validate() const;
};

// normal(0, 0.02) projections, zero biases, unit gains.
ModelParams init_params(const ModelConfig& config, std::mt19937_64& rng);

// FNV-1a over names, shapes and raw bytes of every tensor.
std::uint64_t fingerprint(const std::map<std::string, Tensor>& tensors);

/// Interleaved patch/text input. Positions are the element indices.
class SequenceInput {
 public:
  struct Element {
    bool is_patch = false;
    std::size_t index = 0;  // token id, or patch row in patch storage
  };

  void push_token(std::size_t id);
  void push_tokens(std::span<const std::size_t> ids);
  void push_patch(std::span<const double> patch);
  // The grid's layout: each patch row followed by `newline_id`.
  void push_grid(const PatchGrid& grid, std::size_t newline_id);

  std::size_t size() const { return elements_.size(); }
  bool empty() const { return elements_.empty(); }
  const Element& operator[](std::size_t i) const { return elements_[i]; }
  std::size_t num_patches() const { return patch_count_; }
  std::span<const double> patch(std::size_t row) const;

  // Element i's token id; throws ContractError for patch elements.
  std::size_t token(std::size_t i) const;

  SequenceInput prefix(std::size_t n) const;

 private:
  std::vector<Element> elements_;
  std::vector<double> patch_data_;
  std::size_t patch_count_ = 0;
};

enum class Trainable { kNone, kBase, kAdapters };

/// Model parameters (and optional LoRA adapters) placed on a graph.
class BoundModel {
 public:
  BoundModel(Graph& graph, const ModelParams& params, const LoraAdapters* adapters = nullptr,
             Trainable trainable = Trainable::kNone);
  // Binds caller-owned vars, one per parameter name; all of them are trainable.
  BoundModel(Graph& graph, const ModelConfig& config, const std::map<std::string, Var>& vars);

  Graph& graph() const { return *graph_; }
  const ModelConfig& config() const { return config_; }
  Var param(const std::string& name) const;

  // x·W for the named weight, plus the adapter delta when one is attached.
  Var linear(Var x, const std::string& weight_name) const;

  // Vars that receive gradients, keyed by checkpoint name.
  const std::map<std::string, Var>& trainable_vars() const { return trainable_; }

 private:
  Graph* graph_;
  ModelConfig config_;
  const LoraAdapters* adapters_;
  std::map<std::string, Var> vars_;
  std::map<std::string, std::pair<Var, Var>> lora_vars_;
  std::map<std::string, Var> trainable_;
};

struct ForwardOptions {
  AttentionKernel kernel = AttentionKernel::kReference;
  std::size_t attention_block = 32;
  bool causal = true;
  std::size_t valid_length = 0;  // 0: no padding
};

// Per-layer, per-head Q/K after layer norm and after the rotary rotation.
struct ForwardTrace {
  struct Head {
    Tensor q_normed, k_normed, q_rotated, k_rotated;
  };
  std::vector<std::vector<Head>> layers;
};

Var embed_sequence(const BoundModel& model, const SequenceInput& input);
Var attention_block(const BoundModel& model, std::size_t layer, Var x, const ForwardOptions& options,
                    ForwardTrace* trace = nullptr);
Var squared_relu_mlp(const BoundModel& model, std::size_t layer, Var x);

// Final-normed hidden states, n x hidden.
Var forward_hidden(const BoundModel& model, const SequenceInput& input, const ForwardOptions& options = {},
                   ForwardTrace* trace = nullptr);

// Logits for every position, n x vocab.
Var forward(const BoundModel& model, const SequenceInput& input, const ForwardOptions& options = {},
            ForwardTrace* trace = nullptr);

// Output head applied only to the given rows of the hidden states.
Var head_rows(const BoundModel& model, Var hidden, std::span<const std::size_t> rows);

Tensor compute_logits(const ModelParams& params, const SequenceInput& input, const ForwardOptions& options = {},
                      const LoraAdapters* adapters = nullptr);

// Appends argmax tokens until `eos` (included in the result) or max_new tokens.
std::vector<std::size_t> decode_greedy(const ModelParams& params, const SequenceInput& prompt, std::size_t max_new,
                                       std::size_t eos, const LoraAdapters* adapters = nullptr,
                                       const ForwardOptions& options = {});

}  // namespace patchlm
