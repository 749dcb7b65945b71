#pragma once

#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "patchlm/model.hpp"

namespace patchlm {

// Short target names expand to every layer ("attn.wq" -> "layers.N.attn.wq");
// full parameter names are accepted as-is.
std::vector<std::string> default_lora_targets();

struct LoraConfig {
  std::size_t rank = 32;
  double alpha = 32.0;
  std::vector<std::string> targets = default_lora_targets();
  double init_std = 0.02;

  double scale() const { return alpha / static_cast<double>(rank); }
  void validate() const;
  // Drops the patch projection from the target list.
  LoraConfig without_patch_projection() const;

  std::string to_json() const;
  static LoraConfig from_json(const std::string& text);
};

// Resolves targets to concrete weight names; ConfigError lists valid names.
std::vector<std::string> resolve_lora_targets(const ModelConfig& model, const LoraConfig& lora);

/// Low-rank pair for a weight W stored as d_in x d_out (inputs multiply on the
/// left). a is r x d_in, b is d_out x r, and the effective weight is
/// W + scale * (b·a)ᵀ.
struct LoraPair {
  Tensor a;
  Tensor b;
};

struct LoraAdapters {
  LoraConfig config;
  std::map<std::string, LoraPair> pairs;

  std::size_t parameter_count() const;
  // Checkpoint names: "<weight>.lora_a" / "<weight>.lora_b".
  std::map<std::string, Tensor> named_tensors() const;
  void assign_named(const std::map<std::string, Tensor>& tensors);
};

std::size_t lora_parameter_count_formula(const ModelConfig& model, const LoraConfig& lora);

// W' = W + scale * (b·a)ᵀ for every adapted weight.
ModelParams merge_adapters(const ModelParams& base, const LoraAdapters& adapters);

/// Frozen base weights plus trainable adapters.
class AdaptedModel {
 public:
  AdaptedModel(ModelParams base, LoraAdapters adapters);

  const ModelParams& base() const { return base_; }
  const LoraAdapters& adapters() const { return adapters_; }
  LoraAdapters& adapters() { return adapters_; }
  bool merged() const { return merged_; }

  // Materializes the merged weights. Allowed once per handle.
  ModelParams merge();

 private:
  ModelParams base_;
  LoraAdapters adapters_;
  bool merged_ = false;
};

// A ~ normal(0, init_std), B = 0.
AdaptedModel attach(ModelParams base, const LoraConfig& config, std::mt19937_64& rng);

void save_adapters(const std::filesystem::path& path, const LoraAdapters& adapters, const ModelConfig& base_config);
// Checks that the stored base config and adapter shapes match `base`.
LoraAdapters load_adapters(const std::filesystem::path& path, const ModelParams& base);

}  // namespace patchlm
