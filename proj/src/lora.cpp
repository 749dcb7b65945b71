#include "patchlm/lora.hpp"

#include <json.hpp>

#include <algorithm>
#include <set>

#include "patchlm/checkpoint.hpp"
#include "patchlm/errors.hpp"

namespace patchlm {

using nlohmann::json;

std::vector<std::string> default_lora_targets() {
  return {"attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.up", "mlp.down", "output_head", "patch_projection.weight"};
}

void LoraConfig::validate() const {
  if (rank == 0) throw ConfigError("lora: rank must be >= 1");
  if (!(alpha > 0.0)) throw ConfigError("lora: alpha must be positive");
  if (targets.empty()) throw ConfigError("lora: target list is empty");
}

LoraConfig LoraConfig::without_patch_projection() const {
  LoraConfig out = *this;
  std::erase(out.targets, std::string("patch_projection.weight"));
  return out;
}

std::string LoraConfig::to_json() const {
  return json{{"rank", rank}, {"alpha", alpha}, {"targets", targets}, {"init_std", init_std}}.dump();
}

LoraConfig LoraConfig::from_json(const std::string& text) {
  LoraConfig c;
  try {
    const json j = json::parse(text);
    c.rank = j.value("rank", c.rank);
    c.alpha = j.value("alpha", c.alpha);
    c.targets = j.value("targets", c.targets);
    c.init_std = j.value("init_std", c.init_std);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("lora config JSON: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<std::string> resolve_lora_targets(const ModelConfig& model, const LoraConfig& lora) {
  lora.validate();
  const auto linear = linear_map_names(model);
  std::set<std::string> chosen;
  for (const auto& target : lora.targets) {
    bool matched = false;
    for (const auto& name : linear) {
      const bool per_layer = name.size() > target.size() && name.rfind("layers.", 0) == 0 &&
                             name.compare(name.size() - target.size(), target.size(), target) == 0 &&
                             name[name.size() - target.size() - 1] == '.';
      if (name == target || per_layer) {
        chosen.insert(name);
        matched = true;
      }
    }
    if (!matched) {
      std::string valid = "attn.wq, attn.wk, attn.wv, attn.wo, mlp.up, mlp.down";
      for (const auto& name : linear) valid += ", " + name;
      throw ConfigError("unknown LoRA target '" + target + "'; valid names: " + valid);
    }
  }
  std::vector<std::string> out;
  for (const auto& name : linear) {
    if (chosen.contains(name)) out.push_back(name);
  }
  return out;
}

std::size_t LoraAdapters::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : pairs) n += p.a.size() + p.b.size();
  return n;
}

std::map<std::string, Tensor> LoraAdapters::named_tensors() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, p] : pairs) {
    out.emplace(name + ".lora_a", p.a);
    out.emplace(name + ".lora_b", p.b);
  }
  return out;
}

void LoraAdapters::assign_named(const std::map<std::string, Tensor>& tensors) {
  for (auto& [name, p] : pairs) {
    auto a = tensors.find(name + ".lora_a");
    auto b = tensors.find(name + ".lora_b");
    if (a != tensors.end()) {
      if (a->second.shape() != p.a.shape()) throw DimensionError("adapter shape mismatch for " + name + ".lora_a");
      p.a = a->second;
    }
    if (b != tensors.end()) {
      if (b->second.shape() != p.b.shape()) throw DimensionError("adapter shape mismatch for " + name + ".lora_b");
      p.b = b->second;
    }
  }
}

std::size_t lora_parameter_count_formula(const ModelConfig& model, const LoraConfig& lora) {
  std::size_t total = 0;
  for (const auto& name : resolve_lora_targets(model, lora)) {
    const Shape s = parameter_shape(model, name);
    total += lora.rank * (s[0] + s[1]);
  }
  return total;
}

ModelParams merge_adapters(const ModelParams& base, const LoraAdapters& adapters) {
  ModelParams out = base;
  const double s = adapters.config.scale();
  for (const auto& [name, p] : adapters.pairs) {
    // (b·a)ᵀ = aᵀ·bᵀ, shaped d_in x d_out like the stored weight.
    kernels::add_inplace(out.at(name), kernels::matmul_tn(p.a, kernels::transpose(p.b)), s);
  }
  return out;
}

AdaptedModel::AdaptedModel(ModelParams base, LoraAdapters adapters)
    : base_(std::move(base)), adapters_(std::move(adapters)) {}

ModelParams AdaptedModel::merge() {
  if (merged_) throw ContractError("adapters on this handle were already merged");
  merged_ = true;
  return merge_adapters(base_, adapters_);
}

AdaptedModel attach(ModelParams base, const LoraConfig& config, std::mt19937_64& rng) {
  base.validate();
  LoraAdapters adapters{config, {}};
  for (const auto& name : resolve_lora_targets(base.config, config)) {
    const Shape s = parameter_shape(base.config, name);
    const std::size_t d_in = s[0], d_out = s[1];
    adapters.pairs.emplace(name, LoraPair{Tensor::normal({config.rank, d_in}, config.init_std, rng),
                                          Tensor::zeros({d_out, config.rank})});
  }
  return AdaptedModel(std::move(base), std::move(adapters));
}

void save_adapters(const std::filesystem::path& path, const LoraAdapters& adapters, const ModelConfig& base_config) {
  const json meta{{"base", json::parse(base_config.to_json())}, {"lora", json::parse(adapters.config.to_json())}};
  write_checkpoint(path, Checkpoint{kCheckpointVersion, meta.dump(), adapters.named_tensors()});
}

LoraAdapters load_adapters(const std::filesystem::path& path, const ModelParams& base) {
  Checkpoint ckpt = read_checkpoint(path);
  json meta;
  try {
    meta = json::parse(ckpt.config_json);
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": adapter metadata is not JSON");
  }
  if (!meta.contains("base") || !meta.contains("lora")) throw IoError(path.string() + ": not an adapter checkpoint");
  const ModelConfig stored = ModelConfig::from_json(meta["base"].dump());
  if (!(stored == base.config)) {
    throw ConfigError("adapter checkpoint was built for base config " + stored.to_json() + ", got " +
                      base.config.to_json());
  }
  LoraAdapters adapters{LoraConfig::from_json(meta["lora"].dump()), {}};
  for (const auto& name : resolve_lora_targets(base.config, adapters.config)) {
    auto a = ckpt.tensors.find(name + ".lora_a");
    auto b = ckpt.tensors.find(name + ".lora_b");
    if (a == ckpt.tensors.end() || b == ckpt.tensors.end()) throw IoError("adapter checkpoint lacks " + name);
    const Shape s = parameter_shape(base.config, name);
    if (a->second.shape() != Shape{adapters.config.rank, s[0]} ||
        b->second.shape() != Shape{s[1], adapters.config.rank}) {
      throw DimensionError("adapter shapes for " + name + " do not match the base weight " + shape_to_string(s));
    }
    adapters.pairs.emplace(name, LoraPair{a->second, b->second});
  }
  return adapters;
}

}  // namespace patchlm
