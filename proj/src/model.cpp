#include "patchlm/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstring>
#include <numeric>

#include "patchlm/errors.hpp"
#include "patchlm/lora.hpp"

namespace patchlm {

using nlohmann::json;

void ModelConfig::validate() const {
  if (hidden == 0 || n_heads == 0 || n_layers == 0 || vocab == 0 || patch_dim == 0 || ff_multiplier == 0 ||
      max_seq == 0) {
    throw ConfigError("model config: all sizes must be positive");
  }
  if (hidden % n_heads != 0) {
    throw ConfigError("model config: hidden " + std::to_string(hidden) + " not divisible by n_heads " +
                      std::to_string(n_heads));
  }
  if (head_dim() % 2 != 0) {
    throw ConfigError("model config: head_dim " + std::to_string(head_dim()) + " must be even for rotary pairs");
  }
  if (rope_base <= 0.0 || norm_eps <= 0.0) throw ConfigError("model config: rope_base and norm_eps must be positive");
}

std::string ModelConfig::to_json() const {
  return json{{"hidden", hidden},       {"n_heads", n_heads},   {"n_layers", n_layers},
              {"vocab", vocab},         {"patch_dim", patch_dim}, {"ff_multiplier", ff_multiplier},
              {"max_seq", max_seq},     {"rope_base", rope_base}, {"norm_eps", norm_eps}}
      .dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  ModelConfig c;
  try {
    const json j = json::parse(text);
    c.hidden = j.value("hidden", c.hidden);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.vocab = j.value("vocab", c.vocab);
    c.patch_dim = j.value("patch_dim", c.patch_dim);
    c.ff_multiplier = j.value("ff_multiplier", c.ff_multiplier);
    c.max_seq = j.value("max_seq", c.max_seq);
    c.rope_base = j.value("rope_base", c.rope_base);
    c.norm_eps = j.value("norm_eps", c.norm_eps);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config JSON: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

std::string layer_prefix(std::size_t layer) { return "layers." + std::to_string(layer) + "."; }

}  // namespace

std::vector<std::string> parameter_names(const ModelConfig& config) {
  std::vector<std::string> names = {"patch_projection.weight", "patch_projection.bias", "token_embedding"};
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const std::string p = layer_prefix(l);
    for (const char* suffix :
         {"attn_norm.gain", "attn_norm.bias", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "attn.q_norm.gain",
          "attn.q_norm.bias", "attn.k_norm.gain", "attn.k_norm.bias", "mlp_norm.gain", "mlp_norm.bias", "mlp.up",
          "mlp.down"}) {
      names.push_back(p + suffix);
    }
  }
  names.insert(names.end(), {"final_norm.gain", "final_norm.bias", "output_head"});
  return names;
}

Shape parameter_shape(const ModelConfig& c, const std::string& name) {
  auto ends_with = [&](const char* s) {
    const std::size_t n = std::strlen(s);
    return name.size() >= n && name.compare(name.size() - n, n, s) == 0;
  };
  if (name == "patch_projection.weight") return {c.patch_dim, c.hidden};
  if (name == "patch_projection.bias") return {c.hidden};
  if (name == "token_embedding") return {c.vocab, c.hidden};
  if (name == "output_head") return {c.hidden, c.vocab};
  if (name == "final_norm.gain" || name == "final_norm.bias") return {c.hidden};
  if (name.rfind("layers.", 0) == 0) {
    if (ends_with("attn.q_norm.gain") || ends_with("attn.q_norm.bias") || ends_with("attn.k_norm.gain") ||
        ends_with("attn.k_norm.bias")) {
      return {c.head_dim()};
    }
    if (ends_with("norm.gain") || ends_with("norm.bias")) return {c.hidden};
    if (ends_with("attn.wq") || ends_with("attn.wk") || ends_with("attn.wv") || ends_with("attn.wo")) {
      return {c.hidden, c.hidden};
    }
    if (ends_with("mlp.up")) return {c.hidden, c.ff_dim()};
    if (ends_with("mlp.down")) return {c.ff_dim(), c.hidden};
  }
  throw ConfigError("unknown parameter name '" + name + "'");
}

std::vector<std::string> linear_map_names(const ModelConfig& config) {
  std::vector<std::string> names = {"patch_projection.weight"};
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const std::string p = layer_prefix(l);
    for (const char* suffix : {"attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.up", "mlp.down"}) {
      names.push_back(p + suffix);
    }
  }
  names.push_back("output_head");
  return names;
}

std::size_t parameter_count_formula(const ModelConfig& c) {
  const std::size_t h = c.hidden, v = c.vocab, hd = c.head_dim(), ff = c.ff_dim();
  const std::size_t per_layer = 4 * h * h      // wq, wk, wv, wo
                                + 2 * 2 * hd   // q/k norm gain+bias
                                + 2 * h * ff   // mlp up/down
                                + 2 * 2 * h;   // attn/mlp pre-norms
  return (c.patch_dim + 1) * h + v * h + c.n_layers * per_layer + 2 * h + h * v;
}

const Tensor& ModelParams::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ContractError("missing parameter '" + name + "'");
  return it->second;
}

Tensor& ModelParams::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ContractError("missing parameter '" + name + "'");
  return it->second;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors) n += t.size();
  return n;
}

void ModelParams::validate() const {
  config.validate();
  const auto names = parameter_names(config);
  if (names.size() != tensors.size()) {
    throw DimensionError("parameter set has " + std::to_string(tensors.size()) + " tensors, config expects " +
                         std::to_string(names.size()));
  }
  for (const auto& name : names) {
    const Tensor& t = at(name);
    const Shape expected = parameter_shape(config, name);
    if (t.shape() != expected) {
      throw DimensionError("parameter '" + name + "' has shape " + shape_to_string(t.shape()) + ", config expects " +
                           shape_to_string(expected));
    }
    if (!all_finite(t)) throw NumericError("parameter '" + name + "' has non-finite entries");
  }
}

ModelParams init_params(const ModelConfig& config, std::mt19937_64& rng) {
  config.validate();
  ModelParams p{config, {}};
  for (const auto& name : parameter_names(config)) {
    const Shape shape = parameter_shape(config, name);
    const bool is_gain = name.size() >= 4 && name.compare(name.size() - 4, 4, "gain") == 0;
    const bool is_bias = name.size() >= 4 && name.compare(name.size() - 4, 4, "bias") == 0;
    if (is_gain) {
      p.tensors.emplace(name, Tensor::ones(shape));
    } else if (is_bias) {
      p.tensors.emplace(name, Tensor::zeros(shape));
    } else {
      p.tensors.emplace(name, Tensor::normal(shape, 0.02, rng));
    }
  }
  return p;
}

std::uint64_t fingerprint(const std::map<std::string, Tensor>& tensors) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, t] : tensors) {
    mix(name.data(), name.size());
    for (auto d : t.shape()) mix(&d, sizeof d);
    mix(t.data().data(), t.size() * sizeof(double));
  }
  return h;
}

void SequenceInput::push_token(std::size_t id) { elements_.push_back({false, id}); }

void SequenceInput::push_tokens(std::span<const std::size_t> ids) {
  for (auto id : ids) push_token(id);
}

void SequenceInput::push_patch(std::span<const double> patch) {
  if (!patch_data_.empty() && patch.size() != patch_data_.size() / patch_count_) {
    throw DimensionError("patch of length " + std::to_string(patch.size()) + " differs from earlier patches");
  }
  if (patch.empty()) throw DimensionError("empty patch vector");
  patch_data_.insert(patch_data_.end(), patch.begin(), patch.end());
  elements_.push_back({true, patch_count_++});
}

void SequenceInput::push_grid(const PatchGrid& grid, std::size_t newline_id) {
  const std::size_t dim = grid.patches.cols();
  for (const LayoutSlot& slot : grid.layout()) {
    if (slot.newline) {
      push_token(newline_id);
    } else {
      push_patch(grid.patches.data().subspan(slot.patch * dim, dim));
    }
  }
}

std::span<const double> SequenceInput::patch(std::size_t row) const {
  const std::size_t dim = patch_data_.size() / patch_count_;
  return std::span<const double>(patch_data_).subspan(row * dim, dim);
}

std::size_t SequenceInput::token(std::size_t i) const {
  const Element& e = elements_.at(i);
  if (e.is_patch) throw ContractError("element " + std::to_string(i) + " is a patch, not a token");
  return e.index;
}

SequenceInput SequenceInput::prefix(std::size_t n) const {
  SequenceInput out;
  for (std::size_t i = 0; i < std::min(n, size()); ++i) {
    if (elements_[i].is_patch) {
      out.push_patch(patch(elements_[i].index));
    } else {
      out.push_token(elements_[i].index);
    }
  }
  return out;
}

BoundModel::BoundModel(Graph& graph, const ModelParams& params, const LoraAdapters* adapters, Trainable trainable)
    : graph_(&graph), config_(params.config), adapters_(adapters) {
  params.config.validate();
  for (const auto& [name, t] : params.tensors) {
    Var v = trainable == Trainable::kBase ? graph.parameter(t) : graph.constant(t);
    vars_.emplace(name, v);
    if (trainable == Trainable::kBase) trainable_.emplace(name, v);
  }
  if (adapters != nullptr) {
    for (const auto& [name, pair] : adapters->pairs) {
      if (!params.tensors.contains(name)) throw ConfigError("adapter for unknown weight '" + name + "'");
      const bool train = trainable == Trainable::kAdapters;
      Var a = train ? graph.parameter(pair.a) : graph.constant(pair.a);
      Var b = train ? graph.parameter(pair.b) : graph.constant(pair.b);
      lora_vars_.emplace(name, std::make_pair(a, b));
      if (train) {
        trainable_.emplace(name + ".lora_a", a);
        trainable_.emplace(name + ".lora_b", b);
      }
    }
  }
}

BoundModel::BoundModel(Graph& graph, const ModelConfig& config, const std::map<std::string, Var>& vars)
    : graph_(&graph), config_(config), adapters_(nullptr), vars_(vars), trainable_(vars) {
  config.validate();
  for (const auto& name : parameter_names(config)) {
    auto it = vars.find(name);
    if (it == vars.end()) throw ContractError("missing parameter '" + name + "'");
    if (it->second.shape() != parameter_shape(config, name)) {
      throw DimensionError(name + ": expected " + shape_to_string(parameter_shape(config, name)) + ", got " +
                           shape_to_string(it->second.shape()));
    }
  }
}

Var BoundModel::param(const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw ContractError("missing parameter '" + name + "'");
  return it->second;
}

Var BoundModel::linear(Var x, const std::string& weight_name) const {
  Var y = ops::matmul(x, param(weight_name));
  auto it = lora_vars_.find(weight_name);
  if (it == lora_vars_.end()) return y;
  const auto& [a, b] = it->second;
  Var delta = ops::matmul_nt(ops::matmul_nt(x, a), b);
  return ops::add(y, ops::scale(delta, adapters_->config.scale()));
}

Var embed_sequence(const BoundModel& model, const SequenceInput& input) {
  if (input.empty()) throw ContractError("embed_sequence: empty sequence");
  const ModelConfig& c = model.config();
  Graph& g = model.graph();

  std::vector<std::size_t> token_ids;
  std::vector<std::size_t> order(input.size());
  const std::size_t n_patches = input.num_patches();
  for (std::size_t i = 0; i < input.size(); ++i) {
    const auto& e = input[i];
    if (e.is_patch) {
      order[i] = e.index;
    } else {
      if (e.index >= c.vocab) {
        throw ContractError("token id " + std::to_string(e.index) + " out of vocabulary (" + std::to_string(c.vocab) +
                            ")");
      }
      order[i] = n_patches + token_ids.size();
      token_ids.push_back(e.index);
    }
  }

  std::vector<Var> parts;
  if (n_patches > 0) {
    Tensor patches({n_patches, c.patch_dim});
    for (std::size_t p = 0; p < n_patches; ++p) {
      auto src = input.patch(p);
      if (src.size() != c.patch_dim) {
        throw DimensionError("patch length " + std::to_string(src.size()) + " != patch_dim " +
                             std::to_string(c.patch_dim));
      }
      std::copy(src.begin(), src.end(), patches.data().begin() + static_cast<std::ptrdiff_t>(p * c.patch_dim));
    }
    Var projected = model.linear(g.constant(std::move(patches)), "patch_projection.weight");
    parts.push_back(ops::add_bias(projected, model.param("patch_projection.bias")));
  }
  if (!token_ids.empty()) parts.push_back(ops::gather_rows(model.param("token_embedding"), token_ids));
  Var stacked = parts.size() == 1 ? parts[0] : ops::concat_rows(parts);
  return ops::gather_rows(stacked, order);
}

Var attention_block(const BoundModel& model, std::size_t layer, Var x, const ForwardOptions& options,
                    ForwardTrace* trace) {
  const ModelConfig& c = model.config();
  const std::string p = "layers." + std::to_string(layer) + ".";
  const std::size_t n = x.value().rows();
  if (n > c.max_seq) {
    throw CapacityError("sequence length " + std::to_string(n) + " exceeds max_seq " + std::to_string(c.max_seq));
  }
  Var h = ops::layer_norm(x, model.param(p + "attn_norm.gain"), model.param(p + "attn_norm.bias"), c.norm_eps);
  Var q = model.linear(h, p + "attn.wq");
  Var k = model.linear(h, p + "attn.wk");
  Var v = model.linear(h, p + "attn.wv");

  std::vector<std::size_t> positions(n);
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  const AttentionMask mask{options.causal, options.valid_length};
  const std::size_t hd = c.head_dim();

  if (trace != nullptr) trace->layers.emplace_back();
  std::vector<Var> heads;
  for (std::size_t head = 0; head < c.n_heads; ++head) {
    Var qh = ops::layer_norm(ops::slice_cols(q, head * hd, hd), model.param(p + "attn.q_norm.gain"),
                             model.param(p + "attn.q_norm.bias"), c.norm_eps);
    Var kh = ops::layer_norm(ops::slice_cols(k, head * hd, hd), model.param(p + "attn.k_norm.gain"),
                             model.param(p + "attn.k_norm.bias"), c.norm_eps);
    Var vh = ops::slice_cols(v, head * hd, hd);
    Var qr = ops::rope(qh, positions, c.rope_base);
    Var kr = ops::rope(kh, positions, c.rope_base);
    if (trace != nullptr) trace->layers.back().push_back({qh.value(), kh.value(), qr.value(), kr.value()});
    heads.push_back(ops::attention(qr, kr, vh, mask, options.kernel, options.attention_block));
  }
  Var merged = heads.size() == 1 ? heads[0] : ops::concat_cols(heads);
  return ops::add(x, model.linear(merged, p + "attn.wo"));
}

Var squared_relu_mlp(const BoundModel& model, std::size_t layer, Var x) {
  const ModelConfig& c = model.config();
  const std::string p = "layers." + std::to_string(layer) + ".";
  Var h = ops::layer_norm(x, model.param(p + "mlp_norm.gain"), model.param(p + "mlp_norm.bias"), c.norm_eps);
  Var up = ops::relu_squared(model.linear(h, p + "mlp.up"));
  return ops::add(x, model.linear(up, p + "mlp.down"));
}

Var forward_hidden(const BoundModel& model, const SequenceInput& input, const ForwardOptions& options,
                   ForwardTrace* trace) {
  const ModelConfig& c = model.config();
  if (input.empty()) throw ContractError("forward: empty sequence");
  if (input.size() > c.max_seq) {
    throw CapacityError("sequence length " + std::to_string(input.size()) + " exceeds max_seq " +
                        std::to_string(c.max_seq));
  }
  Var x = embed_sequence(model, input);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    x = attention_block(model, l, x, options, trace);
    x = squared_relu_mlp(model, l, x);
  }
  return ops::layer_norm(x, model.param("final_norm.gain"), model.param("final_norm.bias"), c.norm_eps);
}

Var forward(const BoundModel& model, const SequenceInput& input, const ForwardOptions& options, ForwardTrace* trace) {
  return model.linear(forward_hidden(model, input, options, trace), "output_head");
}

Var head_rows(const BoundModel& model, Var hidden, std::span<const std::size_t> rows) {
  return model.linear(ops::gather_rows(hidden, rows), "output_head");
}

Tensor compute_logits(const ModelParams& params, const SequenceInput& input, const ForwardOptions& options,
                      const LoraAdapters* adapters) {
  Graph g;
  BoundModel model(g, params, adapters);
  return forward(model, input, options).value();
}

std::vector<std::size_t> decode_greedy(const ModelParams& params, const SequenceInput& prompt, std::size_t max_new,
                                       std::size_t eos, const LoraAdapters* adapters, const ForwardOptions& options) {
  if (max_new == 0) throw ContractError("decode_greedy: max_new must be at least 1");
  SequenceInput seq = prompt;
  std::vector<std::size_t> out;
  while (out.size() < max_new) {
    Graph g;
    BoundModel model(g, params, adapters);
    Var hidden = forward_hidden(model, seq, options);
    const std::size_t last = seq.size() - 1;
    const Tensor logits = head_rows(model, hidden, std::span<const std::size_t>(&last, 1)).value();
    const auto values = logits.data();
    const auto best = static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
    out.push_back(best);
    if (best == eos) break;
    seq.push_token(best);
  }
  return out;
}

}  // namespace patchlm
