#include "patchlm/instruction.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>

#include "patchlm/errors.hpp"
#include "patchlm/lora.hpp"

namespace patchlm {

using nlohmann::json;

std::vector<std::size_t> tokenize_text(std::string_view text) {
  std::vector<std::size_t> ids;
  ids.reserve(text.size());
  for (char ch : text) ids.push_back(static_cast<unsigned char>(ch));
  return ids;
}

std::string detokenize(std::span<const std::size_t> ids, bool render_specials) {
  std::string out;
  for (auto id : ids) {
    if (id < 256) {
      out.push_back(static_cast<char>(id));
    } else if (render_specials) {
      switch (id) {
        case SpecialTokens::kNewline:
          out += "|NEWLINE|";
          break;
        case SpecialTokens::kAnswerStart:
          out.push_back(kAnswerStartByte);
          break;
        case SpecialTokens::kEos:
          out += "<|eos|>";
          break;
        case SpecialTokens::kPad:
          out += "<|pad|>";
          break;
        default:
          break;
      }
    }
  }
  return out;
}

TemplateSegments render_template(const InstructionSample& sample) {
  const bool has_image = std::visit(
      [](const auto& img) {
        using T = std::decay_t<decltype(img)>;
        if constexpr (std::is_same_v<T, std::monostate>) {
          return false;
        } else if constexpr (std::is_same_v<T, std::filesystem::path>) {
          return !img.empty();
        } else {
          return img.width > 0 && img.height > 0;
        }
      },
      sample.image);
  if (!has_image) throw ContractError("instruction sample has no image; the template requires one");
  if (sample.instruction.empty()) throw ContractError("instruction sample has an empty instruction");
  if (sample.answer.empty()) throw ContractError("instruction sample has an empty answer");
  return {" User:" + sample.instruction + " Assistant:" + kAnswerStartByte, sample.answer};
}

RawImage load_sample_image(const InstructionSample& sample) {
  if (const auto* path = std::get_if<std::filesystem::path>(&sample.image)) return load_ppm(*path);
  if (const auto* img = std::get_if<RawImage>(&sample.image)) return *img;
  throw ContractError("instruction sample has no image");
}

namespace {

std::size_t resolution_of(const PatchGrid& grid, const ResizePolicy& policy) {
  return policy.kind == ResizePolicy::Kind::kOriginal ? 0 : grid.source_width;
}

// Pre-answer text without its trailing \x04; that marker becomes the reserved id.
std::vector<std::size_t> prompt_tokens(const std::string& pre_answer) {
  std::string_view text(pre_answer);
  if (!text.empty() && text.back() == kAnswerStartByte) text.remove_suffix(1);
  auto ids = tokenize_text(text);
  ids.push_back(SpecialTokens::kAnswerStart);
  return ids;
}

}  // namespace

TokenizedSample build_sample(const InstructionSample& sample, const ResizePolicy& policy, std::mt19937_64& rng) {
  const TemplateSegments segments = render_template(sample);
  const RawImage image = load_sample_image(sample);
  const PatchGrid grid = patchify(image, policy, &rng);

  TokenizedSample out;
  out.dataset = sample.dataset;
  out.resolution = resolution_of(grid, policy);
  out.image_budget = token_budget(grid.source_width, grid.source_height);
  out.sequence.push_grid(grid, SpecialTokens::kNewline);
  out.sequence.push_tokens(prompt_tokens(segments.pre_answer));
  out.loss_mask.assign(out.sequence.size(), 0);
  for (auto id : tokenize_text(segments.answer)) {
    out.sequence.push_token(id);
    out.loss_mask.push_back(1);
  }
  out.sequence.push_token(SpecialTokens::kEos);
  out.loss_mask.push_back(1);
  return out;
}

SequenceInput build_prompt(const RawImage& image, std::string_view instruction, const ResizePolicy& policy,
                           std::mt19937_64* rng) {
  InstructionSample sample{image, std::string(instruction), "?", ""};
  const TemplateSegments segments = render_template(sample);
  SequenceInput seq;
  seq.push_grid(patchify(image, policy, rng), SpecialTokens::kNewline);
  seq.push_tokens(prompt_tokens(segments.pre_answer));
  return seq;
}

Batch collate_batch(const std::vector<TokenizedSample>& samples, std::size_t pad_id) {
  if (samples.empty()) throw ContractError("collate_batch: empty sample list");
  Batch batch;
  for (const auto& s : samples) batch.width = std::max(batch.width, s.sequence.size());
  for (const auto& s : samples) {
    SequenceInput seq = s.sequence;
    std::vector<std::uint8_t> mask = s.loss_mask;
    std::vector<std::uint8_t> valid(s.sequence.size(), 1);
    while (seq.size() < batch.width) {
      seq.push_token(pad_id);
      mask.push_back(0);
      valid.push_back(0);
    }
    batch.sequences.push_back(std::move(seq));
    batch.loss_masks.push_back(std::move(mask));
    batch.valid.push_back(std::move(valid));
    batch.lengths.push_back(s.sequence.size());
  }
  return batch;
}

Var masked_lm_loss(const BoundModel& model, const SequenceInput& sequence, const std::vector<std::uint8_t>& loss_mask,
                   const ForwardOptions& options) {
  if (loss_mask.size() != sequence.size()) throw DimensionError("loss mask length does not match the sequence");
  std::vector<std::size_t> rows, targets;
  for (std::size_t i = 1; i < sequence.size(); ++i) {
    if (!loss_mask[i]) continue;
    rows.push_back(i - 1);
    targets.push_back(sequence.token(i));
  }
  if (rows.empty()) throw ContractError("masked_lm_loss: no loss-active positions");
  Var hidden = forward_hidden(model, sequence, options);
  Var logits = head_rows(model, hidden, rows);
  const std::vector<double> weights(rows.size(), 1.0 / static_cast<double>(rows.size()));
  return ops::cross_entropy(logits, targets, weights);
}

double batch_loss(const ModelParams& params, const Batch& batch, const ForwardOptions& options,
                  const LoraAdapters* adapters) {
  double total = 0.0;
  for (std::size_t i = 0; i < batch.sequences.size(); ++i) {
    Graph g;
    BoundModel model(g, params, adapters);
    ForwardOptions opts = options;
    opts.valid_length = batch.lengths[i] < batch.width ? batch.lengths[i] : 0;
    total += masked_lm_loss(model, batch.sequences[i], batch.loss_masks[i], opts).value().item();
  }
  return total / static_cast<double>(batch.sequences.size());
}

std::vector<InstructionSample> load_instruction_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset " + path.string());
  const auto base = path.parent_path();
  std::vector<InstructionSample> out;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      std::filesystem::path image = j.at("image").get<std::string>();
      if (image.is_relative()) image = base / image;
      out.push_back({image, j.at("instruction").get<std::string>(), j.at("answer").get<std::string>(),
                     j.value("dataset", std::string())});
    } catch (const json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace patchlm
