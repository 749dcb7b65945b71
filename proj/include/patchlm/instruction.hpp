#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "patchlm/image.hpp"
#include "patchlm/model.hpp"
#include "patchlm/patchifier.hpp"

namespace patchlm {

// Byte-level vocabulary: ids 0..255 are raw bytes, 256..507 are unused, and
// the four reserved ids sit at the top.
struct SpecialTokens {
  static constexpr std::size_t kVocabSize = 512;
  static constexpr std::size_t kNewline = 508;
  static constexpr std::size_t kAnswerStart = 509;
  static constexpr std::size_t kEos = 510;
  static constexpr std::size_t kPad = 511;

  static bool is_special(std::size_t id) { return id >= kNewline && id < kVocabSize; }
};

inline constexpr char kAnswerStartByte = '\x04';

std::vector<std::size_t> tokenize_text(std::string_view text);

// Bytes are emitted verbatim. Reserved ids render as "|NEWLINE|", "\x04",
// "<|eos|>" and "<|pad|>" when `render_specials` is set, otherwise they are dropped.
std::string detokenize(std::span<const std::size_t> ids, bool render_specials = false);

struct InstructionSample {
  std::variant<std::monostate, std::filesystem::path, RawImage> image;
  std::string instruction;
  std::string answer;
  std::string dataset;
};

struct TemplateSegments {
  std::string pre_answer;  // " User:{instruction} Assistant:\x04"
  std::string answer;      // answer text; EOS follows as a reserved token
};

// Throws ContractError for a missing image or empty instruction/answer.
TemplateSegments render_template(const InstructionSample& sample);

struct TokenizedSample {
  SequenceInput sequence;
  std::vector<std::uint8_t> loss_mask;  // per position
  std::string dataset;
  std::size_t resolution = 0;  // square side used, 0 when the original size was kept
  TokenBudget image_budget;
};

RawImage load_sample_image(const InstructionSample& sample);

TokenizedSample build_sample(const InstructionSample& sample, const ResizePolicy& policy, std::mt19937_64& rng);

// Image layout, then the template up to and including the answer-start token.
SequenceInput build_prompt(const RawImage& image, std::string_view instruction, const ResizePolicy& policy,
                           std::mt19937_64* rng = nullptr);

struct Batch {
  std::vector<SequenceInput> sequences;  // right-padded with PAD to `width`
  std::vector<std::vector<std::uint8_t>> loss_masks;
  std::vector<std::vector<std::uint8_t>> valid;  // 1 for real positions
  std::vector<std::size_t> lengths;
  std::size_t width = 0;
};

Batch collate_batch(const std::vector<TokenizedSample>& samples, std::size_t pad_id = SpecialTokens::kPad);

// Mean next-token cross-entropy over positions whose mask is set; position i
// predicts element i from the output at i-1. `valid_length` marks padding.
Var masked_lm_loss(const BoundModel& model, const SequenceInput& sequence, const std::vector<std::uint8_t>& loss_mask,
                   const ForwardOptions& options = {});

// Mean over samples of masked_lm_loss, run on the padded batch.
double batch_loss(const ModelParams& params, const Batch& batch, const ForwardOptions& options = {},
                  const LoraAdapters* adapters = nullptr);

// JSON-lines: {"image": path, "instruction": text, "answer": text, "dataset": name}.
// Relative image paths resolve against the file's directory.
std::vector<InstructionSample> load_instruction_jsonl(const std::filesystem::path& path);

}  // namespace patchlm
