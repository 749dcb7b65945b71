#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "patchlm/judge.hpp"

namespace patchlm {

enum class QuestionType { kIdentification, kNumerical, kColor, kOther };
enum class Protocol { kMultipleChoice, kFreeForm };

std::string to_string(QuestionType t);
QuestionType parse_question_type(const std::string& text);
std::string to_string(Protocol p);

inline constexpr std::string_view kOptionLetterHint = "Answer with the option letter from the given choices directly";

/// One benchmark item: four options, the gold letter, and the free-form gold
/// answer (which equals the text of the gold option).
struct MagRecord {
  std::string id;
  std::filesystem::path image;
  std::string question;
  std::array<std::string, 4> options;
  char gold_letter = 'A';
  std::string gold_freeform;
  QuestionType qtype = QuestionType::kOther;

  void validate() const;
};

// JSON-lines: {"id", "image", "question", "options": [4], "answer": "A".."D",
// "freeform_answer", "qtype"}; relative image paths resolve against the file.
std::vector<MagRecord> load_mag_jsonl(const std::filesystem::path& path);
std::string mag_record_to_json(const MagRecord& record);

// Hint line, question, then "A. ..." through "D. ..." in stored order.
std::string format_mc_prompt(const MagRecord& record);
std::string format_freeform_prompt(const MagRecord& record);

// Trim, strip one trailing punctuation mark, uppercase; correct iff the result
// is exactly the gold letter.
bool score_mc(std::string_view response, char gold_letter);
// Raw comparison with no normalization.
bool score_mc_strict(std::string_view response, char gold_letter);

struct Verdict {
  std::string record_id;
  Protocol protocol = Protocol::kMultipleChoice;
  QuestionType qtype = QuestionType::kOther;
  std::string raw_response;
  bool judged = true;
  bool correct = false;
  bool strict_correct = false;  // multiple-choice only
  JudgeSource judge_source = JudgeSource::kStub;
};

Verdict score_mc_verdict(const MagRecord& record, const std::string& response);
Verdict score_freeform(const MagRecord& record, const std::string& response, JudgeClient& judge);

struct AccuracyCell {
  std::size_t judged = 0;
  std::size_t correct = 0;
  std::optional<double> accuracy() const;  // percent; empty when nothing was judged
};

struct ProtocolSummary {
  std::size_t total = 0;
  std::size_t unjudged = 0;
  AccuracyCell overall;
  std::optional<AccuracyCell> strict;  // multiple-choice only
  std::map<QuestionType, AccuracyCell> by_type;
};

struct AccuracyReport {
  std::map<Protocol, ProtocolSummary> protocols;

  std::string to_json() const;
  std::string to_text() const;
};

// Protocols are aggregated separately. Throws ContractError on an empty list.
AccuracyReport report(const std::vector<Verdict>& verdicts);

// Produces a model response for an image and instruction.
using Responder = std::function<std::string(const MagRecord&, const std::string& instruction)>;

std::vector<Verdict> evaluate(const std::vector<MagRecord>& records, const Responder& responder, bool multiple_choice,
                              bool freeform, JudgeClient* judge, std::size_t judge_concurrency = 4);

// Synthetic fixture: `count` records over the four question types with
// solid-color / stripe images written as PPM next to the JSON-lines file.
void write_mag_fixture(const std::filesystem::path& dir, std::size_t count = 20);

}  // namespace patchlm
