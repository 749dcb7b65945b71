#include "patchlm/evaluator.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "patchlm/errors.hpp"
#include "patchlm/image.hpp"

namespace patchlm {

using nlohmann::json;

std::string to_string(QuestionType t) {
  switch (t) {
    case QuestionType::kIdentification:
      return "identification";
    case QuestionType::kNumerical:
      return "numerical";
    case QuestionType::kColor:
      return "color";
    case QuestionType::kOther:
      return "other";
  }
  return "other";
}

QuestionType parse_question_type(const std::string& text) {
  if (text == "identification") return QuestionType::kIdentification;
  if (text == "numerical") return QuestionType::kNumerical;
  if (text == "color") return QuestionType::kColor;
  if (text == "other") return QuestionType::kOther;
  throw ContractError("unknown question type '" + text + "'");
}

std::string to_string(Protocol p) { return p == Protocol::kMultipleChoice ? "mc" : "freeform"; }

void MagRecord::validate() const {
  if (question.empty()) throw ContractError("record " + id + ": empty question");
  if (gold_letter < 'A' || gold_letter > 'D') throw ContractError("record " + id + ": gold letter must be A-D");
  const std::set<std::string> distinct(options.begin(), options.end());
  if (distinct.size() != options.size()) throw ContractError("record " + id + ": options are not distinct");
  if (options[static_cast<std::size_t>(gold_letter - 'A')] != gold_freeform) {
    throw ContractError("record " + id + ": gold option text differs from the free-form answer");
  }
}

std::vector<MagRecord> load_mag_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset " + path.string());
  std::vector<MagRecord> out;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    MagRecord r;
    try {
      const json j = json::parse(line);
      r.id = j.at("id").get<std::string>();
      r.image = j.at("image").get<std::string>();
      if (r.image.is_relative()) r.image = path.parent_path() / r.image;
      r.question = j.at("question").get<std::string>();
      const auto opts = j.at("options").get<std::vector<std::string>>();
      if (opts.size() != 4) throw ContractError("record " + r.id + ": exactly four options required");
      std::copy(opts.begin(), opts.end(), r.options.begin());
      const auto letter = j.at("answer").get<std::string>();
      if (letter.size() != 1) throw ContractError("record " + r.id + ": answer must be one letter");
      r.gold_letter = letter[0];
      r.gold_freeform = j.at("freeform_answer").get<std::string>();
      r.qtype = parse_question_type(j.value("qtype", std::string("other")));
    } catch (const json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    r.validate();
    out.push_back(std::move(r));
  }
  return out;
}

std::string mag_record_to_json(const MagRecord& r) {
  return json{{"id", r.id},
              {"image", r.image.string()},
              {"question", r.question},
              {"options", r.options},
              {"answer", std::string(1, r.gold_letter)},
              {"freeform_answer", r.gold_freeform},
              {"qtype", to_string(r.qtype)}}
      .dump();
}

std::string format_mc_prompt(const MagRecord& record) {
  std::string out(kOptionLetterHint);
  out += "\n" + record.question;
  for (std::size_t i = 0; i < record.options.size(); ++i) {
    out += "\n";
    out += static_cast<char>('A' + i);
    out += ". " + record.options[i];
  }
  return out;
}

std::string format_freeform_prompt(const MagRecord& record) { return record.question; }

bool score_mc(std::string_view response, char gold_letter) {
  const auto first = response.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return false;
  const auto last = response.find_last_not_of(" \t\r\n");
  std::string_view core = response.substr(first, last - first + 1);
  if (!core.empty() && std::ispunct(static_cast<unsigned char>(core.back()))) core.remove_suffix(1);
  if (core.size() != 1) return false;
  return std::toupper(static_cast<unsigned char>(core[0])) == gold_letter;
}

bool score_mc_strict(std::string_view response, char gold_letter) {
  return response.size() == 1 && response[0] == gold_letter;
}

Verdict score_mc_verdict(const MagRecord& record, const std::string& response) {
  Verdict v;
  v.record_id = record.id;
  v.protocol = Protocol::kMultipleChoice;
  v.qtype = record.qtype;
  v.raw_response = response;
  v.correct = score_mc(response, record.gold_letter);
  v.strict_correct = score_mc_strict(response, record.gold_letter);
  return v;
}

Verdict score_freeform(const MagRecord& record, const std::string& response, JudgeClient& judge) {
  Verdict v;
  v.record_id = record.id;
  v.protocol = Protocol::kFreeForm;
  v.qtype = record.qtype;
  v.raw_response = response;
  v.judge_source = judge.source();
  const JudgeResult r = judge.submit(format_freeform_prompt(record), record.gold_freeform, response);
  v.judged = r.judged;
  v.correct = r.judged && r.yes;
  return v;
}

std::optional<double> AccuracyCell::accuracy() const {
  if (judged == 0) return std::nullopt;
  return 100.0 * static_cast<double>(correct) / static_cast<double>(judged);
}

AccuracyReport report(const std::vector<Verdict>& verdicts) {
  if (verdicts.empty()) throw ContractError("report: no verdicts");
  AccuracyReport out;
  for (const auto& v : verdicts) {
    ProtocolSummary& s = out.protocols[v.protocol];
    ++s.total;
    if (!v.judged) {
      ++s.unjudged;
      continue;
    }
    ++s.overall.judged;
    s.overall.correct += v.correct ? 1 : 0;
    AccuracyCell& cell = s.by_type[v.qtype];
    ++cell.judged;
    cell.correct += v.correct ? 1 : 0;
    if (v.protocol == Protocol::kMultipleChoice) {
      if (!s.strict) s.strict.emplace();
      ++s.strict->judged;
      s.strict->correct += v.strict_correct ? 1 : 0;
    }
  }
  return out;
}

namespace {

json cell_json(const AccuracyCell& c) {
  json j{{"judged", c.judged}, {"correct", c.correct}};
  if (auto acc = c.accuracy()) j["accuracy"] = *acc;
  return j;
}

std::string format_cell(const AccuracyCell& c) {
  std::ostringstream os;
  if (auto acc = c.accuracy()) {
    os << std::fixed << std::setprecision(1) << *acc << "% (" << c.correct << "/" << c.judged << ")";
  } else {
    os << "n/a (0 judged)";
  }
  return os.str();
}

}  // namespace

std::string AccuracyReport::to_json() const {
  json j = json::object();
  for (const auto& [protocol, s] : protocols) {
    json p{{"total", s.total}, {"unjudged", s.unjudged}, {"overall", cell_json(s.overall)}};
    if (s.strict) p["strict"] = cell_json(*s.strict);
    json types = json::object();
    for (const auto& [t, c] : s.by_type) types[to_string(t)] = cell_json(c);
    p["by_type"] = types;
    j[to_string(protocol)] = p;
  }
  return j.dump(2);
}

std::string AccuracyReport::to_text() const {
  std::ostringstream os;
  for (const auto& [protocol, s] : protocols) {
    os << (protocol == Protocol::kMultipleChoice ? "Multiple choice" : "Free-form") << ": "
       << format_cell(s.overall);
    if (s.unjudged) os << ", " << s.unjudged << " unjudged";
    os << "\n";
    if (s.strict) os << "  strict (raw exact match): " << format_cell(*s.strict) << "\n";
    for (const auto& [t, c] : s.by_type) os << "  " << to_string(t) << ": " << format_cell(c) << "\n";
  }
  return os.str();
}

std::vector<Verdict> evaluate(const std::vector<MagRecord>& records, const Responder& responder, bool multiple_choice,
                              bool freeform, JudgeClient* judge, std::size_t judge_concurrency) {
  std::vector<Verdict> out;
  if (multiple_choice) {
    for (const auto& r : records) out.push_back(score_mc_verdict(r, responder(r, format_mc_prompt(r))));
  }
  if (freeform) {
    if (judge == nullptr) throw ContractError("free-form evaluation requires a judge");
    std::vector<JudgeRequest> requests;
    std::vector<std::string> responses;
    for (const auto& r : records) {
      responses.push_back(responder(r, format_freeform_prompt(r)));
      requests.push_back({format_freeform_prompt(r), r.gold_freeform, responses.back()});
    }
    const auto results = judge_all(*judge, requests, judge_concurrency);
    for (std::size_t i = 0; i < records.size(); ++i) {
      Verdict v;
      v.record_id = records[i].id;
      v.protocol = Protocol::kFreeForm;
      v.qtype = records[i].qtype;
      v.raw_response = responses[i];
      v.judge_source = judge->source();
      v.judged = results[i].judged;
      v.correct = results[i].judged && results[i].yes;
      out.push_back(std::move(v));
    }
  }
  return out;
}

void write_mag_fixture(const std::filesystem::path& dir, std::size_t count) {
  struct Color {
    const char* name;
    std::uint8_t r, g, b;
  };
  static constexpr Color kColors[] = {{"red", 220, 30, 30},   {"green", 30, 200, 40}, {"blue", 30, 60, 220},
                                      {"yellow", 230, 220, 40}, {"white", 250, 250, 250}, {"black", 10, 10, 10}};
  static constexpr const char* kShapes[] = {"cup", "ball", "box", "sign"};
  std::filesystem::create_directories(dir / "images");
  std::ofstream out(dir / "records.jsonl", std::ios::trunc);
  if (!out) throw IoError("cannot write fixture in " + dir.string());

  for (std::size_t i = 0; i < count; ++i) {
    const Color& c = kColors[i % 6];
    const std::size_t stripes = 1 + i % 4;
    // Background in the record's color with `stripes` dark vertical bars.
    RawImage img = RawImage::solid(96 + 10 * (i % 5), 72 + 6 * (i % 3), c.r, c.g, c.b);
    for (std::size_t s = 0; s < stripes; ++s) {
      for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 8 + 20 * s; x < 14 + 20 * s && x < img.width; ++x)
          for (std::size_t ch = 0; ch < 3; ++ch) img.at(x, y, ch) = -0.9;
    }
    const std::string image_name = "images/" + std::to_string(i) + ".ppm";
    save_ppm(dir / image_name, img);

    MagRecord r;
    r.id = "fx" + std::to_string(i);
    r.image = image_name;
    r.qtype = static_cast<QuestionType>(i % 4);
    std::array<std::string, 4> pool;
    switch (r.qtype) {
      case QuestionType::kColor:
        r.question = "What color is the background?";
        pool = {kColors[i % 6].name, kColors[(i + 1) % 6].name, kColors[(i + 2) % 6].name, kColors[(i + 3) % 6].name};
        break;
      case QuestionType::kNumerical:
        r.question = "How many dark stripes are there?";
        pool = {std::to_string(stripes), std::to_string(stripes + 1), std::to_string(stripes + 2),
                std::to_string(stripes + 3)};
        break;
      case QuestionType::kIdentification:
        r.question = "Which object is shown?";
        pool = {std::string(c.name) + " " + kShapes[i % 4], std::string(c.name) + " " + kShapes[(i + 1) % 4],
                std::string(c.name) + " " + kShapes[(i + 2) % 4], std::string(c.name) + " " + kShapes[(i + 3) % 4]};
        break;
      case QuestionType::kOther:
        r.question = "Is the image wider than it is tall?";
        pool = {"yes", "no", "equal", "unknown"};
        break;
    }
    // Rotate so the gold option lands on a varying letter.
    const std::size_t gold_slot = (i * 3) % 4;
    std::array<std::string, 4> options;
    for (std::size_t k = 0; k < 4; ++k) options[(gold_slot + k) % 4] = pool[k];
    r.options = options;
    r.gold_letter = static_cast<char>('A' + gold_slot);
    r.gold_freeform = pool[0];
    r.validate();
    out << mag_record_to_json(r) << "\n";
  }
}

}  // namespace patchlm
