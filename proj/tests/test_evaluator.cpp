#include <doctest.h>

#include <json.hpp>

#include <fstream>
#include <random>
#include <set>

#include "helpers.hpp"
#include "patchlm/errors.hpp"
#include "patchlm/evaluator.hpp"
#include "patchlm/image.hpp"

using namespace patchlm;

namespace {

MagRecord record(char gold = 'B', QuestionType t = QuestionType::kColor) {
  MagRecord r;
  r.id = "r1";
  r.image = "x.ppm";
  r.question = "What color is the cup?";
  r.options = {"blue", "red", "green", "white"};
  r.gold_letter = gold;
  r.gold_freeform = r.options[static_cast<std::size_t>(gold - 'A')];
  r.qtype = t;
  return r;
}

Verdict verdict(Protocol p, QuestionType t, bool correct, bool judged = true) {
  Verdict v;
  v.protocol = p;
  v.qtype = t;
  v.correct = correct;
  v.strict_correct = correct;
  v.judged = judged;
  return v;
}

// Counts calls so the judge can be shown to run exactly once per record.
class CountingJudge final : public JudgeClient {
 public:
  JudgeResult submit(const std::string& q, const std::string& g, const std::string& r) override {
    ++calls;
    return stub.submit(q, g, r);
  }
  JudgeSource source() const override { return JudgeSource::kStub; }
  std::atomic<int> calls{0};
  StubJudge stub;
};

}  // namespace

TEST_CASE("multiple-choice scoring normalizes whitespace, one trailing mark and case") {
  CHECK(score_mc("B", 'B'));
  CHECK(score_mc(" b.", 'B'));
  CHECK(score_mc("B)\n", 'B'));
  CHECK_FALSE(score_mc("The answer is B", 'B'));
  CHECK_FALSE(score_mc("B..", 'B'));
  CHECK_FALSE(score_mc("(B)", 'B'));
  CHECK_FALSE(score_mc("", 'B'));
  CHECK_FALSE(score_mc("C", 'B'));
  CHECK(score_mc_strict("B", 'B'));
  CHECK_FALSE(score_mc_strict(" b.", 'B'));
  CHECK_FALSE(score_mc_strict("b", 'B'));
}

TEST_CASE("prompt formats") {
  const MagRecord r = record();
  CHECK(format_mc_prompt(r) ==
        "Answer with the option letter from the given choices directly\n"
        "What color is the cup?\nA. blue\nB. red\nC. green\nD. white");
  CHECK(format_freeform_prompt(r) == "What color is the cup?");
}

TEST_CASE("record validation") {
  CHECK_NOTHROW(record().validate());
  MagRecord dup = record();
  dup.options[2] = "red";
  CHECK_THROWS_AS(dup.validate(), ContractError);
  MagRecord mismatch = record();
  mismatch.gold_freeform = "purple";
  CHECK_THROWS_AS(mismatch.validate(), ContractError);
  MagRecord letter = record();
  letter.gold_letter = 'E';
  CHECK_THROWS_AS(letter.validate(), ContractError);
  CHECK_THROWS_AS(parse_question_type("shape"), ContractError);
}

TEST_CASE("report aggregates per protocol and per question type") {
  std::vector<Verdict> v;
  for (bool c : {true, true, true, false}) v.push_back(verdict(Protocol::kMultipleChoice, QuestionType::kColor, c));
  v.push_back(verdict(Protocol::kFreeForm, QuestionType::kNumerical, true));
  v.push_back(verdict(Protocol::kFreeForm, QuestionType::kNumerical, false, false));
  const AccuracyReport rep = report(v);
  const ProtocolSummary& mc = rep.protocols.at(Protocol::kMultipleChoice);
  CHECK(mc.total == 4);
  CHECK(*mc.overall.accuracy() == doctest::Approx(75.0));
  CHECK(*mc.by_type.at(QuestionType::kColor).accuracy() == doctest::Approx(75.0));
  CHECK(mc.strict.has_value());
  const ProtocolSummary& ff = rep.protocols.at(Protocol::kFreeForm);
  CHECK(ff.total == 2);
  CHECK(ff.unjudged == 1);
  CHECK(*ff.overall.accuracy() == doctest::Approx(100.0));
  CHECK_FALSE(ff.strict.has_value());

  const auto j = nlohmann::json::parse(rep.to_json());
  CHECK(j.at("mc").at("overall").at("accuracy") == 75.0);
  CHECK(j.at("freeform").at("unjudged") == 1);
  CHECK(rep.to_text().find("Multiple choice: 75.0% (3/4)") != std::string::npos);
  CHECK(rep.to_text().find("1 unjudged") != std::string::npos);
  CHECK_THROWS_AS(report({}), ContractError);
}

TEST_CASE("nothing judged means no accuracy, not zero") {
  const AccuracyReport rep = report({verdict(Protocol::kFreeForm, QuestionType::kOther, false, false)});
  const ProtocolSummary& ff = rep.protocols.at(Protocol::kFreeForm);
  CHECK_FALSE(ff.overall.accuracy().has_value());
  CHECK(ff.by_type.empty());
  CHECK_FALSE(nlohmann::json::parse(rep.to_json()).at("freeform").at("overall").contains("accuracy"));
  CHECK(rep.to_text().find("n/a") != std::string::npos);
}

TEST_CASE("fixture records are valid, varied and load back") {
  testutil::TempDir dir;
  write_mag_fixture(dir.path());
  const auto records = load_mag_jsonl(dir / "records.jsonl");
  REQUIRE(records.size() >= 20);
  std::set<QuestionType> types;
  std::set<char> letters;
  std::set<std::string> ids;
  for (const auto& r : records) {
    CHECK_NOTHROW(r.validate());
    types.insert(r.qtype);
    letters.insert(r.gold_letter);
    ids.insert(r.id);
    CHECK(load_ppm(r.image).width >= 30);
  }
  CHECK(types.size() >= 3);
  CHECK(letters.size() == 4);
  CHECK(ids.size() == records.size());
  CHECK_THROWS_AS(load_mag_jsonl(dir / "missing.jsonl"), IoError);
}

TEST_CASE("JSON-lines loading rejects malformed records") {
  testutil::TempDir dir;
  const std::string good = mag_record_to_json(record());
  {
    std::ofstream(dir / "ok.jsonl") << good << "\n\n" << good << "\n";
  }
  const auto back = load_mag_jsonl(dir / "ok.jsonl");
  REQUIRE(back.size() == 2);
  CHECK(back[0].image == dir / "x.ppm");
  CHECK(back[0].options == record().options);
  CHECK(back[0].gold_letter == 'B');
  auto j = nlohmann::json::parse(good);
  j["options"] = {"a", "b", "c"};
  {
    std::ofstream(dir / "three.jsonl") << j.dump() << "\n";
  }
  CHECK_THROWS_AS(load_mag_jsonl(dir / "three.jsonl"), ContractError);
  {
    std::ofstream(dir / "broken.jsonl") << "{\"id\": 1}\n";
  }
  CHECK_THROWS_AS(load_mag_jsonl(dir / "broken.jsonl"), IoError);
}

TEST_CASE("a uniformly random responder scores near 25%") {
  testutil::TempDir dir;
  write_mag_fixture(dir.path());
  const auto records = load_mag_jsonl(dir / "records.jsonl");
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> letter(0, 3);
  const Responder random = [&](const MagRecord&, const std::string&) {
    return std::string(1, static_cast<char>('A' + letter(rng)));
  };
  std::vector<Verdict> all;
  while (all.size() < 10000) {
    auto v = evaluate(records, random, true, false, nullptr);
    all.insert(all.end(), v.begin(), v.end());
  }
  const double acc = *report(all).protocols.at(Protocol::kMultipleChoice).overall.accuracy();
  // Binomial sd is about 0.43 points at n = 10000.
  CHECK(std::abs(acc - 25.0) < 3.0);
  CHECK(std::abs(acc - 25.0) < 1.5);

  // A constant letter scores the share of records whose gold is that letter.
  const Responder always_a = [](const MagRecord&, const std::string&) { return std::string("A"); };
  std::size_t gold_a = 0;
  for (const auto& r : records) gold_a += r.gold_letter == 'A';
  const double a_acc = *report(evaluate(records, always_a, true, false, nullptr))
                            .protocols.at(Protocol::kMultipleChoice)
                            .overall.accuracy();
  CHECK(a_acc == doctest::Approx(100.0 * gold_a / records.size()));
}

TEST_CASE("evaluate routes prompts and judges free-form answers") {
  testutil::TempDir dir;
  write_mag_fixture(dir.path(), 8);
  const auto records = load_mag_jsonl(dir / "records.jsonl");
  std::vector<std::string> prompts;
  const Responder oracle = [&](const MagRecord& r, const std::string& prompt) {
    prompts.push_back(prompt);
    return prompt.starts_with(kOptionLetterHint) ? std::string(1, r.gold_letter) : "it is " + r.gold_freeform;
  };
  CountingJudge judge;
  const auto verdicts = evaluate(records, oracle, true, true, &judge, 3);
  REQUIRE(verdicts.size() == 16);
  CHECK(judge.calls == 8);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(prompts[i] == format_mc_prompt(records[i]));
    CHECK(prompts[8 + i] == records[i].question);
    CHECK(verdicts[i].protocol == Protocol::kMultipleChoice);
    CHECK(verdicts[8 + i].protocol == Protocol::kFreeForm);
    CHECK(verdicts[8 + i].record_id == records[i].id);
  }
  const AccuracyReport rep = report(verdicts);
  CHECK(*rep.protocols.at(Protocol::kMultipleChoice).overall.accuracy() == 100.0);
  CHECK(*rep.protocols.at(Protocol::kFreeForm).overall.accuracy() == 100.0);
  CHECK_THROWS_AS(evaluate(records, oracle, false, true, nullptr), ContractError);

  StubJudge stub;
  const Verdict wrong = score_freeform(records[0], "nothing useful", stub);
  CHECK(wrong.judged);
  CHECK_FALSE(wrong.correct);
}
