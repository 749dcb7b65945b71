#pragma once

#include <chrono>
#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace patchlm {

enum class JudgeSource { kStub, kExternal };

struct JudgeResult {
  bool judged = false;  // false: no verdict could be obtained
  bool yes = false;
  std::string detail;
};

class JudgeClient {
 public:
  virtual ~JudgeClient() = default;
  virtual JudgeResult submit(const std::string& question, const std::string& gold, const std::string& response) = 0;
  virtual JudgeSource source() const = 0;
};

// Lowercased, punctuation-stripped whitespace tokens.
std::vector<std::string> normalized_words(const std::string& text);

/// Deterministic offline judge: "yes" iff every normalized gold word occurs in
/// the normalized response.
class StubJudge final : public JudgeClient {
 public:
  JudgeResult submit(const std::string& question, const std::string& gold, const std::string& response) override;
  JudgeSource source() const override { return JudgeSource::kStub; }
};

struct HttpJudgeConfig {
  std::string url;  // e.g. https://host/v1/chat/completions
  std::string api_key;
  std::string model = "gpt-4";
  std::chrono::milliseconds timeout{30000};  // overall budget per submit, retries included
  std::size_t max_attempts = 3;
  std::chrono::milliseconds backoff{250};  // doubled after each failed attempt

  // PATCHLM_JUDGE_URL (required), PATCHLM_JUDGE_KEY, PATCHLM_JUDGE_MODEL.
  static HttpJudgeConfig from_env();
};

std::string judge_system_prompt();
std::string judge_user_prompt(const std::string& question, const std::string& gold, const std::string& response);

// Reads "yes"/"no" from a chat-completion response body.
std::optional<bool> parse_judge_reply(const std::string& body);

/// Chat-completion client with temperature 0. Network errors, 429 and 5xx
/// replies, and unparseable verdicts are retried with exponential backoff
/// until attempts or the time budget run out, then reported as unjudged.
class HttpJudge final : public JudgeClient {
 public:
  explicit HttpJudge(HttpJudgeConfig config);
  JudgeResult submit(const std::string& question, const std::string& gold, const std::string& response) override;
  JudgeSource source() const override { return JudgeSource::kExternal; }

 private:
  HttpJudgeConfig config_;
  std::string scheme_host_port_;
  std::string path_;
};

struct JudgeRequest {
  std::string question, gold, response;
};

// Runs requests with at most `concurrency` in flight; results keep input order.
std::vector<JudgeResult> judge_all(JudgeClient& judge, const std::vector<JudgeRequest>& requests,
                                   std::size_t concurrency = 4);

}  // namespace patchlm
