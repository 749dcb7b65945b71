#include "patchlm/judge.hpp"

#include <httplib.h>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdlib>
#include <set>
#include <sstream>
#include <thread>

#include "patchlm/errors.hpp"

namespace patchlm {

using nlohmann::json;

std::vector<std::string> normalized_words(const std::string& text) {
  std::string cleaned;
  cleaned.reserve(text.size());
  for (unsigned char ch : text) {
    if (std::ispunct(ch)) continue;
    cleaned.push_back(static_cast<char>(std::tolower(ch)));
  }
  std::istringstream is(cleaned);
  std::vector<std::string> words;
  for (std::string w; is >> w;) words.push_back(w);
  return words;
}

JudgeResult StubJudge::submit(const std::string&, const std::string& gold, const std::string& response) {
  const auto gold_words = normalized_words(gold);
  const auto resp = normalized_words(response);
  const std::set<std::string> have(resp.begin(), resp.end());
  const bool yes = !gold_words.empty() && !have.empty() &&
                   std::all_of(gold_words.begin(), gold_words.end(), [&](const auto& w) { return have.contains(w); });
  return {true, yes, "stub containment"};
}

HttpJudgeConfig HttpJudgeConfig::from_env() {
  HttpJudgeConfig c;
  const char* url = std::getenv("PATCHLM_JUDGE_URL");
  if (url == nullptr || *url == '\0') throw ConfigError("PATCHLM_JUDGE_URL is not set; required for --judge external");
  c.url = url;
  if (const char* key = std::getenv("PATCHLM_JUDGE_KEY")) c.api_key = key;
  if (const char* model = std::getenv("PATCHLM_JUDGE_MODEL")) c.model = model;
  return c;
}

std::string judge_system_prompt() {
  return "You are grading answers to visual questions. Compare the model response with the ground-truth answer. "
         "Reply with exactly one word: yes if the response is correct, no otherwise.";
}

std::string judge_user_prompt(const std::string& question, const std::string& gold, const std::string& response) {
  return "Question: " + question + "\nGround truth: " + gold + "\nResponse: " + response +
         "\nIs the response correct? Answer yes or no.";
}

std::optional<bool> parse_judge_reply(const std::string& body) {
  try {
    const json j = json::parse(body);
    std::string content = j.at("choices").at(0).at("message").at("content").get<std::string>();
    const auto words = normalized_words(content);
    if (words.empty()) return std::nullopt;
    if (words.front() == "yes") return true;
    if (words.front() == "no") return false;
  } catch (const json::exception&) {
  }
  return std::nullopt;
}

HttpJudge::HttpJudge(HttpJudgeConfig config) : config_(std::move(config)) {
  const auto scheme_end = config_.url.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("judge URL must include a scheme: " + config_.url);
  const auto path_start = config_.url.find('/', scheme_end + 3);
  scheme_host_port_ = config_.url.substr(0, path_start);
  path_ = path_start == std::string::npos ? "/" : config_.url.substr(path_start);
  if (config_.max_attempts == 0) throw ConfigError("judge max_attempts must be >= 1");
}

JudgeResult HttpJudge::submit(const std::string& question, const std::string& gold, const std::string& response) {
  using Clock = std::chrono::steady_clock;
  const auto deadline = Clock::now() + config_.timeout;
  const json body{{"model", config_.model},
                  {"temperature", 0},
                  {"messages",
                   {{{"role", "system"}, {"content", judge_system_prompt()}},
                    {{"role", "user"}, {"content", judge_user_prompt(question, gold, response)}}}}};
  const std::string payload = body.dump();

  std::string last_error = "no attempt made";
  auto backoff = config_.backoff;
  for (std::size_t attempt = 0; attempt < config_.max_attempts; ++attempt) {
    const auto remaining = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
    if (remaining.count() <= 0) break;

    httplib::Client client(scheme_host_port_);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(remaining);
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(remaining - secs);
    client.set_connection_timeout(secs.count(), usecs.count());
    client.set_read_timeout(secs.count(), usecs.count());
    client.set_write_timeout(secs.count(), usecs.count());
    httplib::Headers headers;
    if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);

    auto res = client.Post(path_, headers, payload, "application/json");
    bool retryable = true;
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
    } else if (res->status == 200) {
      if (auto verdict = parse_judge_reply(res->body)) return {true, *verdict, "external"};
      last_error = "unparseable verdict";
    } else {
      last_error = "HTTP " + std::to_string(res->status);
      retryable = res->status == 429 || res->status >= 500;
    }
    if (!retryable || attempt + 1 == config_.max_attempts) break;
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
    if (left <= backoff) break;
    std::this_thread::sleep_for(backoff);
    backoff *= 2;
  }
  return {false, false, last_error};
}

std::vector<JudgeResult> judge_all(JudgeClient& judge, const std::vector<JudgeRequest>& requests,
                                   std::size_t concurrency) {
  std::vector<JudgeResult> results(requests.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < requests.size(); i = next++) {
      results[i] = judge.submit(requests[i].question, requests[i].gold, requests[i].response);
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(concurrency, requests.size()));
  std::vector<std::jthread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  return results;
}

}  // namespace patchlm
