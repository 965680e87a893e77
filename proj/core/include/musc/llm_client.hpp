#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "musc/common.hpp"
#include "musc/datagen.hpp"

namespace musc::llm {

struct EndpointConfig {
  std::string base_url = "http://127.0.0.1:8080";
  std::string path = "/v1/chat/completions";
  std::string api_key_env = "MUSC_API_KEY";
  std::string model = "default";
  double timeout_s = 60.0;
  int max_retries = 3;
  double backoff_base_s = 0.5;
  int max_parallel = 4;
  std::string cache_dir = ".musc-cache";

  void validate() const;
};

struct ChatMessage {
  std::string role;
  std::string content;
};

struct ChatRequest {
  std::vector<ChatMessage> messages;
  double temperature = 0.5;
};

// Endpoint unreachable or still failing after all retries.
class TransportError : public Error {
 public:
  TransportError(const std::string& what, int status, int attempts)
      : Error(what), status_(status), attempts_(attempts) {}
  int status() const noexcept { return status_; }
  int attempts() const noexcept { return attempts_; }

 private:
  int status_;
  int attempts_;
};

// Reply did not have the expected structure; the raw text is kept.
class ReplyParseError : public Error {
 public:
  ReplyParseError(const std::string& what, std::string raw)
      : Error(what), raw_(std::move(raw)) {}
  const std::string& raw() const noexcept { return raw_; }

 private:
  std::string raw_;
};

struct ClientStats {
  std::atomic<int> requests{0};  // HTTP requests actually sent
  std::atomic<int> retries{0};
  std::atomic<int> cache_hits{0};
};

using LogSink = std::function<void(const std::string&)>;

// Chat-completion client with a content-addressed reply cache, retry with
// exponential backoff, and at most max_parallel requests in flight.
class ChatClient {
 public:
  // Reads the key from the configured environment variable; throws
  // ConfigError when it is unset or empty.
  explicit ChatClient(EndpointConfig cfg, LogSink log = {});
  ~ChatClient();
  ChatClient(const ChatClient&) = delete;
  ChatClient& operator=(const ChatClient&) = delete;

  std::string complete(const ChatRequest& request);

  const EndpointConfig& config() const noexcept { return cfg_; }
  const ClientStats& stats() const noexcept { return stats_; }

  // Cache key of a request (sha256 of model, temperature and messages).
  std::string cache_key(const ChatRequest& request) const;

 private:
  std::string request_body(const ChatRequest& request) const;
  std::string send(const std::string& body);
  void log(const std::string& line) const;

  EndpointConfig cfg_;
  std::string key_;
  LogSink log_;
  ClientStats stats_;
  struct Gate;
  std::unique_ptr<Gate> gate_;
};

enum class ParseRule { kNumberedList, kText };

struct PromptTemplate {
  std::string system;
  std::string user;  // {placeholders} filled by fill_template
  ParseRule rule = ParseRule::kNumberedList;
};

struct PromptTemplateSet {
  PromptTemplate decompose;
  PromptTemplate recombine;
  PromptTemplate self_instruct;
  PromptTemplate negate;
  PromptTemplate substitute;

  static PromptTemplateSet defaults();
};

// Replaces every {name}; throws ConfigError if a placeholder is left unfilled.
std::string fill_template(const std::string& text,
                          const std::map<std::string, std::string>& values);

// Items of a "1. ..." / "2) ..." list; throws ReplyParseError when none.
std::vector<std::string> parse_numbered_list(const std::string& reply);
std::string parse_text(const std::string& reply);

std::vector<std::string> decompose_nl(ChatClient& client, const PromptTemplateSet& templates,
                                      const std::string& instruction);

struct NlDropout {
  std::string chosen_instruction;
  std::string rejected_instruction;
  std::vector<int> dropped_indices;  // 1-based
};

// Throws FilterRejection outside [min, max] constraints.
class FilterRejection : public Error {
 public:
  using Error::Error;
};

NlDropout dropout_recombine_nl(ChatClient& client, const PromptTemplateSet& templates,
                               const std::vector<std::string>& constraints, double alpha,
                               Rng& rng, data::Scheme scheme = data::Scheme::kDropout,
                               int min_constraints = 3, int max_constraints = 10);

struct NlPair {
  std::string chosen_instruction;
  std::string chosen_response;
  std::string rejected_instruction;
  std::string rejected_response;
  std::vector<int> dropped_indices;
  data::Scheme scheme = data::Scheme::kDropout;
  std::uint64_t seed = 0;
  std::string endpoint;
  std::string config_hash;
};

struct NlBuildConfig {
  double alpha = 0.3;
  data::Scheme scheme = data::Scheme::kDropout;
  int min_constraints = 3;
  int max_constraints = 10;
  std::uint64_t seed = 0;
  std::string config_hash;
};

struct NlFailure {
  std::size_t index;
  std::string message;
};

struct NlBuildResult {
  std::vector<NlPair> pairs;
  std::vector<NlFailure> failures;
};

// Instruction file: one JSON string (or {"instruction": "..."}) per line.
std::vector<std::string> read_nl_instructions(const std::string& path);

NlBuildResult build_nl_pairs(ChatClient& client, const PromptTemplateSet& templates,
                             const std::vector<std::string>& instructions,
                             const NlBuildConfig& cfg);

// Same record layout as token datasets, with text in place of token ids and
// no weight fields.
void write_nl_dataset(const std::vector<NlPair>& pairs, const std::string& path);

}  // namespace musc::llm
