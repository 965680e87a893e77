#include "musc/llm_client.hpp"

#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <regex>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "json.hpp"

namespace musc::llm {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

void EndpointConfig::validate() const {
  if (base_url.empty()) throw ConfigError("endpoint.base_url must not be empty");
  if (api_key_env.empty()) throw ConfigError("endpoint.api_key_env must not be empty");
  if (max_retries < 0) throw ConfigError("endpoint.max_retries must be >= 0");
  if (max_parallel < 1) throw ConfigError("endpoint.max_parallel must be >= 1");
  if (!(timeout_s > 0)) throw ConfigError("endpoint.timeout_s must be > 0");
  if (backoff_base_s < 0) throw ConfigError("endpoint.backoff_base_s must be >= 0");
  if (cache_dir.empty()) throw ConfigError("endpoint.cache_dir must not be empty");
}

struct ChatClient::Gate {
  std::mutex mu;
  std::condition_variable cv;
  int free = 0;
};

namespace {

class GateSlot {
 public:
  GateSlot(std::mutex& mu, std::condition_variable& cv, int& free)
      : mu_(mu), cv_(cv), free_(free) {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return free_ > 0; });
    --free_;
  }
  ~GateSlot() {
    {
      std::lock_guard lock(mu_);
      ++free_;
    }
    cv_.notify_one();
  }
  GateSlot(const GateSlot&) = delete;
  GateSlot& operator=(const GateSlot&) = delete;

 private:
  std::mutex& mu_;
  std::condition_variable& cv_;
  int& free_;
};

bool retryable(int status) { return status == 408 || status == 429 || status >= 500; }

}  // namespace

ChatClient::ChatClient(EndpointConfig cfg, LogSink log)
    : cfg_(std::move(cfg)), log_(std::move(log)), gate_(std::make_unique<Gate>()) {
  cfg_.validate();
  const char* key = std::getenv(cfg_.api_key_env.c_str());
  if (key == nullptr || *key == '\0') {
    throw ConfigError("environment variable " + cfg_.api_key_env +
                      " is not set; it must hold the endpoint API key");
  }
  key_ = key;
  gate_->free = cfg_.max_parallel;
  std::error_code ec;
  fs::create_directories(cfg_.cache_dir, ec);
  if (ec) throw ConfigError("cannot create cache directory '" + cfg_.cache_dir + "'");
}

ChatClient::~ChatClient() = default;

void ChatClient::log(const std::string& line) const {
  if (log_) log_(line);
}

std::string ChatClient::request_body(const ChatRequest& request) const {
  json body;
  body["model"] = cfg_.model;
  body["temperature"] = request.temperature;
  json msgs = json::array();
  for (const auto& m : request.messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
  body["messages"] = msgs;
  return body.dump();
}

std::string ChatClient::cache_key(const ChatRequest& request) const {
  return sha256_hex(request_body(request));
}

std::string ChatClient::send(const std::string& body) {
  const int attempts = cfg_.max_retries + 1;
  int last_status = 0;
  std::string last_error;
  for (int attempt = 0; attempt < attempts; ++attempt) {
    if (attempt > 0) {
      stats_.retries.fetch_add(1);
      const double delay = cfg_.backoff_base_s * static_cast<double>(1 << (attempt - 1));
      std::this_thread::sleep_for(std::chrono::duration<double>(delay));
    }
    httplib::Result res;
    {
      GateSlot slot(gate_->mu, gate_->cv, gate_->free);
      httplib::Client http(cfg_.base_url);
      const auto secs = static_cast<time_t>(cfg_.timeout_s);
      const auto usecs = static_cast<time_t>((cfg_.timeout_s - static_cast<double>(secs)) * 1e6);
      http.set_connection_timeout(secs, usecs);
      http.set_read_timeout(secs, usecs);
      http.set_write_timeout(secs, usecs);
      httplib::Headers headers{{"Authorization", "Bearer " + key_}};
      stats_.requests.fetch_add(1);
      res = http.Post(cfg_.path, headers, body, "application/json");
    }
    if (!res) {
      last_status = 0;
      last_error = httplib::to_string(res.error());
      log("attempt " + std::to_string(attempt + 1) + "/" + std::to_string(attempts) +
          ": transport error: " + last_error);
      continue;
    }
    last_status = res->status;
    log("attempt " + std::to_string(attempt + 1) + "/" + std::to_string(attempts) +
        ": HTTP " + std::to_string(res->status));
    if (res->status == 200) {
      try {
        const auto reply = json::parse(res->body);
        return reply.at("choices").at(0).at("message").at("content").get<std::string>();
      } catch (const json::exception&) {
        throw ReplyParseError("endpoint reply is not a chat completion", res->body);
      }
    }
    if (!retryable(res->status)) {
      throw TransportError("endpoint returned HTTP " + std::to_string(res->status), res->status,
                           attempt + 1);
    }
    last_error = "HTTP " + std::to_string(res->status);
  }
  throw TransportError("endpoint failed after " + std::to_string(attempts) +
                           " attempts: " + last_error,
                       last_status, attempts);
}

std::string ChatClient::complete(const ChatRequest& request) {
  const std::string body = request_body(request);
  const std::string key = sha256_hex(body);
  const fs::path file = fs::path(cfg_.cache_dir) / (key + ".json");
  if (fs::exists(file)) {
    std::ifstream in(file);
    std::stringstream ss;
    ss << in.rdbuf();
    try {
      auto cached = json::parse(ss.str());
      stats_.cache_hits.fetch_add(1);
      return cached.at("reply").get<std::string>();
    } catch (const json::exception&) {
      log("ignoring unreadable cache entry " + key);
    }
  }
  std::string reply = send(body);
  json entry;
  entry["key"] = key;
  entry["request"] = json::parse(body);
  entry["reply"] = reply;
  std::ostringstream tmp_name;
  tmp_name << key << ".tmp." << std::this_thread::get_id();
  const fs::path tmp = fs::path(cfg_.cache_dir) / tmp_name.str();
  {
    std::ofstream out(tmp);
    if (!out) throw Error("cannot write cache entry in '" + cfg_.cache_dir + "'");
    out << entry.dump() << "\n";
  }
  fs::rename(tmp, file);
  return reply;
}

PromptTemplateSet PromptTemplateSet::defaults() {
  PromptTemplateSet t;
  const std::string sys = "You are a careful assistant that edits instructions.";
  t.decompose = {sys,
                 "Break the instruction below into its atomic constraints. The first item "
                 "must be the core task; every later item is one requirement on the "
                 "response. Reply with a numbered list only.\n\nInstruction:\n{instruction}",
                 ParseRule::kNumberedList};
  t.recombine = {sys,
                 "Merge these constraints into a single natural instruction. Keep every "
                 "constraint, add nothing, and reply with the instruction only.\n\n"
                 "Constraints:\n{constraints}",
                 ParseRule::kText};
  t.self_instruct = {sys,
                     "Write a task about {topic} followed by {count} requirements on the "
                     "response. Reply with a numbered list: the task first, then one "
                     "requirement per item.",
                     ParseRule::kNumberedList};
  t.negate = {sys,
              "Rewrite this constraint so that it demands the opposite. Reply with the "
              "rewritten constraint only.\n\nConstraint: {constraint}",
              ParseRule::kText};
  t.substitute = {sys,
                  "Replace this constraint with a different one of the same kind that a "
                  "response satisfying the original would likely violate. Reply with the "
                  "new constraint only.\n\nConstraint: {constraint}",
                  ParseRule::kText};
  return t;
}

std::string fill_template(const std::string& text,
                          const std::map<std::string, std::string>& values) {
  static const std::regex placeholder(R"(\{([a-z_]+)\})");
  std::string out;
  auto begin = std::sregex_iterator(text.begin(), text.end(), placeholder);
  std::size_t last = 0;
  for (auto it = begin; it != std::sregex_iterator(); ++it) {
    const auto& m = *it;
    const auto found = values.find(m[1].str());
    if (found == values.end()) {
      throw ConfigError("template placeholder {" + m[1].str() + "} has no value");
    }
    out.append(text, last, static_cast<std::size_t>(m.position(0)) - last);
    out += found->second;
    last = static_cast<std::size_t>(m.position(0) + m.length(0));
  }
  out.append(text, last, std::string::npos);
  return out;
}

std::vector<std::string> parse_numbered_list(const std::string& reply) {
  static const std::regex item(R"(^\s*\d+\s*[.)]\s*(.*\S)\s*$)");
  std::vector<std::string> out;
  std::istringstream in(reply);
  std::string line;
  std::smatch m;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (std::regex_match(line, m, item)) out.push_back(m[1].str());
  }
  if (out.empty()) throw ReplyParseError("reply contains no numbered list", reply);
  return out;
}

std::string parse_text(const std::string& reply) {
  const auto b = reply.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) throw ReplyParseError("reply is empty", reply);
  const auto e = reply.find_last_not_of(" \t\r\n");
  return reply.substr(b, e - b + 1);
}

namespace {

std::string ask(ChatClient& client, const PromptTemplate& t,
                const std::map<std::string, std::string>& values, double temperature) {
  ChatRequest req;
  req.temperature = temperature;
  if (!t.system.empty()) req.messages.push_back({"system", t.system});
  req.messages.push_back({"user", fill_template(t.user, values)});
  return client.complete(req);
}

constexpr double kTemperature = 0.5;

std::string numbered(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    out += std::to_string(i + 1) + ". " + items[i] + "\n";
  }
  return out;
}

std::string recombine_nl(ChatClient& client, const PromptTemplateSet& templates,
                         const std::vector<std::string>& constraints) {
  return parse_text(
      ask(client, templates.recombine, {{"constraints", numbered(constraints)}}, kTemperature));
}

}  // namespace

std::vector<std::string> decompose_nl(ChatClient& client, const PromptTemplateSet& templates,
                                      const std::string& instruction) {
  if (instruction.find_first_not_of(" \t\r\n") == std::string::npos) {
    throw Error("decompose_nl: empty instruction");
  }
  return parse_numbered_list(
      ask(client, templates.decompose, {{"instruction", instruction}}, kTemperature));
}

NlDropout dropout_recombine_nl(ChatClient& client, const PromptTemplateSet& templates,
                               const std::vector<std::string>& constraints, double alpha,
                               Rng& rng, data::Scheme scheme, int min_constraints,
                               int max_constraints) {
  const int n = static_cast<int>(constraints.size());
  if (n < min_constraints) {
    throw FilterRejection("too_few: " + std::to_string(n) + " constraints (minimum " +
                          std::to_string(min_constraints) + ")");
  }
  if (n > max_constraints) {
    throw FilterRejection("too_many: " + std::to_string(n) + " constraints (maximum " +
                          std::to_string(max_constraints) + ")");
  }
  NlDropout out;
  out.dropped_indices = data::select_noise_indices(n, alpha, rng);
  std::vector<std::string> noised;
  std::size_t next = 0;
  for (int i = 1; i <= n; ++i) {
    const auto& c = constraints[static_cast<std::size_t>(i - 1)];
    const bool hit = next < out.dropped_indices.size() && out.dropped_indices[next] == i;
    if (!hit) {
      noised.push_back(c);
      continue;
    }
    ++next;
    if (scheme == data::Scheme::kNegate) {
      noised.push_back(parse_text(ask(client, templates.negate, {{"constraint", c}}, kTemperature)));
    } else if (scheme == data::Scheme::kSubstitute) {
      noised.push_back(
          parse_text(ask(client, templates.substitute, {{"constraint", c}}, kTemperature)));
    }
  }
  out.chosen_instruction = recombine_nl(client, templates, constraints);
  out.rejected_instruction = recombine_nl(client, templates, noised);
  return out;
}

std::vector<std::string> read_nl_instructions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read instruction file '" + path + "'");
  std::vector<std::string> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      if (j.is_string()) {
        out.push_back(j.get<std::string>());
      } else {
        out.push_back(j.at("instruction").get<std::string>());
      }
    } catch (const json::exception&) {
      throw SchemaError("expected a JSON string or an object with 'instruction'", lineno,
                        "instruction");
    }
  }
  return out;
}

NlBuildResult build_nl_pairs(ChatClient& client, const PromptTemplateSet& templates,
                             const std::vector<std::string>& instructions,
                             const NlBuildConfig& cfg) {
  std::vector<std::optional<NlPair>> pairs(instructions.size());
  std::vector<std::string> errors(instructions.size());
  data::parallel_for(instructions.size(), client.config().max_parallel, [&](std::size_t i) {
    const std::uint64_t seed = derive_seed(cfg.seed, i);
    Rng rng(seed);
    try {
      const auto constraints = decompose_nl(client, templates, instructions[i]);
      const auto d = dropout_recombine_nl(client, templates, constraints, cfg.alpha, rng,
                                          cfg.scheme, cfg.min_constraints, cfg.max_constraints);
      ChatRequest chosen{{{"user", d.chosen_instruction}}, kTemperature};
      ChatRequest rejected{{{"user", d.rejected_instruction}}, kTemperature};
      NlPair p;
      p.chosen_instruction = d.chosen_instruction;
      p.rejected_instruction = d.rejected_instruction;
      p.chosen_response = client.complete(chosen);
      p.rejected_response = client.complete(rejected);
      if (p.chosen_response == p.rejected_response) {
        throw FilterRejection("identical_responses");
      }
      p.dropped_indices = d.dropped_indices;
      p.scheme = cfg.scheme;
      p.seed = seed;
      p.endpoint = client.config().base_url + " " + client.config().model;
      p.config_hash = cfg.config_hash;
      pairs[i] = std::move(p);
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      errors[i] = e.what();
    }
  });
  NlBuildResult result;
  for (std::size_t i = 0; i < instructions.size(); ++i) {
    if (pairs[i]) {
      result.pairs.push_back(std::move(*pairs[i]));
    } else {
      result.failures.push_back({i, errors[i]});
    }
  }
  return result;
}

void write_nl_dataset(const std::vector<NlPair>& pairs, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write dataset '" + path + "'");
  for (const auto& p : pairs) {
    json j;
    j["chosen_ins"] = p.chosen_instruction;
    j["chosen_resp"] = p.chosen_response;
    j["rejected_ins"] = p.rejected_instruction;
    j["rejected_resp"] = p.rejected_response;
    j["dropped_indices"] = p.dropped_indices;
    j["scheme"] = data::scheme_name(p.scheme);
    j["provenance"] = {{"seed", p.seed},
                       {"checkpoint", p.endpoint},
                       {"metric", ""},
                       {"source", "preinst-endpoint"},
                       {"config_hash", p.config_hash}};
    out << j.dump() << "\n";
  }
  if (!out) throw Error("error while writing dataset '" + path + "'");
}

}  // namespace musc::llm
