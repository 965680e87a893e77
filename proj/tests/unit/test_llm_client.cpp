#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "musc/llm_client.hpp"
#include "stub_endpoint.hpp"
#include "test_util.hpp"

using namespace musc;
using namespace musc::llm;
using musc::testing::StubEndpoint;
using musc::testing::TempDir;

namespace {

constexpr const char* kKeyVar = "MUSC_TEST_KEY";
constexpr const char* kSecret = "sk-test-7c1f0d";

struct Fixture {
  TempDir dir{"llm"};
  StubEndpoint stub;
  std::mutex log_mu;
  std::vector<std::string> log_lines;

  Fixture() { ::setenv(kKeyVar, kSecret, 1); }

  EndpointConfig config() {
    EndpointConfig c;
    c.base_url = stub.base_url();
    c.api_key_env = kKeyVar;
    c.cache_dir = dir.file("cache");
    c.backoff_base_s = 0.01;
    c.timeout_s = 5;
    return c;
  }

  LogSink sink() {
    return [this](const std::string& line) {
      std::lock_guard lock(log_mu);
      log_lines.push_back(line);
    };
  }
};

ChatRequest hello(const std::string& text = "hello") { return {{{"user", text}}, 0.5}; }

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(ChatClient, MissingKeyIsConfigError) {
  Fixture f;
  auto cfg = f.config();
  cfg.api_key_env = "MUSC_TEST_KEY_UNSET";
  ::unsetenv("MUSC_TEST_KEY_UNSET");
  EXPECT_THROW(ChatClient{cfg}, ConfigError);
  ::setenv("MUSC_TEST_KEY_UNSET", "", 1);
  EXPECT_THROW(ChatClient{cfg}, ConfigError);
}

TEST(ChatClient, RetriesTransientFailures) {
  Fixture f;
  f.stub.script({500, 500});
  ChatClient client(f.config(), f.sink());
  EXPECT_EQ(client.complete(hello()), "reply to: hello");
  EXPECT_EQ(f.stub.requests(), 3);
  EXPECT_EQ(client.stats().requests.load(), 3);
  EXPECT_EQ(client.stats().retries.load(), 2);
  EXPECT_EQ(f.stub.last_authorization(), std::string("Bearer ") + kSecret);
}

TEST(ChatClient, GivesUpAfterMaxRetries) {
  Fixture f;
  f.stub.script({503, 429, 500, 502, 500});
  ChatClient client(f.config());
  try {
    client.complete(hello());
    FAIL();
  } catch (const TransportError& e) {
    EXPECT_EQ(e.attempts(), 4);
    EXPECT_EQ(e.status(), 502);
  }
  EXPECT_EQ(f.stub.requests(), 4);
}

TEST(ChatClient, ClientErrorsAreNotRetried) {
  Fixture f;
  f.stub.script({401});
  ChatClient client(f.config());
  try {
    client.complete(hello());
    FAIL();
  } catch (const TransportError& e) {
    EXPECT_EQ(e.attempts(), 1);
    EXPECT_EQ(e.status(), 401);
  }
}

TEST(ChatClient, UnreachableEndpoint) {
  Fixture f;
  auto cfg = f.config();
  cfg.base_url = "http://127.0.0.1:1";
  cfg.max_retries = 1;
  ChatClient client(cfg);
  try {
    client.complete(hello());
    FAIL();
  } catch (const TransportError& e) {
    EXPECT_EQ(e.status(), 0);
    EXPECT_EQ(e.attempts(), 2);
  }
}

TEST(ChatClient, MalformedReplyKeepsRawText) {
  Fixture f;
  f.stub.set_garbage(true);
  ChatClient client(f.config());
  try {
    client.complete(hello());
    FAIL();
  } catch (const ReplyParseError& e) {
    EXPECT_NE(e.raw().find("not json"), std::string::npos);
  }
}

TEST(ChatClient, BoundedParallelism) {
  Fixture f;
  f.stub.set_delay_ms(60);
  auto cfg = f.config();
  cfg.max_parallel = 2;
  ChatClient client(cfg);
  std::vector<std::thread> threads;
  for (int i = 0; i < 8; ++i) {
    threads.emplace_back([&client, i] { client.complete(hello("q" + std::to_string(i))); });
  }
  for (auto& t : threads) t.join();
  EXPECT_EQ(f.stub.requests(), 8);
  EXPECT_LE(f.stub.max_in_flight(), 2);
  EXPECT_GE(f.stub.max_in_flight(), 1);
}

TEST(ChatClient, CacheIsIdempotentAndKeyFree) {
  Fixture f;
  f.stub.script({500});
  {
    ChatClient client(f.config(), f.sink());
    const auto a = client.complete(hello());
    const auto b = client.complete(hello());
    EXPECT_EQ(a, b);
    EXPECT_EQ(client.stats().cache_hits.load(), 1);
    EXPECT_NE(client.cache_key(hello("x")), client.cache_key(hello("y")));
  }
  EXPECT_EQ(f.stub.requests(), 2);
  {
    ChatClient again(f.config(), f.sink());
    EXPECT_EQ(again.complete(hello()), "reply to: hello");
    EXPECT_EQ(again.stats().requests.load(), 0);
  }
  int files = 0;
  for (const auto& e : std::filesystem::directory_iterator(f.config().cache_dir)) {
    ++files;
    EXPECT_EQ(e.path().extension(), ".json");
    EXPECT_EQ(slurp(e.path()).find(kSecret), std::string::npos);
  }
  EXPECT_EQ(files, 1);
  ASSERT_FALSE(f.log_lines.empty());
  for (const auto& line : f.log_lines) EXPECT_EQ(line.find(kSecret), std::string::npos);
}

TEST(Templates, FillAndParse) {
  EXPECT_EQ(fill_template("a {x} b {y}", {{"x", "1"}, {"y", "2"}}), "a 1 b 2");
  EXPECT_THROW(fill_template("a {x} b {y}", {{"x", "1"}}), ConfigError);
  const auto d = PromptTemplateSet::defaults();
  EXPECT_NO_THROW(fill_template(d.decompose.user, {{"instruction", "x"}}));
  EXPECT_NO_THROW(fill_template(d.self_instruct.user, {{"topic", "x"}, {"count", "3"}}));

  EXPECT_EQ(parse_numbered_list("Sure:\n1. write\n2) be short \r\n 3 . end\n"),
            (std::vector<std::string>{"write", "be short", "end"}));
  EXPECT_THROW(parse_numbered_list("no list here"), ReplyParseError);
  EXPECT_EQ(parse_text("  hi there \n"), "hi there");
  EXPECT_THROW(parse_text(" \n"), ReplyParseError);
}

TEST(NlPipeline, DecomposeDropoutRecombine) {
  Fixture f;
  ChatClient client(f.config());
  const auto t = PromptTemplateSet::defaults();
  const auto parts = decompose_nl(client, t, "write a poem; use 4 lines; mention cats; be sad");
  ASSERT_EQ(parts.size(), 4u);
  EXPECT_EQ(parts[0], "write a poem");
  Rng rng(1);
  const auto d = dropout_recombine_nl(client, t, parts, 0.3, rng);
  EXPECT_EQ(d.chosen_instruction, "write a poem; use 4 lines; mention cats; be sad");
  ASSERT_EQ(d.dropped_indices.size(), 1u);
  EXPECT_GE(d.dropped_indices[0], 2);
  EXPECT_EQ(d.rejected_instruction.find(parts[d.dropped_indices[0] - 1]), std::string::npos);
  EXPECT_EQ(d.rejected_instruction.rfind("write a poem", 0), 0u);

  Rng rng2(1);
  const auto n = dropout_recombine_nl(client, t, parts, 0.3, rng2, data::Scheme::kNegate);
  EXPECT_NE(n.rejected_instruction.find("not " + parts[n.dropped_indices[0] - 1]),
            std::string::npos);
  EXPECT_THROW(dropout_recombine_nl(client, t, {"a", "b"}, 0.3, rng), FilterRejection);
}

TEST(NlPipeline, BuildPairsAndWriteDataset) {
  Fixture f;
  ChatClient client(f.config());
  const std::vector<std::string> ins{"task one; be brief; use lists; cite",
                                     "task two; short",
                                     "task three; a; b; c; d",
                                     "task four; x; y"};
  NlBuildConfig cfg;
  cfg.seed = 3;
  cfg.config_hash = "cafe";
  const auto res = build_nl_pairs(client, PromptTemplateSet::defaults(), ins, cfg);
  ASSERT_EQ(res.pairs.size(), 3u);
  ASSERT_EQ(res.failures.size(), 1u);
  EXPECT_EQ(res.failures[0].index, 1u);
  EXPECT_NE(res.failures[0].message.find("too_few"), std::string::npos);
  for (const auto& p : res.pairs) {
    EXPECT_NE(p.chosen_response, p.rejected_response);
    EXPECT_EQ(p.chosen_response, "reply to: " + p.chosen_instruction);
    for (int idx : p.dropped_indices) EXPECT_GE(idx, 2);
    EXPECT_EQ(p.config_hash, "cafe");
  }
  const auto path = f.dir.file("nl.jsonl");
  write_nl_dataset(res.pairs, path);
  std::ifstream in(path);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) EXPECT_NO_THROW(data::validate_record(line, ++n));
  EXPECT_EQ(n, 3u);
  EXPECT_EQ(slurp(path).find(kSecret), std::string::npos);
}

TEST(NlPipeline, InstructionFile) {
  TempDir dir("nlfile");
  std::ofstream(dir.file("i.jsonl")) << "\"plain\"\n\n{\"instruction\": \"obj\"}\n";
  EXPECT_EQ(read_nl_instructions(dir.file("i.jsonl")), (std::vector<std::string>{"plain", "obj"}));
  std::ofstream(dir.file("bad.jsonl")) << "\"ok\"\n42\n";
  EXPECT_THROW(read_nl_instructions(dir.file("bad.jsonl")), SchemaError);
}
