#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "commands.hpp"
#include "pipeline.hpp"
#include "run_config.hpp"
#include "stub_endpoint.hpp"
#include "test_util.hpp"

using namespace musc;
using namespace musc::cli;
using musc::testing::StubEndpoint;
using musc::testing::TempDir;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"({
  "preset": "desk",
  "seed": 5,
  "model": {"embed_dim": 16, "n_layers": 1, "n_heads": 2, "context_len": 64},
  "sft": {"n_examples": 40, "epochs": 1, "batch_size": 8, "max_constraints": 4},
  "dropout": {"max_constraints": 5},
  "train": {"epochs": 1, "batch_size": 4},
  "eval": {"n_instructions": 12, "max_constraints": 5}
})";

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int lines(const std::string& path) {
  std::ifstream in(path);
  std::string l;
  int n = 0;
  while (std::getline(in, l)) n += !l.empty();
  return n;
}

struct Cli {
  TempDir dir{"cli"};
  std::string cfg = dir.file("tiny.json");
  Cli() { std::ofstream(cfg) << kTinyConfig; }

  int operator()(std::vector<std::string> args) {
    ::testing::internal::CaptureStdout();
    ::testing::internal::CaptureStderr();
    const int code = run(args);
    out = ::testing::internal::GetCapturedStdout();
    err = ::testing::internal::GetCapturedStderr();
    return code;
  }
  std::string f(const std::string& name) const { return dir.file(name); }
  std::string out, err;
};

}  // namespace

TEST(RunConfig, DefaultsFollowPaperPreset) {
  const RunConfig c;
  EXPECT_EQ(c.preset, "paper");
  EXPECT_EQ(c.train.lr, 1e-6);
  EXPECT_EQ(c.train.epochs, 2);
  EXPECT_EQ(c.train.batch_size, 64);
  EXPECT_EQ(c.train.loss.method, loss::Method::kTdpo);
  EXPECT_EQ(c.train.loss.beta, 0.2);
  EXPECT_EQ(c.train.loss.sft_mix, 0.1);
  EXPECT_EQ(c.calibration.gamma, 2.0);
  EXPECT_EQ(c.calibration.metric, conf::Metric::kEntropy);
  EXPECT_EQ(c.dropout.alpha, 0.3);
  EXPECT_EQ(c.dropout.temperature, 0.5);
  EXPECT_EQ(c.dropout.min_constraints, 3);
  EXPECT_EQ(c.dropout.max_constraints, 10);
  EXPECT_EQ(c.endpoint.max_retries, 3);
  EXPECT_EQ(c.sft.witness, data::WitnessStyle::kCanonical);
  EXPECT_NO_THROW(c.validate());
}

TEST(RunConfig, RoundTripAndHash) {
  const auto c = parse_run_config(kTinyConfig);
  EXPECT_EQ(c.train.batch_size, 4);
  EXPECT_EQ(c.train.lr, train::TrainConfig::desk().lr);
  const auto text = to_json(c);
  EXPECT_EQ(to_json(parse_run_config(text)), text);
  EXPECT_EQ(config_hash(c), config_hash(parse_run_config(text)));
  auto d = c;
  d.dropout.alpha = 0.5;
  EXPECT_NE(config_hash(c), config_hash(d));
  EXPECT_EQ(parse_run_config(R"({"loss": {"method": "simpo"}})").train.loss.beta, 3.0);
  EXPECT_EQ(parse_run_config(R"({"loss": {"method": "ipo"}})").train.loss.beta, 1.0);
  EXPECT_EQ(parse_run_config(R"({"sft": {"witness": "sampled"}})").sft.witness,
            data::WitnessStyle::kSampled);
}

TEST(RunConfig, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(parse_run_config(R"({"trian": {}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"train": {"learning_rate": 1}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"calibration": {"gamma": 0.5}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"calibration": {"metric": "kldiv", "calibrated": false}})"),
               ConfigError);
  EXPECT_THROW(parse_run_config(R"({"dropout": {"alpha": 1.5}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"preset": "giant"})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"sft": {"witness": "longest"}})"), ConfigError);
  EXPECT_THROW(parse_run_config("{not json"), ConfigError);
}

TEST(Cli, UsageErrorsExitOne) {
  Cli cli;
  EXPECT_EQ(cli({}), 1);
  EXPECT_EQ(cli({"frobnicate"}), 1);
  EXPECT_EQ(cli({"train", "--data", "x"}), 1);
  EXPECT_EQ(cli({"eval", "--config", cli.f("missing.json"), "--oracle"}), 1);
  std::ofstream(cli.f("bad.json")) << R"({"sft": {"epoch": 3}})";
  EXPECT_EQ(cli({"gen-instructions", "--config", cli.f("bad.json"), "--out", cli.f("i")}), 1);
  EXPECT_NE(cli.err.find("epoch"), std::string::npos);
  EXPECT_EQ(cli({"--help"}), 0);
}

TEST(Cli, RuntimeErrorsExitTwo) {
  Cli cli;
  std::ofstream(cli.f("junk.jsonl")) << "{\"chosen_instruction\": 3}\n";
  EXPECT_EQ(cli({"weights-inspect", "--data", cli.f("junk.jsonl")}), 2);
  EXPECT_EQ(cli({"compare", cli.f("nope_a"), cli.f("nope_b")}), 2);
}

TEST(Cli, EndpointModeWithoutKeyIsConfigError) {
  Cli cli;
  ::unsetenv("MUSC_API_KEY");
  std::ofstream(cli.f("nl.jsonl")) << "\"task; a; b; c\"\n";
  EXPECT_EQ(cli({"gen-data", "--config", cli.cfg, "--mode", "preinst-endpoint", "--instructions",
                 cli.f("nl.jsonl"), "--out", cli.f("nl_pairs.jsonl")}),
            1);
  EXPECT_NE(cli.err.find("MUSC_API_KEY"), std::string::npos);
}

TEST(Cli, EndpointModeAgainstStub) {
  Cli cli;
  StubEndpoint stub;
  ::setenv("MUSC_API_KEY", "sk-cli-test", 1);
  std::ofstream(cli.f("ep.json")) << R"({"endpoint": {"base_url": ")" << stub.base_url()
                                  << R"(", "cache_dir": ")" << cli.f("cache") << R"("}})";
  std::ofstream(cli.f("nl.jsonl")) << "\"task one; a; b; c\"\n\"task two; d\"\n";
  EXPECT_EQ(cli({"gen-data", "--config", cli.f("ep.json"), "--mode", "preinst-endpoint",
                 "--instructions", cli.f("nl.jsonl"), "--out", cli.f("nl_pairs.jsonl")}),
            0);
  EXPECT_EQ(lines(cli.f("nl_pairs.jsonl")), 1);
  EXPECT_NE(cli.out.find("failures: 1"), std::string::npos);
  EXPECT_EQ(slurp(cli.f("nl_pairs.jsonl.config.json")).find("sk-cli-test"), std::string::npos);
  ::unsetenv("MUSC_API_KEY");
}

TEST(Cli, EndToEndPipeline) {
  Cli cli;
  const auto& c = cli.cfg;
  ASSERT_EQ(cli({"gen-instructions", "--config", c, "--n", "15", "--out", cli.f("ins.jsonl")}), 0);
  EXPECT_EQ(lines(cli.f("ins.jsonl")), 15);
  EXPECT_TRUE(fs::exists(cli.f("ins.jsonl.config.json")));

  ASSERT_EQ(cli({"sft", "--config", c, "--out", cli.f("sft")}), 0) << cli.err;
  EXPECT_TRUE(fs::exists(cli.f("sft/config.json")));
  EXPECT_TRUE(fs::exists(cli.f("sft/checkpoint")));

  ASSERT_EQ(cli({"gen-data", "--config", c, "--checkpoint", cli.f("sft"), "--n", "12", "--out",
                 cli.f("pairs.jsonl")}),
            0)
      << cli.err;
  ASSERT_GT(lines(cli.f("pairs.jsonl")), 0);

  ASSERT_EQ(cli({"gen-data", "--config", c, "--checkpoint", cli.f("sft"), "--mode",
                 "preinst-file", "--scheme", "negate", "--instructions", cli.f("ins.jsonl"),
                 "--out", cli.f("neg.jsonl")}),
            0)
      << cli.err;

  EXPECT_EQ(cli({"train", "--config", c, "--data", cli.f("pairs.jsonl"), "--checkpoint",
                 cli.f("sft"), "--out", cli.f("run")}),
            1);
  EXPECT_NE(cli.err.find("attach-weights"), std::string::npos);

  ASSERT_EQ(cli({"attach-weights", "--config", c, "--data", cli.f("pairs.jsonl"), "--checkpoint",
                 cli.f("sft"), "--out", cli.f("weighted.jsonl")}),
            0)
      << cli.err;
  ASSERT_EQ(cli({"weights-inspect", "--data", cli.f("weighted.jsonl"), "--index", "0"}), 0);
  EXPECT_NE(cli.out.find("weight"), std::string::npos);
  EXPECT_EQ(cli({"weights-inspect", "--data", cli.f("pairs.jsonl")}), 0);
  EXPECT_NE(cli.out.find("attach-weights"), std::string::npos);
  EXPECT_EQ(cli({"weights-inspect", "--data", cli.f("weighted.jsonl"), "--index", "9999"}), 1);

  ASSERT_EQ(cli({"train", "--config", c, "--data", cli.f("weighted.jsonl"), "--checkpoint",
                 cli.f("sft"), "--out", cli.f("run")}),
            0)
      << cli.err;
  EXPECT_TRUE(fs::exists(cli.f("run/metrics.csv")));
  EXPECT_TRUE(fs::exists(cli.f("run/dataset.sha256")));
  EXPECT_FALSE(train::read_metrics(cli.f("run/metrics.csv")).empty());

  ASSERT_EQ(cli({"eval", "--config", c, "--checkpoint", cli.f("sft"), "--out", cli.f("a.jsonl")}),
            0);
  ASSERT_EQ(cli({"eval", "--config", c, "--checkpoint", cli.f("run"), "--out", cli.f("b.jsonl")}),
            0);
  EXPECT_TRUE(fs::exists(cli.f("a.jsonl.txt")));
  ASSERT_EQ(cli({"eval", "--config", c, "--oracle", "--out", cli.f("o.jsonl")}), 0);
  EXPECT_EQ(eval::read_report(cli.f("o.jsonl")).isr, 1.0);
  ASSERT_EQ(cli({"compare", cli.f("a.jsonl"), cli.f("a.jsonl")}), 0);
  EXPECT_NE(cli.out.find("dCSR +0.0000  dISR +0.0000"), std::string::npos);
  ASSERT_EQ(cli({"compare", cli.f("a.jsonl"), cli.f("b.jsonl")}), 0);
}

TEST(Cli, SweepWritesOneRowPerCell) {
  Cli cli;
  ASSERT_EQ(cli({"sweep-alpha", "--config", cli.cfg, "--alphas", "0.2,0.5", "--seeds", "2",
                 "--n", "6", "--out", cli.f("sweep.csv")}),
            0)
      << cli.err;
  std::ifstream in(cli.f("sweep.csv"));
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "alpha,seed,n_pairs,csr,isr,psr,status");
  EXPECT_EQ(lines(cli.f("sweep.csv")), 5);
}

TEST(Pipeline, HeldOutDisjointFromTraining) {
  auto cfg = parse_run_config(kTinyConfig);
  const auto vocab = cfg.make_vocab();
  const auto held = heldout_instructions(cfg, vocab);
  EXPECT_EQ(held.size(), 12u);
  const auto ids = instruction_ids(held);
  auto model = init_model(cfg, cfg.seed);
  const auto pairs = generate_pairs(model, vocab, cfg, 20, cfg.seed);
  EXPECT_EQ(overlap_count(pairs.pairs, ids), 0);
  const auto s1 = seeds_for(1), s2 = seeds_for(1);
  EXPECT_EQ(s1.model, s2.model);
  EXPECT_NE(s1.model, s1.pairs);
}
