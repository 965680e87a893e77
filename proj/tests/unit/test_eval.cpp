#include <gtest/gtest.h>

#include <fstream>

#include "musc/datagen.hpp"
#include "musc/eval.hpp"
#include "test_util.hpp"

using namespace musc;
using namespace musc::eval;
using lang::AtomicConstraint;
using musc::testing::L;
using musc::testing::resp;
using musc::testing::TempDir;
using musc::testing::tiny_model;
using musc::testing::vocab;

namespace {

std::vector<lang::Instruction> held_out(int n, std::uint64_t seed = 7919) {
  return data::sample_instructions(vocab(), n, seed, 3, 10, {});
}

}  // namespace

TEST(ScoreResponses, HandComputedExample) {
  const std::vector<lang::Instruction> ins{
      lang::make_instruction({AtomicConstraint::starts_with(L('a')),
                              AtomicConstraint::length_between(5, 6)},
                             vocab()),
      lang::make_instruction({AtomicConstraint::contains(L('c')),
                              AtomicConstraint::ends_with(L('b')),
                              AtomicConstraint::no_adjacent_repeat()},
                             vocab()),
      lang::make_instruction({AtomicConstraint::contains(L('h')),
                              AtomicConstraint::length_between(1, 3)},
                             vocab())};
  const std::vector<lang::Response> rs{resp("abc"), resp("cab"), resp("ab")};
  const auto r = score_responses(ins, rs);
  EXPECT_EQ(r.n_instructions, 3);
  EXPECT_NEAR(r.csr, (0.5 + 1.0 + 0.5) / 3.0, 1e-15);
  EXPECT_NEAR(r.isr, 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(r.psr, 2.0 / 3.0, 1e-15);
  ASSERT_EQ(r.per_level.size(), 2u);
  EXPECT_EQ(r.per_level.at(2).n, 2);
  EXPECT_EQ(r.per_level.at(2).hsr, 0.0);
  EXPECT_EQ(r.per_level.at(2).ssr, 0.5);
  EXPECT_EQ(r.per_level.at(3).hsr, 1.0);
  EXPECT_EQ(r.per_level.at(3).ssr, 1.0);
  EXPECT_EQ(r.results[1].satisfied, (std::vector<bool>{true, true, true}));
  EXPECT_THROW(score_responses(ins, {resp("a")}), Error);
}

TEST(ScoreResponses, OracleScoresPerfectly) {
  const auto ins = held_out(60);
  const auto rs = data::oracle_responses(ins, vocab(), 1, 12);
  const auto r = score_responses(ins, rs);
  EXPECT_EQ(r.csr, 1.0);
  EXPECT_EQ(r.isr, 1.0);
  EXPECT_EQ(r.psr, 1.0);
}

TEST(Evaluate, UntrainedModelRarelySatisfiesEverything) {
  const lm::PolicyModel model(tiny_model(31));
  const auto ins = held_out(100);
  const auto r = evaluate(model, vocab(), ins, {});
  EXPECT_LT(r.isr, 0.05);
  EXPECT_GE(r.csr, 0.0);
  EXPECT_LE(r.csr, 1.0);
  EXPECT_LE(r.isr, r.psr);
  EXPECT_EQ(r.model_id, model.checkpoint_id());
  EXPECT_EQ(r.instruction_hash, instruction_set_hash(ins));
  for (const auto& res : r.results) EXPECT_LE(res.response.length(), 12u);
}

TEST(Evaluate, SampledDecodingIsSeededAndThreadIndependent) {
  const lm::PolicyModel model(tiny_model(32));
  const auto ins = held_out(24);
  DecodeConfig d;
  d.greedy = false;
  d.seed = 9;
  const auto a = evaluate(model, vocab(), ins, d);
  d.threads = 4;
  const auto b = evaluate(model, vocab(), ins, d);
  ASSERT_EQ(a.results.size(), b.results.size());
  for (std::size_t i = 0; i < a.results.size(); ++i) {
    EXPECT_EQ(a.results[i].response, b.results[i].response);
  }
  EXPECT_EQ(a.csr, b.csr);
}

TEST(Evaluate, OverlengthInstructionThrows) {
  auto cfg = tiny_model(33);
  cfg.context_len = 8;
  const lm::PolicyModel model(cfg);
  EXPECT_THROW(evaluate(model, vocab(), held_out(2), {}), Error);
}

TEST(Compare, ZeroSymmetricAndChecked) {
  const auto ins = held_out(30);
  const auto oracle = score_responses(ins, data::oracle_responses(ins, vocab(), 2, 12));
  const lm::PolicyModel model(tiny_model(34));
  const auto rand = evaluate(model, vocab(), ins, {});
  const auto zero = compare(rand, rand);
  EXPECT_EQ(zero.csr, 0.0);
  EXPECT_EQ(zero.isr, 0.0);
  for (const auto& [lvl, d] : zero.per_level) {
    EXPECT_EQ(d.first, 0.0);
    EXPECT_EQ(d.second, 0.0);
  }
  const auto ab = compare(rand, oracle);
  const auto ba = compare(oracle, rand);
  EXPECT_NEAR(ab.csr, oracle.csr - rand.csr, 1e-15);
  EXPECT_EQ(ab.csr, -ba.csr);
  EXPECT_EQ(ab.isr, -ba.isr);
  EXPECT_EQ(ab.psr, -ba.psr);
  const auto other = score_responses(held_out(30, 1), data::oracle_responses(held_out(30, 1), vocab(), 2, 12));
  EXPECT_THROW(compare(rand, other), Error);
}

TEST(Report, RoundTrip) {
  TempDir dir("report");
  const lm::PolicyModel model(tiny_model(35));
  const auto ins = held_out(10);
  DecodeConfig d;
  d.greedy = false;
  d.temperature = 0.7;
  d.seed = 4;
  const auto r = evaluate(model, vocab(), ins, d);
  write_report(r, dir.file("r.jsonl"));
  const auto back = read_report(dir.file("r.jsonl"));
  EXPECT_EQ(back.csr, r.csr);
  EXPECT_EQ(back.isr, r.isr);
  EXPECT_EQ(back.psr, r.psr);
  EXPECT_EQ(back.n_instructions, 10);
  EXPECT_EQ(back.instruction_hash, r.instruction_hash);
  EXPECT_EQ(back.model_id, r.model_id);
  EXPECT_EQ(back.decode.temperature, 0.7);
  EXPECT_EQ(back.decode.greedy, false);
  ASSERT_EQ(back.results.size(), r.results.size());
  for (std::size_t i = 0; i < r.results.size(); ++i) {
    EXPECT_EQ(back.results[i].instruction_id, r.results[i].instruction_id);
    EXPECT_EQ(back.results[i].response, r.results[i].response);
    EXPECT_EQ(back.results[i].satisfied, r.results[i].satisfied);
  }
  const auto delta = compare(r, back);
  EXPECT_EQ(delta.csr, 0.0);
  EXPECT_FALSE(summary_text(r).empty());

  std::ofstream(dir.file("bad.jsonl")) << "{\"type\": \"summary\", \"csr\": 0.5}\n";
  EXPECT_THROW(read_report(dir.file("bad.jsonl")), SchemaError);
}
