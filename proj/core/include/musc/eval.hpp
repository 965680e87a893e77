#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "musc/constraint_lang.hpp"
#include "musc/lm.hpp"

namespace musc::eval {

struct DecodeConfig {
  bool greedy = true;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  int max_len = 12;
  int threads = 1;

  void validate() const;
};

struct LevelStats {
  double hsr = 0.0;
  double ssr = 0.0;
  int n = 0;
};

struct InstructionResult {
  std::string instruction_id;
  lang::Response response;
  std::vector<bool> satisfied;
};

struct EvalReport {
  double csr = 0.0;
  double isr = 0.0;
  double psr = 0.0;  // first-constraint satisfaction
  std::map<int, LevelStats> per_level;
  DecodeConfig decode;
  int n_instructions = 0;
  std::string instruction_hash;
  std::string model_id;
  std::vector<InstructionResult> results;
};

// Content hash of an ordered instruction list.
std::string instruction_set_hash(const std::vector<lang::Instruction>& instructions);

// Scores fixed responses; responses[i] answers instructions[i].
EvalReport score_responses(const std::vector<lang::Instruction>& instructions,
                           const std::vector<lang::Response>& responses);

// One response per instruction from `model` (greedy or sampled with the
// per-instruction stream derive_seed(decode.seed, i)), then scored.
EvalReport evaluate(const lm::PolicyModel& model, const Vocabulary& vocab,
                    const std::vector<lang::Instruction>& instructions,
                    const DecodeConfig& decode);

struct MetricDelta {
  double csr = 0.0;
  double isr = 0.0;
  double psr = 0.0;
  std::map<int, std::pair<double, double>> per_level;  // level -> (hsr, ssr)
};

// b - a, metric by metric. Throws if the reports cover different
// instruction sets or levels.
MetricDelta compare(const EvalReport& a, const EvalReport& b);

// First line: summary record; then one record per instruction.
void write_report(const EvalReport& report, const std::string& path);
EvalReport read_report(const std::string& path);

std::string summary_text(const EvalReport& report);
std::string delta_text(const MetricDelta& delta);

}  // namespace musc::eval
