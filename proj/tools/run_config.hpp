#pragma once

#include <cstdint>
#include <string>

#include "musc/confidence.hpp"
#include "musc/datagen.hpp"
#include "musc/eval.hpp"
#include "musc/llm_client.hpp"
#include "musc/lm.hpp"
#include "musc/losses.hpp"
#include "musc/trainer.hpp"

namespace musc::cli {

struct VocabSection {
  int letters = 8;
  int max_number = 12;
};

struct SftSection {
  lm::SftConfig train;
  int n_examples = 2000;
  int min_constraints = 1;
  int max_constraints = 10;
  data::WitnessStyle witness = data::WitnessStyle::kCanonical;
};

struct EvalSection {
  int n_instructions = 300;
  int min_constraints = 3;
  int max_constraints = 10;
  std::uint64_t instruction_seed = 7919;
  eval::DecodeConfig decode;
};

// Every module configuration in one document. Defaults follow the `paper`
// training preset.
struct RunConfig {
  std::string preset = "paper";
  std::uint64_t seed = 0;
  int threads = 1;
  VocabSection vocab;
  lm::ModelConfig model;
  SftSection sft;
  data::DropoutConfig dropout;
  int max_attempt_factor = 20;
  conf::CalibrationConfig calibration;
  train::TrainConfig train;
  EvalSection eval;
  llm::EndpointConfig endpoint;

  Vocabulary make_vocab() const { return Vocabulary(vocab.letters, vocab.max_number); }
  lm::ModelConfig model_config() const;  // vocab_size filled in
  void validate() const;
};

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);
// Canonical JSON with every key; parse_run_config(to_json(c)) == c.
std::string to_json(const RunConfig& cfg);
std::string config_hash(const RunConfig& cfg);
// Applies a named training preset to cfg.train (keeps cfg.train.loss).
void apply_preset(RunConfig& cfg, const std::string& name);

}  // namespace musc::cli
