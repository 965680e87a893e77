#pragma once

#include <functional>
#include <set>
#include <string>
#include <vector>

#include "run_config.hpp"

namespace musc::cli {

// Independent streams derived from the root seed.
struct Seeds {
  std::uint64_t model;
  std::uint64_t sft_data;
  std::uint64_t sft_order;
  std::uint64_t pairs;
  std::uint64_t train;
};
Seeds seeds_for(std::uint64_t root);

using Progress = std::function<void(const std::string&)>;

lm::PolicyModel init_model(const RunConfig& cfg, std::uint64_t root_seed);

// Held-out instructions; depends on eval.instruction_seed only.
std::vector<lang::Instruction> heldout_instructions(const RunConfig& cfg, const Vocabulary& vocab);
std::set<std::string> instruction_ids(const std::vector<lang::Instruction>& instructions);

// SFT bootstrap on solver witnesses for instructions disjoint from `exclude`.
lm::SftResult run_sft(lm::PolicyModel& model, const RunConfig& cfg, const Vocabulary& vocab,
                      std::uint64_t root_seed, const std::set<std::string>& exclude,
                      const Progress& progress = {});

data::BuildResult generate_pairs(const lm::PolicyModel& model, const Vocabulary& vocab,
                                 const RunConfig& cfg, int n_pairs, std::uint64_t root_seed);

std::vector<data::PreferencePair> attach_all(const std::vector<data::PreferencePair>& pairs,
                                             const lm::PolicyModel& reference,
                                             const Vocabulary& vocab,
                                             const conf::CalibrationConfig& calib, int threads);

// Number of pair instructions (chosen or rejected) that also appear in `ids`.
int overlap_count(const std::vector<data::PreferencePair>& pairs,
                  const std::set<std::string>& ids);

std::string rejection_histogram(const data::RejectionSummary& s);

struct SweepRow {
  double alpha = 0.0;
  std::uint64_t seed = 0;
  int n_pairs = 0;
  double csr = 0.0;
  double isr = 0.0;
  double psr = 0.0;
  std::string status = "ok";
};

// For each seed: one SFT bootstrap (or a copy of `start` when given), then
// per alpha generate pairs, attach weights, train and evaluate. Cell failures
// are recorded, not thrown.
std::vector<SweepRow> sweep_alpha(const RunConfig& cfg, const std::vector<double>& alphas,
                                  const std::vector<std::uint64_t>& seeds, int n_pairs,
                                  const Progress& progress = {},
                                  const lm::PolicyModel* start = nullptr);
void write_sweep(const std::vector<SweepRow>& rows, const std::string& path);

}  // namespace musc::cli
