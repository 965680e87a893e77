#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "musc/constraint_lang.hpp"
#include "musc/lm.hpp"

namespace musc::data {

using lang::AtomicConstraint;
using lang::Instruction;
using lang::Response;

enum class Scheme { kDropout, kNegate, kSubstitute };
Scheme parse_scheme(const std::string& name);
std::string scheme_name(Scheme s);

struct DropoutConfig {
  double alpha = 0.3;
  Scheme scheme = Scheme::kDropout;
  int min_constraints = 3;
  int max_constraints = 10;
  double temperature = 0.5;
  int max_response_len = 12;
  std::uint64_t seed = 0;
  int threads = 1;
  lang::CatalogConfig catalog;

  void validate() const;
};

struct TokenWeights {
  std::vector<double> chosen;
  std::vector<double> rejected;
  bool operator==(const TokenWeights&) const = default;
};

struct Provenance {
  std::uint64_t seed = 0;
  std::string checkpoint;
  std::string metric;
  std::string source;
  std::string config_hash;
  bool operator==(const Provenance&) const = default;
};

struct PreferencePair {
  Instruction chosen_instruction;
  Response chosen_response;
  Instruction rejected_instruction;
  Response rejected_response;
  std::vector<int> dropped_indices;  // 1-based
  Scheme scheme = Scheme::kDropout;
  std::optional<TokenWeights> weights;
  Provenance provenance;

  bool operator==(const PreferencePair&) const = default;
};

// clamp(round_half_up(alpha * n), 1, n - 1)
int dropout_count(int n, double alpha);

// k distinct 1-based indices drawn uniformly from {2..n}, sorted ascending.
std::vector<int> select_noise_indices(int n, double alpha, Rng& rng);

struct DropoutResult {
  std::vector<AtomicConstraint> kept;
  std::vector<int> dropped_indices;
};

DropoutResult constraint_dropout(const std::vector<AtomicConstraint>& constraints,
                                 double alpha, Rng& rng);

Instruction recombine(std::vector<AtomicConstraint> constraints, const Vocabulary& vocab);

// Samples with logits / temperature over letters and the end marker;
// temperature 0 decodes greedily. Stops at the end marker or max_len letters.
Response generate_response(const lm::PolicyModel& model, const Instruction& ins,
                           const Vocabulary& vocab, double temperature, Rng& rng,
                           int max_len);

enum class RejectReason { kTooFew, kTooMany, kUnsatSource, kUnsatNoised, kIdenticalResponses };
std::string reason_name(RejectReason r);

struct Rejection {
  RejectReason reason;
};

using PairOutcome = std::variant<PreferencePair, Rejection>;

PairOutcome build_pair(const lm::PolicyModel& model, const Vocabulary& vocab,
                       const std::vector<AtomicConstraint>& constraints,
                       const DropoutConfig& cfg, Rng& rng);

// Throws Error naming the first violated PreferencePair invariant.
void check_pair_invariants(const PreferencePair& p, const DropoutConfig& cfg);

struct RejectionSummary {
  std::map<RejectReason, int> counts;
  int attempted = 0;
  int accepted = 0;
};

struct BuildResult {
  std::vector<PreferencePair> pairs;
  RejectionSummary summary;
};

// SelfInst: fresh constraint sets until n_pairs are accepted or the attempt
// budget (max_attempt_factor * n_pairs) runs out.
BuildResult build_dataset_sampled(const lm::PolicyModel& model, const Vocabulary& vocab,
                                  int n_pairs, const DropoutConfig& cfg,
                                  int max_attempt_factor = 20);

// PreInst: one pair attempt per instruction in the list.
BuildResult build_dataset_from_instructions(const lm::PolicyModel& model,
                                            const Vocabulary& vocab,
                                            const std::vector<Instruction>& instructions,
                                            const DropoutConfig& cfg);

// n instructions with distinct ids, instruction i drawn from the stream
// derive_seed(seed, i); ids listed in `exclude` are skipped.
std::vector<Instruction> sample_instructions(const Vocabulary& vocab, int n, std::uint64_t seed,
                                             int min_constraints, int max_constraints,
                                             const lang::CatalogConfig& catalog,
                                             const std::set<std::string>& exclude = {});

// kSampled: randomized constructive witness. kShortest: a shortest witness,
// ties broken by a per-instruction random letter order. kCanonical: the
// shortest witness under alphabetical order, so a function of the instruction.
enum class WitnessStyle { kSampled, kShortest, kCanonical };
WitnessStyle parse_witness_style(const std::string& name);
std::string witness_style_name(WitnessStyle s);

// One solver witness per instruction, as supervised (prompt, response + end)
// examples. Throws if an instruction has no witness.
std::vector<Response> oracle_responses(const std::vector<Instruction>& instructions,
                                       const Vocabulary& vocab, std::uint64_t seed,
                                       int max_response_len,
                                       WitnessStyle style = WitnessStyle::kSampled);
std::vector<lm::SequenceExample> oracle_corpus(const std::vector<Instruction>& instructions,
                                               const Vocabulary& vocab, std::uint64_t seed,
                                               int max_response_len,
                                               WitnessStyle style = WitnessStyle::kSampled);

// Instruction file: one JSON array of canonical token ids per line.
std::vector<Instruction> read_instruction_file(const std::string& path,
                                               const Vocabulary& vocab);
void write_instruction_file(const std::vector<Instruction>& instructions,
                            const Vocabulary& vocab, const std::string& path);

struct Dataset {
  Vocabulary vocab;
  std::vector<PreferencePair> pairs;
};

// Line-delimited JSON records plus a vocabulary sidecar at path + ".vocab".
void write_dataset(const std::vector<PreferencePair>& pairs, const Vocabulary& vocab,
                   const std::string& path);
Dataset read_dataset(const std::string& path);

std::string vocab_sidecar_path(const std::string& dataset_path);

// Validates one record against the dataset schema. Token-id records and the
// text records produced from natural-language instructions are both
// accepted. Throws SchemaError naming field and line.
void validate_record(const std::string& json_line, std::size_t line);

// Runs fn(i) for i in [0, n) on up to `threads` workers.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace musc::data
