#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "musc/common.hpp"
#include "musc/vocab.hpp"

namespace musc::lang {

enum class Kind : std::uint8_t {
  kContains = 0,
  kStartsWith,
  kEndsWith,
  kLengthBetween,
  kCountExact,
  kNoAdjacentRepeat,
};
inline constexpr int kNumKinds = 6;

enum class Polarity : std::uint8_t { kPositive, kNegative };

std::string kind_name(Kind kind);

// One machine-checkable requirement on a response. Which fields are
// meaningful depends on `kind`; unused fields stay at their defaults so that
// equality is structural.
struct AtomicConstraint {
  Kind kind = Kind::kContains;
  Polarity polarity = Polarity::kPositive;
  TokenId token = -1;  // Contains, StartsWith, EndsWith, CountExact
  int lo = 0;          // LengthBetween
  int hi = 0;          // LengthBetween
  int k = 0;           // CountExact

  static AtomicConstraint contains(TokenId t, Polarity p = Polarity::kPositive);
  static AtomicConstraint starts_with(TokenId t, Polarity p = Polarity::kPositive);
  static AtomicConstraint ends_with(TokenId t, Polarity p = Polarity::kPositive);
  static AtomicConstraint length_between(int lo, int hi,
                                         Polarity p = Polarity::kPositive);
  static AtomicConstraint count_exact(TokenId t, int k,
                                      Polarity p = Polarity::kPositive);
  static AtomicConstraint no_adjacent_repeat(Polarity p = Polarity::kPositive);

  bool operator==(const AtomicConstraint&) const = default;
};

std::string describe(const AtomicConstraint& c, const Vocabulary& vocab);

// Throws Error if the constraint's parameters are invalid for `vocab`.
void validate(const AtomicConstraint& c, const Vocabulary& vocab);

struct Response {
  std::vector<TokenId> tokens;  // letters only; the end marker is implicit

  std::size_t length() const noexcept { return tokens.size(); }
  bool operator==(const Response&) const = default;
};

// Response tokens followed by the end marker, as scored by the model.
std::vector<TokenId> scored_tokens(const Response& r);

struct Instruction {
  std::vector<AtomicConstraint> constraints;
  std::string id;  // content hash of the canonical serialization

  bool operator==(const Instruction&) const = default;
};

// Builds an instruction and stamps its content id. Throws on an empty list.
Instruction make_instruction(std::vector<AtomicConstraint> constraints,
                             const Vocabulary& vocab);

bool check(const AtomicConstraint& c, const Response& r) noexcept;
std::vector<bool> check_all(const Instruction& ins, const Response& r);
std::vector<bool> check_all(const std::vector<AtomicConstraint>& cs, const Response& r);

// <ins> c1 <sep> c2 ... <sep> cn </ins>, each ci = kind-code polarity params...
std::vector<TokenId> serialize_instruction(const Instruction& ins,
                                           const Vocabulary& vocab);
std::vector<TokenId> serialize_constraints(const std::vector<AtomicConstraint>& cs,
                                           const Vocabulary& vocab);
Instruction parse_instruction(const std::vector<TokenId>& tokens,
                              const Vocabulary& vocab);

// Conditioning prefix with no constraints: <ins> </ins>.
std::vector<TokenId> empty_conditioning_prefix();

AtomicConstraint negate(const AtomicConstraint& c) noexcept;

// Parameter ranges used when drawing fresh constraints.
struct CatalogConfig {
  int max_response_len = 12;
  int min_length_lo = 1;
  int max_length_lo = 8;
  int max_length_span = 4;
  int max_count = 3;
  double negative_probability = 0.25;
};

// Uniform kind, uniform parameters, positive polarity.
AtomicConstraint draw_constraint(const Vocabulary& vocab, const CatalogConfig& catalog,
                                 Rng& rng);

// A constraint that differs from `c` in kind or parameters.
AtomicConstraint substitute(const AtomicConstraint& c, const Vocabulary& vocab,
                            const CatalogConfig& catalog, Rng& rng);

struct SolverConfig {
  int max_len = 12;
  int max_attempts = 200;
  int exhaustive_len = 12;
};

// Exact decision by search over abstract response states up to `max_len`.
bool satisfiable(const std::vector<AtomicConstraint>& cs, const Vocabulary& vocab,
                 int max_len);

// Randomized constructive witness with rejection, then exhaustive fallback.
// Returns nullopt when no response of length <= exhaustive_len satisfies cs.
std::optional<Response> solve(const std::vector<AtomicConstraint>& cs,
                              const Vocabulary& vocab, Rng& rng,
                              const SolverConfig& cfg = {});

// Deterministic exhaustive search; witness built with letters tried in
// `letter_order` (all letters of the vocabulary when empty).
std::optional<Response> exhaustive_solve(const std::vector<AtomicConstraint>& cs,
                                         const Vocabulary& vocab, int max_len,
                                         const std::vector<TokenId>& letter_order = {});

struct SamplerConfig {
  CatalogConfig catalog;
  int max_resamples = 1000;
};

// n ~ U[n_min, n_max] distinct constraints, first one StartsWith or
// LengthBetween (positive), resampled until satisfiable.
std::vector<AtomicConstraint> sample_constraint_set(const Vocabulary& vocab, Rng& rng,
                                                    int n_min, int n_max,
                                                    const SamplerConfig& cfg = {});

}  // namespace musc::lang
