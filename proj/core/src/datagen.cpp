#include "musc/datagen.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace musc::data {

Scheme parse_scheme(const std::string& name) {
  if (name == "dropout") return Scheme::kDropout;
  if (name == "negate") return Scheme::kNegate;
  if (name == "substitute") return Scheme::kSubstitute;
  throw ConfigError("unknown scheme '" + name + "' (expected dropout|negate|substitute)");
}

std::string scheme_name(Scheme s) {
  switch (s) {
    case Scheme::kDropout: return "dropout";
    case Scheme::kNegate: return "negate";
    case Scheme::kSubstitute: return "substitute";
  }
  return "unknown";
}

std::string reason_name(RejectReason r) {
  switch (r) {
    case RejectReason::kTooFew: return "too_few";
    case RejectReason::kTooMany: return "too_many";
    case RejectReason::kUnsatSource: return "unsat_source";
    case RejectReason::kUnsatNoised: return "unsat_noised";
    case RejectReason::kIdenticalResponses: return "identical_responses";
  }
  return "unknown";
}

void DropoutConfig::validate() const {
  if (!(alpha > 0 && alpha < 1)) throw ConfigError("dropout.alpha must be in (0, 1)");
  if (min_constraints < 2) throw ConfigError("dropout.min_constraints must be >= 2");
  if (max_constraints < min_constraints) {
    throw ConfigError("dropout.max_constraints must be >= min_constraints");
  }
  if (!(temperature >= 0)) throw ConfigError("dropout.temperature must be >= 0");
  if (max_response_len < 1) throw ConfigError("dropout.max_response_len must be >= 1");
  if (threads < 1) throw ConfigError("dropout.threads must be >= 1");
}

int dropout_count(int n, double alpha) {
  if (n < 2) throw Error("constraint dropout needs at least 2 constraints");
  // round half up; the epsilon absorbs representation error in alpha * n
  const int k = static_cast<int>(std::floor(alpha * n + 0.5 + 1e-9));
  return std::clamp(k, 1, n - 1);
}

std::vector<int> select_noise_indices(int n, double alpha, Rng& rng) {
  const int k = dropout_count(n, alpha);
  std::vector<int> candidates(n - 1);
  for (int i = 0; i < n - 1; ++i) candidates[i] = i + 2;
  // partial Fisher-Yates: first k entries are a uniform k-subset
  for (int i = 0; i < k; ++i) {
    const int j = std::uniform_int_distribution<int>(i, n - 2)(rng);
    std::swap(candidates[i], candidates[j]);
  }
  std::vector<int> out(candidates.begin(), candidates.begin() + k);
  std::sort(out.begin(), out.end());
  return out;
}

DropoutResult constraint_dropout(const std::vector<AtomicConstraint>& constraints,
                                 double alpha, Rng& rng) {
  const int n = static_cast<int>(constraints.size());
  DropoutResult out;
  out.dropped_indices = select_noise_indices(n, alpha, rng);
  for (int i = 1; i <= n; ++i) {
    if (!std::binary_search(out.dropped_indices.begin(), out.dropped_indices.end(), i)) {
      out.kept.push_back(constraints[i - 1]);
    }
  }
  return out;
}

Instruction recombine(std::vector<AtomicConstraint> constraints, const Vocabulary& vocab) {
  if (constraints.empty()) throw Error("recombine: empty constraint list");
  return lang::make_instruction(std::move(constraints), vocab);
}

Response generate_response(const lm::PolicyModel& model, const Instruction& ins,
                           const Vocabulary& vocab, double temperature, Rng& rng,
                           int max_len) {
  const auto prefix = lang::serialize_instruction(ins, vocab);
  lm::SampleOptions opts;
  opts.greedy = temperature <= 0.0;
  opts.temperature = opts.greedy ? 1.0 : temperature;
  opts.max_len = max_len;
  opts.allowed = vocab.letters();
  opts.allowed.push_back(Vocabulary::kEos);
  auto tokens = lm::sample(model, prefix, rng, opts);
  if (!tokens.empty() && tokens.back() == Vocabulary::kEos) tokens.pop_back();
  return Response{std::move(tokens)};
}

PairOutcome build_pair(const lm::PolicyModel& model, const Vocabulary& vocab,
                       const std::vector<AtomicConstraint>& constraints,
                       const DropoutConfig& cfg, Rng& rng) {
  const int n = static_cast<int>(constraints.size());
  if (n < cfg.min_constraints) return Rejection{RejectReason::kTooFew};
  if (n > cfg.max_constraints) return Rejection{RejectReason::kTooMany};
  if (!lang::satisfiable(constraints, vocab, cfg.max_response_len)) {
    return Rejection{RejectReason::kUnsatSource};
  }
  const auto indices = select_noise_indices(n, cfg.alpha, rng);
  std::vector<AtomicConstraint> noised;
  switch (cfg.scheme) {
    case Scheme::kDropout:
      for (int i = 1; i <= n; ++i) {
        if (!std::binary_search(indices.begin(), indices.end(), i)) {
          noised.push_back(constraints[i - 1]);
        }
      }
      break;
    case Scheme::kNegate:
      noised = constraints;
      for (int i : indices) noised[i - 1] = lang::negate(noised[i - 1]);
      break;
    case Scheme::kSubstitute:
      noised = constraints;
      for (int i : indices) {
        noised[i - 1] = lang::substitute(noised[i - 1], vocab, cfg.catalog, rng);
      }
      break;
  }
  if (!lang::satisfiable(noised, vocab, cfg.max_response_len)) {
    return Rejection{RejectReason::kUnsatNoised};
  }
  PreferencePair pair;
  pair.chosen_instruction = recombine(constraints, vocab);
  pair.rejected_instruction = recombine(std::move(noised), vocab);
  pair.dropped_indices = indices;
  pair.scheme = cfg.scheme;
  pair.chosen_response = generate_response(model, pair.chosen_instruction, vocab,
                                           cfg.temperature, rng, cfg.max_response_len);
  pair.rejected_response = generate_response(model, pair.rejected_instruction, vocab,
                                             cfg.temperature, rng, cfg.max_response_len);
  if (pair.chosen_response == pair.rejected_response) {
    return Rejection{RejectReason::kIdenticalResponses};
  }
  return pair;
}

void check_pair_invariants(const PreferencePair& p, const DropoutConfig& cfg) {
  const auto& cw = p.chosen_instruction.constraints;
  const auto& cl = p.rejected_instruction.constraints;
  const int n = static_cast<int>(cw.size());
  if (n < cfg.min_constraints || n > cfg.max_constraints) {
    throw Error("pair invariant: constraint count out of range");
  }
  if (p.chosen_response == p.rejected_response) {
    throw Error("pair invariant: identical responses");
  }
  const auto& d = p.dropped_indices;
  if (d.empty() || static_cast<int>(d.size()) > n - 1) {
    throw Error("pair invariant: bad number of noised constraints");
  }
  if (!std::is_sorted(d.begin(), d.end()) ||
      std::adjacent_find(d.begin(), d.end()) != d.end() || d.front() < 2 || d.back() > n) {
    throw Error("pair invariant: noised indices must be distinct and in [2, n]");
  }
  if (p.scheme == Scheme::kDropout) {
    std::vector<AtomicConstraint> expect;
    for (int i = 1; i <= n; ++i) {
      if (!std::binary_search(d.begin(), d.end(), i)) expect.push_back(cw[i - 1]);
    }
    if (expect != cl) throw Error("pair invariant: rejected != chosen minus dropped");
  } else if (cl.size() != cw.size() || cl.front() != cw.front()) {
    throw Error("pair invariant: noised instruction must keep size and first constraint");
  }
}

namespace {

std::string config_fingerprint(const DropoutConfig& cfg) {
  std::ostringstream s;
  s.precision(17);
  s << "alpha=" << cfg.alpha << ";scheme=" << scheme_name(cfg.scheme)
    << ";min=" << cfg.min_constraints << ";max=" << cfg.max_constraints
    << ";temp=" << cfg.temperature << ";maxlen=" << cfg.max_response_len
    << ";seed=" << cfg.seed << ";cat=" << cfg.catalog.max_response_len << ","
    << cfg.catalog.min_length_lo << "," << cfg.catalog.max_length_lo << ","
    << cfg.catalog.max_length_span << "," << cfg.catalog.max_count << ","
    << cfg.catalog.negative_probability;
  return sha256_hex(s.str()).substr(0, 16);
}

void record(BuildResult& result, PairOutcome&& outcome) {
  ++result.summary.attempted;
  if (auto* p = std::get_if<PreferencePair>(&outcome)) {
    ++result.summary.accepted;
    result.pairs.push_back(std::move(*p));
  } else {
    ++result.summary.counts[std::get<Rejection>(outcome).reason];
  }
}

}  // namespace

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  const int workers = static_cast<int>(std::min<std::size_t>(threads, n));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

BuildResult build_dataset_sampled(const lm::PolicyModel& model, const Vocabulary& vocab,
                                  int n_pairs, const DropoutConfig& cfg,
                                  int max_attempt_factor) {
  cfg.validate();
  if (n_pairs < 1) throw Error("build_dataset: n_pairs must be >= 1");
  const std::string checkpoint = model.checkpoint_id();
  const std::string fingerprint = config_fingerprint(cfg);
  const std::size_t budget = static_cast<std::size_t>(n_pairs) * max_attempt_factor;
  const std::size_t chunk = static_cast<std::size_t>(std::max(1, cfg.threads)) * 8;
  lang::SamplerConfig sampler;
  sampler.catalog = cfg.catalog;
  sampler.catalog.max_response_len = cfg.max_response_len;

  BuildResult result;
  std::size_t base = 0;
  while (result.summary.accepted < n_pairs && base < budget) {
    const std::size_t count = std::min(chunk, budget - base);
    std::vector<std::optional<PairOutcome>> outcomes(count);
    parallel_for(count, cfg.threads, [&](std::size_t i) {
      const std::uint64_t seed = derive_seed(cfg.seed, base + i);
      Rng rng(seed);
      const auto cs = lang::sample_constraint_set(vocab, rng, cfg.min_constraints,
                                                  cfg.max_constraints, sampler);
      auto outcome = build_pair(model, vocab, cs, cfg, rng);
      if (auto* p = std::get_if<PreferencePair>(&outcome)) {
        p->provenance = {seed, checkpoint, "", "selfinst", fingerprint};
      }
      outcomes[i] = std::move(outcome);
    });
    for (auto& o : outcomes) {
      if (result.summary.accepted >= n_pairs) break;
      record(result, std::move(*o));
    }
    base += count;
  }
  return result;
}

BuildResult build_dataset_from_instructions(const lm::PolicyModel& model,
                                            const Vocabulary& vocab,
                                            const std::vector<Instruction>& instructions,
                                            const DropoutConfig& cfg) {
  cfg.validate();
  const std::string checkpoint = model.checkpoint_id();
  const std::string fingerprint = config_fingerprint(cfg);
  std::vector<std::optional<PairOutcome>> outcomes(instructions.size());
  parallel_for(instructions.size(), cfg.threads, [&](std::size_t i) {
    const std::uint64_t seed = derive_seed(cfg.seed, i);
    Rng rng(seed);
    auto outcome = build_pair(model, vocab, instructions[i].constraints, cfg, rng);
    if (auto* p = std::get_if<PreferencePair>(&outcome)) {
      p->provenance = {seed, checkpoint, "", "preinst-file", fingerprint};
    }
    outcomes[i] = std::move(outcome);
  });
  BuildResult result;
  for (auto& o : outcomes) record(result, std::move(*o));
  return result;
}

std::vector<Instruction> sample_instructions(const Vocabulary& vocab, int n, std::uint64_t seed,
                                             int min_constraints, int max_constraints,
                                             const lang::CatalogConfig& catalog,
                                             const std::set<std::string>& exclude) {
  if (n < 0) throw ConfigError("sample_instructions: n must be >= 0");
  lang::SamplerConfig sampler;
  sampler.catalog = catalog;
  std::set<std::string> seen = exclude;
  std::vector<Instruction> out;
  const std::uint64_t budget = static_cast<std::uint64_t>(n) * 50 + 100;
  for (std::uint64_t i = 0; static_cast<int>(out.size()) < n; ++i) {
    if (i >= budget) {
      throw Error("sample_instructions: could not find " + std::to_string(n) +
                  " distinct instructions");
    }
    Rng rng(derive_seed(seed, i));
    auto ins = lang::make_instruction(
        lang::sample_constraint_set(vocab, rng, min_constraints, max_constraints, sampler),
        vocab);
    if (seen.insert(ins.id).second) out.push_back(std::move(ins));
  }
  return out;
}

WitnessStyle parse_witness_style(const std::string& name) {
  if (name == "sampled") return WitnessStyle::kSampled;
  if (name == "shortest") return WitnessStyle::kShortest;
  if (name == "canonical") return WitnessStyle::kCanonical;
  throw ConfigError("unknown witness style '" + name +
                    "' (expected sampled|shortest|canonical)");
}

std::string witness_style_name(WitnessStyle s) {
  switch (s) {
    case WitnessStyle::kSampled: return "sampled";
    case WitnessStyle::kShortest: return "shortest";
    case WitnessStyle::kCanonical: return "canonical";
  }
  return "sampled";
}

std::vector<Response> oracle_responses(const std::vector<Instruction>& instructions,
                                       const Vocabulary& vocab, std::uint64_t seed,
                                       int max_response_len, WitnessStyle style) {
  lang::SolverConfig solver;
  solver.max_len = max_response_len;
  solver.exhaustive_len = max_response_len;
  std::vector<Response> out;
  out.reserve(instructions.size());
  for (std::size_t i = 0; i < instructions.size(); ++i) {
    Rng rng(derive_seed(seed, i));
    std::optional<Response> r;
    if (style != WitnessStyle::kSampled) {
      std::vector<TokenId> order;
      for (int l = 0; l < vocab.num_letters(); ++l) order.push_back(vocab.letter(l));
      if (style == WitnessStyle::kShortest) std::shuffle(order.begin(), order.end(), rng);
      r = lang::exhaustive_solve(instructions[i].constraints, vocab, max_response_len, order);
    } else {
      r = lang::solve(instructions[i].constraints, vocab, rng, solver);
    }
    if (!r) throw Error("oracle_responses: instruction " + std::to_string(i) + " is unsatisfiable");
    out.push_back(std::move(*r));
  }
  return out;
}

std::vector<lm::SequenceExample> oracle_corpus(const std::vector<Instruction>& instructions,
                                               const Vocabulary& vocab, std::uint64_t seed,
                                               int max_response_len, WitnessStyle style) {
  const auto responses = oracle_responses(instructions, vocab, seed, max_response_len, style);
  std::vector<lm::SequenceExample> out;
  out.reserve(instructions.size());
  for (std::size_t i = 0; i < instructions.size(); ++i) {
    out.push_back({lang::serialize_instruction(instructions[i], vocab),
                   lang::scored_tokens(responses[i])});
  }
  return out;
}

std::vector<Instruction> read_instruction_file(const std::string& path,
                                               const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read instruction file " + path);
  std::vector<Instruction> out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::vector<TokenId> tokens;
    try {
      tokens = nlohmann::json::parse(text).get<std::vector<TokenId>>();
    } catch (const nlohmann::json::exception&) {
      throw SchemaError("expected a JSON array of token ids", line, "");
    }
    try {
      out.push_back(lang::parse_instruction(tokens, vocab));
    } catch (const ParseError& e) {
      throw SchemaError(e.what(), line, "");
    }
  }
  return out;
}

void write_instruction_file(const std::vector<Instruction>& instructions,
                            const Vocabulary& vocab, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write instruction file " + path);
  for (const auto& ins : instructions) {
    out << nlohmann::json(lang::serialize_instruction(ins, vocab)).dump() << '\n';
  }
}

}  // namespace musc::data
