#include "musc/constraint_lang.hpp"

#include <algorithm>
#include <unordered_set>

namespace musc::lang {

std::string kind_name(Kind kind) {
  switch (kind) {
    case Kind::kContains: return "contains";
    case Kind::kStartsWith: return "starts_with";
    case Kind::kEndsWith: return "ends_with";
    case Kind::kLengthBetween: return "length_between";
    case Kind::kCountExact: return "count_exact";
    case Kind::kNoAdjacentRepeat: return "no_adjacent_repeat";
  }
  return "unknown";
}

AtomicConstraint AtomicConstraint::contains(TokenId t, Polarity p) {
  return {.kind = Kind::kContains, .polarity = p, .token = t};
}
AtomicConstraint AtomicConstraint::starts_with(TokenId t, Polarity p) {
  return {.kind = Kind::kStartsWith, .polarity = p, .token = t};
}
AtomicConstraint AtomicConstraint::ends_with(TokenId t, Polarity p) {
  return {.kind = Kind::kEndsWith, .polarity = p, .token = t};
}
AtomicConstraint AtomicConstraint::length_between(int lo, int hi, Polarity p) {
  return {.kind = Kind::kLengthBetween, .polarity = p, .lo = lo, .hi = hi};
}
AtomicConstraint AtomicConstraint::count_exact(TokenId t, int k, Polarity p) {
  return {.kind = Kind::kCountExact, .polarity = p, .token = t, .k = k};
}
AtomicConstraint AtomicConstraint::no_adjacent_repeat(Polarity p) {
  return {.kind = Kind::kNoAdjacentRepeat, .polarity = p};
}

std::string describe(const AtomicConstraint& c, const Vocabulary& vocab) {
  std::string s = c.polarity == Polarity::kNegative ? "not " : "";
  switch (c.kind) {
    case Kind::kContains: return s + "contains " + vocab.surface(c.token);
    case Kind::kStartsWith: return s + "starts with " + vocab.surface(c.token);
    case Kind::kEndsWith: return s + "ends with " + vocab.surface(c.token);
    case Kind::kLengthBetween:
      return s + "length in [" + std::to_string(c.lo) + ", " + std::to_string(c.hi) + "]";
    case Kind::kCountExact:
      return s + "exactly " + std::to_string(c.k) + " x " + vocab.surface(c.token);
    case Kind::kNoAdjacentRepeat: return s + "no adjacent repeat";
  }
  return s;
}

void validate(const AtomicConstraint& c, const Vocabulary& vocab) {
  auto fail = [&](const std::string& why) {
    throw Error("invalid " + kind_name(c.kind) + " constraint: " + why);
  };
  switch (c.kind) {
    case Kind::kContains:
    case Kind::kStartsWith:
    case Kind::kEndsWith:
      if (!vocab.is_letter(c.token)) fail("token is not a response letter");
      if (c.lo || c.hi || c.k) fail("unused parameters set");
      break;
    case Kind::kLengthBetween:
      if (c.lo < 0 || c.hi < c.lo || c.hi > vocab.max_number()) fail("bad bounds");
      if (c.token != -1 || c.k) fail("unused parameters set");
      break;
    case Kind::kCountExact:
      if (!vocab.is_letter(c.token)) fail("token is not a response letter");
      if (c.k < 0 || c.k > vocab.max_number()) fail("bad count");
      if (c.lo || c.hi) fail("unused parameters set");
      break;
    case Kind::kNoAdjacentRepeat:
      if (c.token != -1 || c.lo || c.hi || c.k) fail("unused parameters set");
      break;
  }
}

std::vector<TokenId> scored_tokens(const Response& r) {
  std::vector<TokenId> out = r.tokens;
  out.push_back(Vocabulary::kEos);
  return out;
}

Instruction make_instruction(std::vector<AtomicConstraint> constraints,
                             const Vocabulary& vocab) {
  if (constraints.empty()) throw Error("instruction needs at least one constraint");
  Instruction ins{std::move(constraints), {}};
  const auto tokens = serialize_constraints(ins.constraints, vocab);
  std::string bytes;
  for (TokenId t : tokens) bytes += std::to_string(t) + ",";
  ins.id = sha256_hex(bytes).substr(0, 16);
  return ins;
}

namespace {

bool check_positive(const AtomicConstraint& c, const Response& r) noexcept {
  const auto& t = r.tokens;
  switch (c.kind) {
    case Kind::kContains:
      return std::find(t.begin(), t.end(), c.token) != t.end();
    case Kind::kStartsWith:
      return !t.empty() && t.front() == c.token;
    case Kind::kEndsWith:
      return !t.empty() && t.back() == c.token;
    case Kind::kLengthBetween: {
      const int n = static_cast<int>(t.size());
      return c.lo <= n && n <= c.hi;
    }
    case Kind::kCountExact:
      return std::count(t.begin(), t.end(), c.token) == c.k;
    case Kind::kNoAdjacentRepeat:
      return std::adjacent_find(t.begin(), t.end()) == t.end();
  }
  return false;
}

}  // namespace

bool check(const AtomicConstraint& c, const Response& r) noexcept {
  const bool ok = check_positive(c, r);
  return c.polarity == Polarity::kPositive ? ok : !ok;
}

std::vector<bool> check_all(const std::vector<AtomicConstraint>& cs,
                            const Response& r) {
  std::vector<bool> out;
  out.reserve(cs.size());
  for (const auto& c : cs) out.push_back(check(c, r));
  return out;
}

std::vector<bool> check_all(const Instruction& ins, const Response& r) {
  return check_all(ins.constraints, r);
}

std::vector<TokenId> serialize_constraints(const std::vector<AtomicConstraint>& cs,
                                           const Vocabulary& vocab) {
  if (cs.empty()) throw Error("cannot serialize an empty instruction");
  std::vector<TokenId> out{Vocabulary::kInsBegin};
  for (std::size_t i = 0; i < cs.size(); ++i) {
    const auto& c = cs[i];
    validate(c, vocab);
    if (i) out.push_back(Vocabulary::kSep);
    out.push_back(Vocabulary::kFirstKind + static_cast<int>(c.kind));
    out.push_back(c.polarity == Polarity::kPositive ? Vocabulary::kPositive
                                                    : Vocabulary::kNegative);
    switch (c.kind) {
      case Kind::kContains:
      case Kind::kStartsWith:
      case Kind::kEndsWith:
        out.push_back(c.token);
        break;
      case Kind::kLengthBetween:
        out.push_back(vocab.number(c.lo));
        out.push_back(vocab.number(c.hi));
        break;
      case Kind::kCountExact:
        out.push_back(c.token);
        out.push_back(vocab.number(c.k));
        break;
      case Kind::kNoAdjacentRepeat:
        break;
    }
  }
  out.push_back(Vocabulary::kInsEnd);
  return out;
}

std::vector<TokenId> serialize_instruction(const Instruction& ins,
                                           const Vocabulary& vocab) {
  return serialize_constraints(ins.constraints, vocab);
}

Instruction parse_instruction(const std::vector<TokenId>& tokens,
                              const Vocabulary& vocab) {
  std::size_t pos = 0;
  auto next = [&](const char* what) -> TokenId {
    if (pos >= tokens.size()) throw ParseError(std::string("expected ") + what, pos);
    return tokens[pos++];
  };
  auto letter = [&]() {
    const TokenId t = next("letter");
    if (!vocab.is_letter(t)) throw ParseError("expected letter", pos - 1);
    return t;
  };
  auto number = [&]() {
    const TokenId t = next("number");
    if (!vocab.is_number(t)) throw ParseError("expected number", pos - 1);
    return vocab.number_value(t);
  };

  if (next("instruction begin") != Vocabulary::kInsBegin) {
    throw ParseError("expected instruction begin", 0);
  }
  std::vector<AtomicConstraint> cs;
  while (true) {
    const TokenId kind_tok = next("constraint kind");
    if (!vocab.is_kind(kind_tok)) throw ParseError("unknown constraint kind", pos - 1);
    AtomicConstraint c;
    c.kind = static_cast<Kind>(kind_tok - Vocabulary::kFirstKind);
    const TokenId pol = next("polarity");
    if (pol == Vocabulary::kPositive) {
      c.polarity = Polarity::kPositive;
    } else if (pol == Vocabulary::kNegative) {
      c.polarity = Polarity::kNegative;
    } else {
      throw ParseError("expected polarity", pos - 1);
    }
    switch (c.kind) {
      case Kind::kContains:
      case Kind::kStartsWith:
      case Kind::kEndsWith:
        c.token = letter();
        break;
      case Kind::kLengthBetween:
        c.lo = number();
        c.hi = number();
        if (c.hi < c.lo) throw ParseError("length bounds out of order", pos - 1);
        break;
      case Kind::kCountExact:
        c.token = letter();
        c.k = number();
        break;
      case Kind::kNoAdjacentRepeat:
        break;
    }
    cs.push_back(c);
    const TokenId delim = next("separator or instruction end");
    if (delim == Vocabulary::kInsEnd) break;
    if (delim != Vocabulary::kSep) {
      throw ParseError("expected separator or instruction end", pos - 1);
    }
  }
  if (pos != tokens.size()) throw ParseError("trailing tokens after instruction end", pos);
  return make_instruction(std::move(cs), vocab);
}

std::vector<TokenId> empty_conditioning_prefix() {
  return {Vocabulary::kInsBegin, Vocabulary::kInsEnd};
}

AtomicConstraint negate(const AtomicConstraint& c) noexcept {
  AtomicConstraint out = c;
  out.polarity = c.polarity == Polarity::kPositive ? Polarity::kNegative
                                                   : Polarity::kPositive;
  return out;
}

AtomicConstraint draw_constraint(const Vocabulary& vocab, const CatalogConfig& catalog,
                                 Rng& rng) {
  std::uniform_int_distribution<int> kind_dist(0, kNumKinds - 1);
  std::uniform_int_distribution<int> letter_dist(0, vocab.num_letters() - 1);
  const auto kind = static_cast<Kind>(kind_dist(rng));
  switch (kind) {
    case Kind::kContains:
      return AtomicConstraint::contains(vocab.letter(letter_dist(rng)));
    case Kind::kStartsWith:
      return AtomicConstraint::starts_with(vocab.letter(letter_dist(rng)));
    case Kind::kEndsWith:
      return AtomicConstraint::ends_with(vocab.letter(letter_dist(rng)));
    case Kind::kLengthBetween: {
      const int max_lo = std::min(catalog.max_length_lo, catalog.max_response_len);
      const int lo = std::uniform_int_distribution<int>(catalog.min_length_lo, max_lo)(rng);
      const int hi = std::min(
          catalog.max_response_len,
          lo + std::uniform_int_distribution<int>(0, catalog.max_length_span)(rng));
      return AtomicConstraint::length_between(lo, hi);
    }
    case Kind::kCountExact: {
      const TokenId t = vocab.letter(letter_dist(rng));
      return AtomicConstraint::count_exact(
          t, std::uniform_int_distribution<int>(0, catalog.max_count)(rng));
    }
    case Kind::kNoAdjacentRepeat:
      return AtomicConstraint::no_adjacent_repeat();
  }
  return AtomicConstraint::no_adjacent_repeat();
}

AtomicConstraint substitute(const AtomicConstraint& c, const Vocabulary& vocab,
                            const CatalogConfig& catalog, Rng& rng) {
  // The catalog always holds more than one parameterization, so this
  // terminates with probability one; the bound only guards misconfiguration.
  for (int attempt = 0; attempt < 100000; ++attempt) {
    AtomicConstraint out = draw_constraint(vocab, catalog, rng);
    out.polarity = c.polarity;
    if (out != c) return out;
  }
  throw Error("constraint catalog too small to substitute");
}

std::vector<AtomicConstraint> sample_constraint_set(const Vocabulary& vocab, Rng& rng,
                                                    int n_min, int n_max,
                                                    const SamplerConfig& cfg) {
  if (n_min < 1 || n_max < n_min) throw Error("need 1 <= n_min <= n_max");
  std::bernoulli_distribution negative(cfg.catalog.negative_probability);
  std::bernoulli_distribution anchor_is_start(0.5);
  for (int attempt = 0; attempt < cfg.max_resamples; ++attempt) {
    const int n = std::uniform_int_distribution<int>(n_min, n_max)(rng);
    std::vector<AtomicConstraint> cs;
    cs.reserve(n);
    // The first constraint anchors the task and is never dropped later.
    const Kind anchor = anchor_is_start(rng) ? Kind::kStartsWith : Kind::kLengthBetween;
    AtomicConstraint first;
    do {
      first = draw_constraint(vocab, cfg.catalog, rng);
    } while (first.kind != anchor);
    cs.push_back(first);
    while (static_cast<int>(cs.size()) < n) {
      AtomicConstraint c = draw_constraint(vocab, cfg.catalog, rng);
      if (negative(rng)) c = negate(c);
      if (std::find(cs.begin(), cs.end(), c) != cs.end()) continue;
      cs.push_back(c);
    }
    if (satisfiable(cs, vocab, cfg.catalog.max_response_len)) return cs;
  }
  throw Error("sample_constraint_set: no satisfiable set within resample budget");
}

}  // namespace musc::lang
