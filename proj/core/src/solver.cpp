#include <algorithm>
#include <array>
#include <unordered_map>

#include "musc/constraint_lang.hpp"

namespace musc::lang {

namespace {

// Abstract response state: everything any constraint in the set can observe.
// Word `a`: first letter (5 bits), last letter (5 bits), repeat flag (1 bit),
// contains mask (16 bits). Word `b`: 4-bit saturating count per letter.
struct StateKey {
  std::uint64_t a = 0;
  std::uint64_t b = 0;
  bool operator==(const StateKey&) const = default;
};

struct StateKeyHash {
  std::size_t operator()(const StateKey& k) const noexcept {
    return static_cast<std::size_t>(mix_seed(k.a) ^ (k.b * 0x9e3779b97f4a7c15ULL));
  }
};

constexpr std::uint64_t kNone = 31;

class StateSpace {
 public:
  StateSpace(const std::vector<AtomicConstraint>& cs, const Vocabulary& vocab)
      : cs_(cs), vocab_(vocab) {
    cap_.fill(0);
    for (const auto& c : cs) {
      validate(c, vocab);
      switch (c.kind) {
        case Kind::kContains:
          contains_mask_ |= 1u << vocab.letter_index(c.token);
          break;
        case Kind::kStartsWith:
          track_first_ = true;
          break;
        case Kind::kEndsWith:
          track_last_ = true;
          break;
        case Kind::kNoAdjacentRepeat:
          track_last_ = true;
          track_repeat_ = true;
          break;
        case Kind::kCountExact: {
          if (c.k > 14) throw Error("count constraints above 14 are not supported");
          auto& cap = cap_[vocab.letter_index(c.token)];
          cap = std::max(cap, c.k + 1);
          break;
        }
        case Kind::kLengthBetween:
          break;
      }
    }
  }

  StateKey initial() const {
    return {.a = kNone | (kNone << 5), .b = 0};
  }

  StateKey step(const StateKey& s, int letter, int length) const {
    StateKey n = s;
    const std::uint64_t last = (s.a >> 5) & 31;
    if (track_first_ && length == 0) n.a = (n.a & ~std::uint64_t{31}) | letter;
    if (track_repeat_ && length > 0 && last == static_cast<std::uint64_t>(letter)) {
      n.a |= std::uint64_t{1} << 10;
    }
    if (track_last_) n.a = (n.a & ~(std::uint64_t{31} << 5)) | (std::uint64_t(letter) << 5);
    if (contains_mask_ & (1u << letter)) n.a |= std::uint64_t{1} << (11 + letter);
    if (cap_[letter] > 0) {
      const int shift = 4 * letter;
      const int count = static_cast<int>((s.b >> shift) & 15);
      const int next = std::min(count + 1, cap_[letter]);
      n.b = (n.b & ~(std::uint64_t{15} << shift)) | (std::uint64_t(next) << shift);
    }
    return n;
  }

  bool accepts(const StateKey& s, int length) const {
    const std::uint64_t first = s.a & 31, last = (s.a >> 5) & 31;
    const bool repeat = (s.a >> 10) & 1;
    for (const auto& c : cs_) {
      bool ok = false;
      switch (c.kind) {
        case Kind::kContains:
          ok = (s.a >> (11 + vocab_.letter_index(c.token))) & 1;
          break;
        case Kind::kStartsWith:
          ok = length > 0 && first == static_cast<std::uint64_t>(vocab_.letter_index(c.token));
          break;
        case Kind::kEndsWith:
          ok = length > 0 && last == static_cast<std::uint64_t>(vocab_.letter_index(c.token));
          break;
        case Kind::kLengthBetween:
          ok = c.lo <= length && length <= c.hi;
          break;
        case Kind::kCountExact: {
          const int count = static_cast<int>((s.b >> (4 * vocab_.letter_index(c.token))) & 15);
          ok = count == c.k;
          break;
        }
        case Kind::kNoAdjacentRepeat:
          ok = !repeat;
          break;
      }
      if (c.polarity == Polarity::kNegative) ok = !ok;
      if (!ok) return false;
    }
    return true;
  }

 private:
  const std::vector<AtomicConstraint>& cs_;
  const Vocabulary& vocab_;
  bool track_first_ = false;
  bool track_last_ = false;
  bool track_repeat_ = false;
  std::uint32_t contains_mask_ = 0;
  std::array<int, Vocabulary::kMaxLetters> cap_{};
};

struct Node {
  StateKey key;
  int parent;
  int letter;
};

int max_useful_length(const std::vector<AtomicConstraint>& cs, int max_len) {
  int bound = max_len;
  for (const auto& c : cs) {
    if (c.kind == Kind::kLengthBetween && c.polarity == Polarity::kPositive) {
      bound = std::min(bound, c.hi);
    }
  }
  return bound;
}

}  // namespace

std::optional<Response> exhaustive_solve(const std::vector<AtomicConstraint>& cs,
                                         const Vocabulary& vocab, int max_len,
                                         const std::vector<TokenId>& letter_order) {
  const StateSpace space(cs, vocab);
  std::vector<int> order;
  if (letter_order.empty()) {
    for (int i = 0; i < vocab.num_letters(); ++i) order.push_back(i);
  } else {
    for (TokenId t : letter_order) order.push_back(vocab.letter_index(t));
  }
  const int bound = max_useful_length(cs, max_len);

  std::vector<std::vector<Node>> layers(1);
  layers[0].push_back({space.initial(), -1, -1});
  for (int length = 0;; ++length) {
    const auto& layer = layers[length];
    for (std::size_t i = 0; i < layer.size(); ++i) {
      if (!space.accepts(layer[i].key, length)) continue;
      Response r;
      r.tokens.resize(length);
      int idx = static_cast<int>(i);
      for (int l = length; l > 0; --l) {
        r.tokens[l - 1] = vocab.letter(layers[l][idx].letter);
        idx = layers[l][idx].parent;
      }
      return r;
    }
    if (length >= bound) break;
    std::vector<Node> next;
    std::unordered_map<StateKey, int, StateKeyHash> seen;
    seen.reserve(layer.size() * order.size());
    for (std::size_t i = 0; i < layer.size(); ++i) {
      for (int letter : order) {
        const StateKey k = space.step(layer[i].key, letter, length);
        if (seen.emplace(k, static_cast<int>(next.size())).second) {
          next.push_back({k, static_cast<int>(i), letter});
        }
      }
    }
    layers.push_back(std::move(next));
  }
  return std::nullopt;
}

bool satisfiable(const std::vector<AtomicConstraint>& cs, const Vocabulary& vocab,
                 int max_len) {
  return exhaustive_solve(cs, vocab, max_len).has_value();
}

namespace {

std::optional<Response> constructive_attempt(const std::vector<AtomicConstraint>& cs,
                                             const Vocabulary& vocab,
                                             const std::vector<int>& lengths,
                                             Rng& rng) {
  auto pick = [&](const auto& pool) {
    return pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
  };
  std::vector<bool> banned(vocab.num_letters(), false), counted(vocab.num_letters(), false);
  for (const auto& c : cs) {
    const bool pos = c.polarity == Polarity::kPositive;
    if (c.kind == Kind::kContains && !pos) banned[vocab.letter_index(c.token)] = true;
    if (c.kind == Kind::kCountExact && pos) counted[vocab.letter_index(c.token)] = true;
  }
  std::vector<TokenId> pool;
  for (int i = 0; i < vocab.num_letters(); ++i) {
    if (!banned[i] && !counted[i]) pool.push_back(vocab.letter(i));
  }
  if (pool.empty()) {
    for (int i = 0; i < vocab.num_letters(); ++i) {
      if (!banned[i]) pool.push_back(vocab.letter(i));
    }
  }
  if (pool.empty()) pool = vocab.letters();

  const int length = pick(lengths);
  std::vector<TokenId> r(length);
  for (auto& t : r) t = pick(pool);
  std::vector<bool> locked(length, false);
  auto unlocked_positions = [&]() {
    std::vector<int> out;
    for (int i = 0; i < length; ++i) {
      if (!locked[i]) out.push_back(i);
    }
    return out;
  };
  auto other_than = [&](TokenId avoid_a, TokenId avoid_b) -> std::optional<TokenId> {
    std::vector<TokenId> options;
    for (TokenId t : pool) {
      if (t != avoid_a && t != avoid_b) options.push_back(t);
    }
    if (options.empty()) return std::nullopt;
    return pick(options);
  };

  for (const auto& c : cs) {
    if (c.polarity != Polarity::kPositive || length == 0) continue;
    if (c.kind == Kind::kStartsWith) {
      r[0] = c.token;
      locked[0] = true;
    } else if (c.kind == Kind::kEndsWith) {
      r[length - 1] = c.token;
      locked[length - 1] = true;
    }
  }
  for (const auto& c : cs) {
    if (c.polarity != Polarity::kPositive || c.kind != Kind::kCountExact) continue;
    int have = static_cast<int>(std::count(r.begin(), r.end(), c.token));
    auto free = unlocked_positions();
    std::shuffle(free.begin(), free.end(), rng);
    for (int p : free) {
      if (have >= c.k) break;
      if (r[p] == c.token) continue;
      r[p] = c.token;
      locked[p] = true;
      ++have;
    }
    for (int i = 0; i < length && have > c.k; ++i) {
      if (r[i] == c.token && !locked[i]) {
        if (auto t = other_than(c.token, -1)) {
          r[i] = *t;
          --have;
        }
      }
    }
    for (int i = 0; i < length; ++i) {
      if (r[i] == c.token) locked[i] = true;
    }
  }
  for (const auto& c : cs) {
    if (c.polarity != Polarity::kPositive || c.kind != Kind::kContains) continue;
    if (std::find(r.begin(), r.end(), c.token) != r.end()) continue;
    auto free = unlocked_positions();
    if (free.empty()) return std::nullopt;
    const int p = pick(free);
    r[p] = c.token;
    locked[p] = true;
  }
  for (const auto& c : cs) {
    if (c.polarity != Polarity::kNegative || length == 0) continue;
    if (c.kind == Kind::kStartsWith && r[0] == c.token && !locked[0]) {
      if (auto t = other_than(c.token, -1)) r[0] = *t;
    } else if (c.kind == Kind::kEndsWith && r[length - 1] == c.token &&
               !locked[length - 1]) {
      if (auto t = other_than(c.token, -1)) r[length - 1] = *t;
    }
  }
  for (const auto& c : cs) {
    if (c.kind != Kind::kNoAdjacentRepeat) continue;
    if (c.polarity == Polarity::kPositive) {
      for (int i = 1; i < length; ++i) {
        if (r[i] != r[i - 1]) continue;
        const int p = !locked[i] ? i : (!locked[i - 1] ? i - 1 : -1);
        if (p < 0) continue;
        const TokenId left = p > 0 ? r[p - 1] : -1;
        const TokenId right = p + 1 < length ? r[p + 1] : -1;
        if (auto t = other_than(left, right)) r[p] = *t;
      }
    } else if (length >= 2 && std::adjacent_find(r.begin(), r.end()) == r.end()) {
      std::vector<int> spots;
      for (int i = 1; i < length; ++i) {
        if (!locked[i] || !locked[i - 1]) spots.push_back(i);
      }
      if (spots.empty()) continue;
      const int i = pick(spots);
      if (!locked[i]) {
        r[i] = r[i - 1];
      } else {
        r[i - 1] = r[i];
      }
    }
  }
  Response out{std::move(r)};
  for (const auto& c : cs) {
    if (!check(c, out)) return std::nullopt;
  }
  return out;
}

}  // namespace

std::optional<Response> solve(const std::vector<AtomicConstraint>& cs,
                              const Vocabulary& vocab, Rng& rng,
                              const SolverConfig& cfg) {
  if (cfg.max_attempts < 1) throw Error("solve: max_attempts must be >= 1");
  for (const auto& c : cs) validate(c, vocab);
  std::vector<int> lengths;
  for (int len = 0; len <= cfg.max_len; ++len) {
    bool ok = true;
    for (const auto& c : cs) {
      if (c.kind != Kind::kLengthBetween) continue;
      const bool in = c.lo <= len && len <= c.hi;
      if (in != (c.polarity == Polarity::kPositive)) ok = false;
    }
    if (ok) lengths.push_back(len);
  }
  if (!lengths.empty()) {
    for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
      if (auto r = constructive_attempt(cs, vocab, lengths, rng)) return r;
    }
  }
  auto order = vocab.letters();
  std::shuffle(order.begin(), order.end(), rng);
  auto r = exhaustive_solve(cs, vocab, cfg.exhaustive_len, order);
  if (r && !std::all_of(cs.begin(), cs.end(), [&](const auto& c) { return check(c, *r); })) {
    throw Error("solver produced an invalid witness");
  }
  return r;
}

}  // namespace musc::lang
