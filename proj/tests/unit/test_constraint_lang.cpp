#include <gtest/gtest.h>

#include <algorithm>

#include "musc/constraint_lang.hpp"
#include "test_util.hpp"

using namespace musc;
using namespace musc::lang;
using musc::testing::L;
using musc::testing::resp;
using musc::testing::vocab;

namespace {

using C = AtomicConstraint;

// Straight scan, independent of the library checker.
int count_letter(const Response& r, TokenId t) {
  int n = 0;
  for (TokenId x : r.tokens) n += x == t;
  return n;
}

Response random_response(Rng& rng, int max_len) {
  std::uniform_int_distribution<int> len(0, max_len);
  std::uniform_int_distribution<int> letter(0, vocab().num_letters() - 1);
  Response r;
  const int n = len(rng);
  for (int i = 0; i < n; ++i) r.tokens.push_back(vocab().letter(letter(rng)));
  return r;
}

}  // namespace

TEST(Check, ContainsAndPolarity) {
  EXPECT_TRUE(check(C::contains(L('a')), resp("bab")));
  EXPECT_FALSE(check(C::contains(L('a'), Polarity::kNegative), resp("bab")));
}

TEST(Check, CountExactMatchesDirectScan) {
  const auto r = resp("abca");
  EXPECT_EQ(count_letter(r, L('a')), 2);
  EXPECT_TRUE(check(C::count_exact(L('a'), 2), r));
  EXPECT_FALSE(check(C::count_exact(L('a'), 1), r));
}

TEST(Check, AllKinds) {
  EXPECT_TRUE(check(C::starts_with(L('c')), resp("cab")));
  EXPECT_FALSE(check(C::starts_with(L('c')), resp("")));
  EXPECT_TRUE(check(C::ends_with(L('b')), resp("cab")));
  EXPECT_TRUE(check(C::length_between(2, 4), resp("abc")));
  EXPECT_TRUE(check(C::length_between(3, 3), resp("abc")));
  EXPECT_FALSE(check(C::length_between(4, 6), resp("abc")));
  EXPECT_TRUE(check(C::no_adjacent_repeat(), resp("abab")));
  EXPECT_FALSE(check(C::no_adjacent_repeat(), resp("abba")));
  EXPECT_TRUE(check(C::no_adjacent_repeat(), resp("")));
}

TEST(CheckAll, Composition) {
  const auto ins = make_instruction({C::contains(L('a')), C::ends_with(L('b'))}, vocab());
  EXPECT_EQ(check_all(ins, resp("ab")), (std::vector<bool>{true, true}));
  EXPECT_EQ(check_all(make_instruction({C::contains(L('a'))}, vocab()), resp("")),
            std::vector<bool>{false});
  EXPECT_EQ(check_all(make_instruction({C::length_between(2, 4)}, vocab()), resp("abc")),
            std::vector<bool>{true});
}

TEST(Negate, ComplementOnRandomProbes) {
  Rng rng(11);
  CatalogConfig cat;
  for (int i = 0; i < 2000; ++i) {
    const C c = draw_constraint(vocab(), cat, rng);
    const Response r = random_response(rng, 12);
    EXPECT_NE(check(c, r), check(negate(c), r));
    EXPECT_EQ(negate(negate(c)), c);
  }
  const C n = negate(C::contains(L('a')));
  EXPECT_EQ(n.polarity, Polarity::kNegative);
  EXPECT_EQ(n.kind, Kind::kContains);
  EXPECT_EQ(n.token, L('a'));
}

TEST(Serialize, StructureAndRoundTrip) {
  const auto one = make_instruction({C::contains(L('a'))}, vocab());
  // <ins> kind polarity letter </ins>
  EXPECT_EQ(serialize_instruction(one, vocab()).size(), 5u);
  const auto len = make_instruction({C::length_between(2, 5)}, vocab());
  EXPECT_EQ(serialize_instruction(len, vocab()).size(), 6u);

  Rng rng(5);
  for (int i = 0; i < 300; ++i) {
    const auto ins = make_instruction(sample_constraint_set(vocab(), rng, 1, 10), vocab());
    EXPECT_EQ(parse_instruction(serialize_instruction(ins, vocab()), vocab()), ins);
  }
}

TEST(Serialize, OrderMatters) {
  const auto a = make_instruction({C::contains(L('a')), C::ends_with(L('b'))}, vocab());
  const auto b = make_instruction({C::ends_with(L('b')), C::contains(L('a'))}, vocab());
  EXPECT_NE(serialize_instruction(a, vocab()), serialize_instruction(b, vocab()));
  EXPECT_NE(a.id, b.id);
}

TEST(Serialize, RejectsOutOfVocabularyParams) {
  Instruction bad;
  bad.constraints = {C::contains(999)};
  EXPECT_THROW(serialize_instruction(bad, vocab()), Error);
  EXPECT_THROW(make_instruction({}, vocab()), Error);
}

TEST(Parse, Errors) {
  const auto tokens =
      serialize_instruction(make_instruction({C::contains(L('a'))}, vocab()), vocab());
  auto truncated = tokens;
  truncated.pop_back();
  EXPECT_THROW(parse_instruction(truncated, vocab()), ParseError);

  auto unknown_kind = tokens;
  unknown_kind[1] = Vocabulary::kSep;
  try {
    parse_instruction(unknown_kind, vocab());
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.position(), 1u);
  }
  auto trailing = tokens;
  trailing.push_back(L('a'));
  EXPECT_THROW(parse_instruction(trailing, vocab()), ParseError);
}

TEST(Substitute, AlwaysDiffersAndIsSeeded) {
  CatalogConfig cat;
  const C c = C::contains(L('a'));
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) EXPECT_NE(substitute(c, vocab(), cat, rng), c);
  Rng r1(9), r2(9);
  EXPECT_EQ(substitute(c, vocab(), cat, r1), substitute(c, vocab(), cat, r2));
}

TEST(Satisfiable, Examples) {
  EXPECT_FALSE(satisfiable({C::contains(L('a')), C::contains(L('a'), Polarity::kNegative)},
                           vocab(), 12));
  EXPECT_FALSE(satisfiable({C::length_between(2, 3), C::length_between(5, 6)}, vocab(), 12));
  const std::vector<C> cs{C::contains(L('a')), C::ends_with(L('b')), C::length_between(2, 4)};
  EXPECT_TRUE(satisfiable(cs, vocab(), 12));
  EXPECT_EQ(check_all(cs, resp("ab")), (std::vector<bool>{true, true, true}));
}

TEST(Solve, ForcedWitness) {
  Rng rng(1);
  const auto r = solve({C::starts_with(L('a')), C::ends_with(L('b')), C::length_between(2, 2)},
                       vocab(), rng);
  ASSERT_TRUE(r.has_value());
  EXPECT_EQ(*r, resp("ab"));
  EXPECT_FALSE(
      solve({C::contains(L('a')), C::contains(L('a'), Polarity::kNegative)}, vocab(), rng));
}

TEST(Solve, SoundOnRandomSets) {
  Rng rng(21);
  for (int i = 0; i < 300; ++i) {
    const auto cs = sample_constraint_set(vocab(), rng, 1, 10);
    const auto r = solve(cs, vocab(), rng);
    ASSERT_TRUE(r.has_value());
    const auto sat = check_all(cs, *r);
    EXPECT_TRUE(std::all_of(sat.begin(), sat.end(), [](bool b) { return b; }));
  }
}

TEST(Solve, AgreesWithSatisfiable) {
  Rng rng(77);
  CatalogConfig cat;
  cat.negative_probability = 0.5;
  for (int i = 0; i < 300; ++i) {
    std::vector<C> cs;
    for (int k = 0; k < 4; ++k) cs.push_back(draw_constraint(vocab(), cat, rng));
    EXPECT_EQ(satisfiable(cs, vocab(), 12), solve(cs, vocab(), rng).has_value());
  }
}

TEST(SampleConstraintSet, Contract) {
  Rng rng(8);
  for (int i = 0; i < 200; ++i) {
    const auto cs = sample_constraint_set(vocab(), rng, 3, 3);
    ASSERT_EQ(cs.size(), 3u);
    EXPECT_TRUE(cs[0].kind == Kind::kStartsWith || cs[0].kind == Kind::kLengthBetween);
    EXPECT_EQ(cs[0].polarity, Polarity::kPositive);
    EXPECT_TRUE(satisfiable(cs, vocab(), 12));
  }
  Rng a(4), b(4);
  EXPECT_EQ(sample_constraint_set(vocab(), a, 3, 10), sample_constraint_set(vocab(), b, 3, 10));
}

TEST(Vocabulary, SidecarRoundTrip) {
  musc::testing::TempDir dir("vocab");
  const Vocabulary v(6, 9);
  v.write(dir.file("v.vocab"));
  EXPECT_EQ(Vocabulary::read(dir.file("v.vocab")), v);
  EXPECT_EQ(v.surface(v.letter(0)), "a");
}
