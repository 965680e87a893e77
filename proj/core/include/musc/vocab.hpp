#pragma once

#include <string>
#include <vector>

namespace musc {

using TokenId = int;

// Token-id layout of the synthetic constraint language:
//
//   0        <pad>
//   1        <ins>   instruction begin
//   2        </ins>  instruction end (response follows)
//   3        <sep>   constraint separator
//   4        </s>    response end
//   5..10    constraint kind codes
//   11, 12   polarity codes (+, -)
//   13..     number tokens #0..#max_number
//   then     letters a, b, c, ...
//
// Responses consist of letters only.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kInsBegin = 1;
  static constexpr TokenId kInsEnd = 2;
  static constexpr TokenId kSep = 3;
  static constexpr TokenId kEos = 4;
  static constexpr TokenId kFirstKind = 5;
  static constexpr int kNumKinds = 6;
  static constexpr TokenId kPositive = kFirstKind + kNumKinds;
  static constexpr TokenId kNegative = kPositive + 1;
  static constexpr TokenId kFirstNumber = kNegative + 1;
  static constexpr int kMaxLetters = 16;

  Vocabulary(int num_letters = 8, int max_number = 12);

  int size() const noexcept { return first_letter_ + num_letters_; }
  int num_letters() const noexcept { return num_letters_; }
  int max_number() const noexcept { return max_number_; }

  TokenId letter(int index) const;
  TokenId number(int value) const;
  bool is_letter(TokenId id) const noexcept {
    return id >= first_letter_ && id < size();
  }
  bool is_number(TokenId id) const noexcept {
    return id >= kFirstNumber && id < first_letter_;
  }
  bool is_kind(TokenId id) const noexcept {
    return id >= kFirstKind && id < kFirstKind + kNumKinds;
  }
  int letter_index(TokenId id) const noexcept { return id - first_letter_; }
  int number_value(TokenId id) const noexcept { return id - kFirstNumber; }
  std::vector<TokenId> letters() const;

  std::string surface(TokenId id) const;
  std::string render(const std::vector<TokenId>& tokens) const;

  bool operator==(const Vocabulary& o) const noexcept {
    return num_letters_ == o.num_letters_ && max_number_ == o.max_number_;
  }

  // Sidecar file: header line plus one "id<TAB>surface" line per token.
  void write(const std::string& path) const;
  static Vocabulary read(const std::string& path);

 private:
  int num_letters_;
  int max_number_;
  TokenId first_letter_;
};

}  // namespace musc
