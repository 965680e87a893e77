#include "musc/vocab.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "musc/common.hpp"

namespace musc {

namespace {
constexpr const char* kKindSurface[Vocabulary::kNumKinds] = {
    "<contains>", "<starts>", "<ends>", "<length>", "<count>", "<norepeat>"};
}

Vocabulary::Vocabulary(int num_letters, int max_number)
    : num_letters_(num_letters),
      max_number_(max_number),
      first_letter_(kFirstNumber + max_number + 1) {
  if (num_letters < 2 || num_letters > kMaxLetters) {
    throw ConfigError("vocabulary needs between 2 and 16 letters");
  }
  if (max_number < 1) throw ConfigError("vocabulary max_number must be >= 1");
}

TokenId Vocabulary::letter(int index) const {
  if (index < 0 || index >= num_letters_) throw Error("letter index out of range");
  return first_letter_ + index;
}

TokenId Vocabulary::number(int value) const {
  if (value < 0 || value > max_number_) throw Error("number out of range");
  return kFirstNumber + value;
}

std::vector<TokenId> Vocabulary::letters() const {
  std::vector<TokenId> out(num_letters_);
  for (int i = 0; i < num_letters_; ++i) out[i] = first_letter_ + i;
  return out;
}

std::string Vocabulary::surface(TokenId id) const {
  switch (id) {
    case kPad: return "<pad>";
    case kInsBegin: return "<ins>";
    case kInsEnd: return "</ins>";
    case kSep: return "<sep>";
    case kEos: return "</s>";
    case kPositive: return "+";
    case kNegative: return "-";
    default: break;
  }
  if (is_kind(id)) return kKindSurface[id - kFirstKind];
  if (is_number(id)) return "#" + std::to_string(number_value(id));
  if (is_letter(id)) return std::string(1, static_cast<char>('a' + letter_index(id)));
  return "<unk:" + std::to_string(id) + ">";
}

std::string Vocabulary::render(const std::vector<TokenId>& tokens) const {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += surface(tokens[i]);
  }
  return out;
}

void Vocabulary::write(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write vocabulary file " + path);
  out << "#musc-vocab v1 letters=" << num_letters_ << " max_number=" << max_number_
      << "\n";
  for (TokenId id = 0; id < size(); ++id) out << id << '\t' << surface(id) << '\n';
}

Vocabulary Vocabulary::read(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read vocabulary file " + path);
  std::string header;
  std::getline(in, header);
  int letters = 0, max_number = 0;
  if (std::sscanf(header.c_str(), "#musc-vocab v1 letters=%d max_number=%d", &letters,
                  &max_number) != 2) {
    throw Error("bad vocabulary header in " + path);
  }
  Vocabulary vocab(letters, max_number);
  std::string line;
  TokenId expected = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    TokenId id;
    std::string surface;
    ls >> id >> surface;
    if (id != expected || surface != vocab.surface(id)) {
      throw Error("vocabulary file " + path + " disagrees with its header at id " +
                  std::to_string(expected));
    }
    ++expected;
  }
  if (expected != vocab.size()) throw Error("vocabulary file " + path + " truncated");
  return vocab;
}

}  // namespace musc
