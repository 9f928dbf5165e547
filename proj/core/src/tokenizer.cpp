#include "iclprobe/tokenizer.hpp"

#include <array>

#include "iclprobe/errors.hpp"

namespace iclprobe {

namespace {

constexpr std::array<int, 256> build_index() {
  std::array<int, 256> index{};
  for (auto& v : index) v = -1;
  for (std::size_t i = 0; i < Vocabulary::kChars.size(); ++i) {
    index[static_cast<unsigned char>(Vocabulary::kChars[i])] = static_cast<int>(i);
  }
  return index;
}

constexpr std::array<int, 256> kIndex = build_index();

std::string describe(char c) {
  if (c >= 0x20 && c < 0x7f) return std::string("'") + c + "'";
  return "byte 0x" + std::to_string(static_cast<unsigned char>(c));
}

}  // namespace

bool Vocabulary::contains(char c) noexcept { return kIndex[static_cast<unsigned char>(c)] >= 0; }

TokenId Vocabulary::id(char c) {
  const int i = kIndex[static_cast<unsigned char>(c)];
  if (i < 0) throw TokenizationError("character " + describe(c) + " is not in the vocabulary");
  return i;
}

char Vocabulary::character(TokenId id) {
  if (id < 0 || id >= kSize) throw TokenizationError("token id " + std::to_string(id) + " out of range");
  return kChars[static_cast<std::size_t>(id)];
}

Tokenized tokenize(std::string_view text) {
  Tokenized out;
  out.tokens.reserve(text.size());
  for (char c : text) out.tokens.push_back(Vocabulary::id(c));

  const int n = static_cast<int>(text.size());
  int seg = 0;
  while (seg < n) {
    // The arrow is searched after the first query character so that a query may not be empty.
    const auto arrow = text.find("->", static_cast<std::size_t>(seg) + 1);
    if (arrow == std::string_view::npos) {
      throw TokenizationError("segment starting at " + std::to_string(seg) + " has no \"->\"");
    }
    const int dash = static_cast<int>(arrow);
    const int is_pos = dash + 1;
    if (is_pos == n - 1) {
      out.roles.final_query = FinalRoles{{seg, dash}, is_pos};
      break;
    }
    DemoRoles demo{{seg, dash}, is_pos, is_pos + 1, -1};
    if (demo.answer_pos == n - 1) {
      out.roles.demos.push_back(demo);
      break;
    }
    if (demo.answer_pos + 2 >= n || text[demo.answer_pos + 1] != ',' || text[demo.answer_pos + 2] != ' ') {
      throw TokenizationError("expected \", \" after the answer at " + std::to_string(demo.answer_pos));
    }
    demo.sep_pos = demo.answer_pos + 1;
    out.roles.demos.push_back(demo);
    seg = demo.sep_pos + 2;
    if (seg >= n) throw TokenizationError("prompt ends with a dangling separator");
  }
  return out;
}

std::string detokenize(const std::vector<TokenId>& tokens) {
  return detokenize(tokens, Span{0, static_cast<int>(tokens.size())});
}

std::string detokenize(const std::vector<TokenId>& tokens, Span span) {
  if (span.start < 0 || span.end > static_cast<int>(tokens.size()) || span.start > span.end) {
    throw RangeError("span out of range");
  }
  std::string s;
  s.reserve(static_cast<std::size_t>(span.length()));
  for (int i = span.start; i < span.end; ++i) s.push_back(Vocabulary::character(tokens[static_cast<std::size_t>(i)]));
  return s;
}

}  // namespace iclprobe
