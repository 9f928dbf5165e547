#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace iclprobe {

using TokenId = std::int32_t;

// Closed character vocabulary: a-z, A-Z, 0-9, '-', '>', ',', '(', ')', ' '.
// One token per character, so equal-length strings always tokenize to equal lengths.
class Vocabulary {
 public:
  static constexpr std::string_view kChars =
      "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789->,() ";
  static constexpr int kSize = static_cast<int>(kChars.size());

  static bool contains(char c) noexcept;
  static TokenId id(char c);  // throws TokenizationError
  static char character(TokenId id);
};

// Half-open token interval [start, end).
struct Span {
  int start = 0;
  int end = 0;
  int length() const noexcept { return end - start; }
  bool operator==(const Span&) const = default;
};

struct DemoRoles {
  Span query;
  int is_pos = -1;      // the '>' of "->"
  int answer_pos = -1;
  int sep_pos = -1;     // the ',' of ", "; -1 for a trailing demonstration with no separator
  bool operator==(const DemoRoles&) const = default;
};

struct FinalRoles {
  Span query;
  int is_pos = -1;
  bool operator==(const FinalRoles&) const = default;
};

struct RoleMap {
  std::vector<DemoRoles> demos;
  std::optional<FinalRoles> final_query;

  int n_demos() const noexcept { return static_cast<int>(demos.size()); }
  bool operator==(const RoleMap&) const = default;
};

struct Tokenized {
  std::vector<TokenId> tokens;
  RoleMap roles;
};

// Tokenizes a prompt of the form "Q->A, Q->A, ..., Q->" and locates every role position.
// A prompt may also end in a demonstration ("Q->A") with no final query.
Tokenized tokenize(std::string_view text);

std::string detokenize(const std::vector<TokenId>& tokens);
std::string detokenize(const std::vector<TokenId>& tokens, Span span);

}  // namespace iclprobe
