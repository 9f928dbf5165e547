#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "iclprobe/rng.hpp"
#include "iclprobe/tokenizer.hpp"

namespace iclprobe {

enum class TaskFamily {
  string_length_simple,   // strings over {a, b}
  string_length_complex,  // strings over a-z and A-Z
  digit,
  grid2d,
  knowledge_surrogate,
};

std::string_view to_string(TaskFamily family);
TaskFamily parse_family(std::string_view name);  // throws ParameterDomainError
const std::vector<TaskFamily>& all_families();
bool is_categorization(TaskFamily family);

inline constexpr int kMaxDemos = 16;
inline constexpr int kMinStringLength = 1;
inline constexpr int kMaxStringLength = 10;

// Rule parameter meaning per family:
//   string length: label = len > threshold        (canonical 5)
//   digit:         label = digit >= threshold     (canonical 5)
//   grid2d:        label = y - x >= threshold     (canonical 0)
// polarity flips the label. The knowledge surrogate ignores both.
struct TaskSpec {
  TaskFamily family = TaskFamily::string_length_simple;
  int threshold = 5;
  bool polarity = false;
  int n_demos = 8;
  std::uint64_t seed = 0;

  static TaskSpec canonical(TaskFamily family, int n_demos, std::uint64_t seed = 0);
  void validate() const;  // throws ParameterDomainError
};

int canonical_threshold(TaskFamily family);

// Injective single-character key -> value map used as trained-in "knowledge".
class KnowledgeTable {
 public:
  KnowledgeTable() = default;
  explicit KnowledgeTable(std::map<char, char> pairs);

  char lookup(char key) const;  // throws ParameterDomainError
  bool contains(char key) const { return pairs_.count(key) != 0; }
  const std::vector<char>& keys() const noexcept { return keys_; }
  const std::vector<char>& values() const noexcept { return values_; }
  std::size_t size() const noexcept { return keys_.size(); }
  const std::map<char, char>& pairs() const noexcept { return pairs_; }

 private:
  std::map<char, char> pairs_;
  std::vector<char> keys_;
  std::vector<char> values_;
};

inline constexpr int kKnowledgeAlphabetSize = 52;  // a-z, A-Z
inline constexpr int kDefaultKnowledgePairs = 50;
inline constexpr std::uint64_t kDefaultKnowledgeSeed = 20240607;

KnowledgeTable build_knowledge_table(int n_pairs, std::uint64_t seed);

// The fixed table baked into every training corpus and evaluation set.
const KnowledgeTable& default_knowledge_table();

// Ground-truth label for a raw query string (as it appears in the prompt).
char rule_oracle(const TaskSpec& spec, std::string_view query);

// Characters an answer may take for the family under any rule parameters.
std::vector<char> answer_alphabet(TaskFamily family);

struct PromptInstance {
  std::string text;
  std::vector<TokenId> tokens;
  RoleMap roles;
  TokenId gold_answer = 0;
  TaskSpec spec;

  int n_demos() const noexcept { return roles.n_demos(); }
  int final_is_pos() const { return roles.final_query.value().is_pos; }
  std::string demo_query(int j) const { return detokenize(tokens, roles.demos.at(static_cast<std::size_t>(j)).query); }
  std::string final_query() const { return detokenize(tokens, roles.final_query.value().query); }
  char demo_answer(int j) const {
    return Vocabulary::character(tokens.at(static_cast<std::size_t>(roles.demos.at(static_cast<std::size_t>(j)).answer_pos)));
  }
};

// One query drawn from the family's domain: lengths uniform in [1, 10], digits and
// coordinates uniform, knowledge keys uniform over the default table.
std::string sample_query(TaskFamily family, Rng& rng);

// Assembles and tokenizes a prompt from explicit (query, answer) demonstrations and a final query.
PromptInstance assemble_prompt(const TaskSpec& spec, const std::vector<std::pair<std::string, char>>& demos,
                               const std::string& final_query);

PromptInstance generate_instance(const TaskSpec& spec, std::uint64_t rng_seed);

// n instances; instance i is generate_instance(spec, derive_seed(spec.seed, i)).
std::vector<PromptInstance> generate_dataset(const TaskSpec& spec, int n);

enum class DummyMode { zero_shot, random_answers };

struct DummyVariant {
  PromptInstance prompt;  // tokens, roles and gold of the dummy
  DummyMode mode = DummyMode::zero_shot;
};

DummyVariant make_dummy(const PromptInstance& donor, DummyMode mode, std::uint64_t rng_seed);

// Line format: <prompt-text>\t<gold-answer>\t<role-map JSON>
std::string serialize_instance(const PromptInstance& instance);
PromptInstance parse_instance_line(std::string_view line);
std::string role_map_json(const RoleMap& roles);

}  // namespace iclprobe
