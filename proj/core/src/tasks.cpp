#include "iclprobe/tasks.hpp"

#include <algorithm>
#include <sstream>

#include <json.hpp>

#include "iclprobe/errors.hpp"

namespace iclprobe {

namespace {

constexpr std::string_view kLetters = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";
constexpr std::string_view kSimpleLetters = "ab";

int parse_digit(std::string_view q) {
  if (q.size() != 1 || q[0] < '0' || q[0] > '9') {
    throw ParameterDomainError("digit query must be a single character 0-9, got \"" + std::string(q) + "\"");
  }
  return q[0] - '0';
}

std::pair<int, int> parse_grid(std::string_view q) {
  if (q.size() != 5 || q[0] != '(' || q[2] != ',' || q[4] != ')' || q[1] < '0' || q[1] > '9' || q[3] < '0' ||
      q[3] > '9') {
    throw ParameterDomainError("grid2d query must look like (x,y) with x,y in 0-9, got \"" + std::string(q) + "\"");
  }
  return {q[1] - '0', q[3] - '0'};
}

int string_length_checked(TaskFamily family, std::string_view q) {
  const int n = static_cast<int>(q.size());
  if (n < kMinStringLength || n > kMaxStringLength) {
    throw ParameterDomainError("string query length " + std::to_string(n) + " outside [1, 10]");
  }
  const std::string_view alphabet = family == TaskFamily::string_length_simple ? kSimpleLetters : kLetters;
  for (char c : q) {
    if (alphabet.find(c) == std::string_view::npos) {
      throw ParameterDomainError("character '" + std::string(1, c) + "' outside the " +
                                 std::string(to_string(family)) + " alphabet");
    }
  }
  return n;
}

}  // namespace

std::string_view to_string(TaskFamily family) {
  switch (family) {
    case TaskFamily::string_length_simple: return "string-length-simple";
    case TaskFamily::string_length_complex: return "string-length-complex";
    case TaskFamily::digit: return "digit";
    case TaskFamily::grid2d: return "grid2d";
    case TaskFamily::knowledge_surrogate: return "knowledge-surrogate";
  }
  return "?";
}

TaskFamily parse_family(std::string_view name) {
  for (TaskFamily f : all_families()) {
    if (to_string(f) == name) return f;
  }
  throw ParameterDomainError("unknown task family \"" + std::string(name) + "\"");
}

const std::vector<TaskFamily>& all_families() {
  static const std::vector<TaskFamily> families{TaskFamily::string_length_simple, TaskFamily::string_length_complex,
                                                TaskFamily::digit, TaskFamily::grid2d,
                                                TaskFamily::knowledge_surrogate};
  return families;
}

bool is_categorization(TaskFamily family) { return family != TaskFamily::knowledge_surrogate; }

int canonical_threshold(TaskFamily family) {
  switch (family) {
    case TaskFamily::string_length_simple:
    case TaskFamily::string_length_complex:
    case TaskFamily::digit: return 5;
    case TaskFamily::grid2d:
    case TaskFamily::knowledge_surrogate: return 0;
  }
  return 0;
}

TaskSpec TaskSpec::canonical(TaskFamily family, int n_demos, std::uint64_t seed) {
  return TaskSpec{family, canonical_threshold(family), false, n_demos, seed};
}

void TaskSpec::validate() const {
  if (n_demos < 0 || n_demos > kMaxDemos) {
    throw ParameterDomainError("n_demos " + std::to_string(n_demos) + " outside [0, 16]");
  }
  switch (family) {
    case TaskFamily::string_length_simple:
    case TaskFamily::string_length_complex:
      if (threshold < 0 || threshold > kMaxStringLength) {
        throw ParameterDomainError("string-length threshold " + std::to_string(threshold) + " outside [0, 10]");
      }
      break;
    case TaskFamily::digit:
      if (threshold < 0 || threshold > 10) {
        throw ParameterDomainError("digit threshold " + std::to_string(threshold) + " outside [0, 10]");
      }
      break;
    case TaskFamily::grid2d:
      if (threshold < -9 || threshold > 10) {
        throw ParameterDomainError("grid2d threshold " + std::to_string(threshold) + " outside [-9, 10]");
      }
      break;
    case TaskFamily::knowledge_surrogate: break;
  }
}

KnowledgeTable::KnowledgeTable(std::map<char, char> pairs) : pairs_(std::move(pairs)) {
  for (const auto& [k, v] : pairs_) {
    keys_.push_back(k);
    values_.push_back(v);
  }
  std::sort(values_.begin(), values_.end());
}

char KnowledgeTable::lookup(char key) const {
  const auto it = pairs_.find(key);
  if (it == pairs_.end()) throw ParameterDomainError("key '" + std::string(1, key) + "' not in knowledge table");
  return it->second;
}

KnowledgeTable build_knowledge_table(int n_pairs, std::uint64_t seed) {
  if (n_pairs < 2) throw CapacityError("knowledge table needs at least 2 pairs, got " + std::to_string(n_pairs));
  if (n_pairs > kKnowledgeAlphabetSize) {
    throw CapacityError("knowledge table capacity is " + std::to_string(kKnowledgeAlphabetSize) + " pairs, got " +
                        std::to_string(n_pairs));
  }
  Rng rng(seed);
  std::string keys(kLetters);
  std::string values(kLetters);
  // Fisher-Yates with the portable generator.
  auto shuffle = [&rng](std::string& s) {
    for (std::size_t i = s.size() - 1; i > 0; --i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)));
      std::swap(s[i], s[j]);
    }
  };
  shuffle(keys);
  shuffle(values);
  std::map<char, char> pairs;
  for (int i = 0; i < n_pairs; ++i) pairs.emplace(keys[static_cast<std::size_t>(i)], values[static_cast<std::size_t>(i)]);
  return KnowledgeTable(std::move(pairs));
}

const KnowledgeTable& default_knowledge_table() {
  static const KnowledgeTable table = build_knowledge_table(kDefaultKnowledgePairs, kDefaultKnowledgeSeed);
  return table;
}

char rule_oracle(const TaskSpec& spec, std::string_view query) {
  bool label = false;
  switch (spec.family) {
    case TaskFamily::string_length_simple:
    case TaskFamily::string_length_complex:
      label = string_length_checked(spec.family, query) > spec.threshold;
      break;
    case TaskFamily::digit: label = parse_digit(query) >= spec.threshold; break;
    case TaskFamily::grid2d: {
      const auto [x, y] = parse_grid(query);
      label = y - x >= spec.threshold;
      break;
    }
    case TaskFamily::knowledge_surrogate:
      if (query.size() != 1) throw ParameterDomainError("knowledge query must be a single character");
      return default_knowledge_table().lookup(query[0]);
  }
  if (spec.polarity) label = !label;
  return label ? '1' : '0';
}

std::vector<char> answer_alphabet(TaskFamily family) {
  if (family == TaskFamily::knowledge_surrogate) return default_knowledge_table().values();
  return {'0', '1'};
}

std::string sample_query(TaskFamily family, Rng& rng) {
  switch (family) {
    case TaskFamily::string_length_simple:
    case TaskFamily::string_length_complex: {
      const std::string_view alphabet = family == TaskFamily::string_length_simple ? kSimpleLetters : kLetters;
      const auto len = rng.uniform_int(kMinStringLength, kMaxStringLength);
      std::string q;
      for (std::int64_t i = 0; i < len; ++i) {
        q.push_back(alphabet[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(alphabet.size()) - 1))]);
      }
      return q;
    }
    case TaskFamily::digit: return std::string(1, static_cast<char>('0' + rng.uniform_int(0, 9)));
    case TaskFamily::grid2d: {
      const auto x = rng.uniform_int(0, 9);
      const auto y = rng.uniform_int(0, 9);
      return std::string{'(', static_cast<char>('0' + x), ',', static_cast<char>('0' + y), ')'};
    }
    case TaskFamily::knowledge_surrogate: {
      const auto& keys = default_knowledge_table().keys();
      return std::string(1, keys[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(keys.size()) - 1))]);
    }
  }
  return {};
}

PromptInstance assemble_prompt(const TaskSpec& spec, const std::vector<std::pair<std::string, char>>& demos,
                               const std::string& final_query) {
  std::string text;
  for (const auto& [q, a] : demos) {
    text += q;
    text += "->";
    text.push_back(a);
    text += ", ";
  }
  text += final_query;
  text += "->";
  auto tok = tokenize(text);
  PromptInstance inst;
  inst.text = std::move(text);
  inst.tokens = std::move(tok.tokens);
  inst.roles = std::move(tok.roles);
  inst.spec = spec;
  inst.spec.n_demos = static_cast<int>(demos.size());
  inst.gold_answer = Vocabulary::id(rule_oracle(spec, final_query));
  return inst;
}

PromptInstance generate_instance(const TaskSpec& spec, std::uint64_t rng_seed) {
  spec.validate();
  Rng rng(rng_seed);
  std::vector<std::pair<std::string, char>> demos;
  demos.reserve(static_cast<std::size_t>(spec.n_demos));
  for (int j = 0; j < spec.n_demos; ++j) {
    auto q = sample_query(spec.family, rng);
    const char a = rule_oracle(spec, q);
    demos.emplace_back(std::move(q), a);
  }
  return assemble_prompt(spec, demos, sample_query(spec.family, rng));
}

std::vector<PromptInstance> generate_dataset(const TaskSpec& spec, int n) {
  std::vector<PromptInstance> out;
  out.reserve(static_cast<std::size_t>(std::max(n, 0)));
  for (int i = 0; i < n; ++i) out.push_back(generate_instance(spec, derive_seed(spec.seed, static_cast<std::uint64_t>(i))));
  return out;
}

DummyVariant make_dummy(const PromptInstance& donor, DummyMode mode, std::uint64_t rng_seed) {
  const std::string final_query = donor.final_query();
  if (mode == DummyMode::zero_shot) {
    return {assemble_prompt(donor.spec, {}, final_query), mode};
  }
  Rng rng(rng_seed);
  const auto alphabet = answer_alphabet(donor.spec.family);
  std::vector<std::pair<std::string, char>> demos;
  for (int j = 0; j < donor.n_demos(); ++j) {
    const std::string original = donor.demo_query(j);
    std::string q;
    do {
      q = sample_query(donor.spec.family, rng);
    } while (q == original);
    const char a = alphabet[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(alphabet.size()) - 1))];
    demos.emplace_back(std::move(q), a);
  }
  return {assemble_prompt(donor.spec, demos, final_query), mode};
}

std::string role_map_json(const RoleMap& roles) {
  std::ostringstream os;
  os << "{\"demos\":[";
  for (std::size_t j = 0; j < roles.demos.size(); ++j) {
    const auto& d = roles.demos[j];
    if (j) os << ',';
    os << '[' << d.query.start << ',' << d.query.end << ',' << d.is_pos << ',' << d.answer_pos << ',' << d.sep_pos
       << ']';
  }
  os << "],\"final\":";
  if (roles.final_query) {
    const auto& f = *roles.final_query;
    os << '[' << f.query.start << ',' << f.query.end << ',' << f.is_pos << ']';
  } else {
    os << "null";
  }
  os << '}';
  return os.str();
}

std::string serialize_instance(const PromptInstance& instance) {
  return instance.text + '\t' + Vocabulary::character(instance.gold_answer) + '\t' + role_map_json(instance.roles);
}

PromptInstance parse_instance_line(std::string_view line) {
  const auto t1 = line.find('\t');
  const auto t2 = t1 == std::string_view::npos ? t1 : line.find('\t', t1 + 1);
  if (t2 == std::string_view::npos) throw TokenizationError("instance line needs three tab-separated fields");
  const std::string_view text = line.substr(0, t1);
  const std::string_view gold = line.substr(t1 + 1, t2 - t1 - 1);
  const std::string_view roles_text = line.substr(t2 + 1);
  if (gold.size() != 1) throw TokenizationError("gold answer must be a single character");

  auto tok = tokenize(text);
  PromptInstance inst;
  inst.text = std::string(text);
  inst.tokens = std::move(tok.tokens);
  inst.roles = std::move(tok.roles);
  inst.gold_answer = Vocabulary::id(gold[0]);
  inst.spec.n_demos = inst.roles.n_demos();

  nlohmann::json j;
  try {
    j = nlohmann::json::parse(roles_text);
  } catch (const nlohmann::json::exception& e) {
    throw TokenizationError(std::string("role map is not valid JSON: ") + e.what());
  }
  if (j.dump(-1) != nlohmann::json::parse(role_map_json(inst.roles)).dump(-1)) {
    throw TokenizationError("role map does not match the prompt text");
  }
  return inst;
}

}  // namespace iclprobe
