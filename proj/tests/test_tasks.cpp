#include <doctest.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <set>

#include "iclprobe/errors.hpp"
#include "iclprobe/rng.hpp"
#include "iclprobe/tasks.hpp"
#include "iclprobe/tokenizer.hpp"

using namespace iclprobe;

namespace {

// Independent label oracle written from the rule table, not from the library.
char expected_label(TaskFamily f, const std::string& q, int tau, bool polarity) {
  bool one = false;
  switch (f) {
    case TaskFamily::string_length_simple:
    case TaskFamily::string_length_complex:
      one = static_cast<int>(q.size()) > tau;
      break;
    case TaskFamily::digit:
      one = (q[0] - '0') >= tau;
      break;
    case TaskFamily::grid2d: {
      const int x = q[1] - '0', y = q[3] - '0';
      one = (y - x) >= tau;
      break;
    }
    default:
      FAIL("not a categorization family");
  }
  if (polarity) one = !one;
  return one ? '1' : '0';
}

}  // namespace

TEST_CASE("tokenizer: hand-counted positions") {
  const auto t = tokenize("aab->0");
  CHECK(t.tokens.size() == 6);
  REQUIRE(t.roles.demos.size() == 1);
  CHECK(t.roles.demos[0].is_pos == 4);
  CHECK(t.roles.demos[0].answer_pos == 5);
  CHECK(t.roles.demos[0].sep_pos == -1);
  CHECK(t.roles.demos[0].query == Span{0, 3});
  CHECK_FALSE(t.roles.final_query.has_value());
}

TEST_CASE("tokenizer: full prompt role map") {
  const std::string text = "wkc->0, fezffgghijk->1, niaps->";
  const auto t = tokenize(text);
  CHECK(t.tokens.size() == text.size());
  REQUIRE(t.roles.n_demos() == 2);
  const auto& d0 = t.roles.demos[0];
  CHECK(d0.query == Span{0, 3});
  CHECK(d0.is_pos == 4);
  CHECK(d0.answer_pos == 5);
  CHECK(d0.sep_pos == 6);
  const auto& d1 = t.roles.demos[1];
  CHECK(d1.query.start == 8);
  CHECK(d1.query.length() == 11);
  REQUIRE(t.roles.final_query.has_value());
  CHECK(detokenize(t.tokens, t.roles.final_query->query) == "niaps");
  CHECK(t.roles.final_query->is_pos == static_cast<int>(text.size()) - 1);
}

TEST_CASE("tokenizer: empty prompt and bad characters") {
  const auto t = tokenize("");
  CHECK(t.tokens.empty());
  CHECK(t.roles.demos.empty());
  CHECK_FALSE(t.roles.final_query.has_value());
  CHECK_THROWS_AS(tokenize("ab~->1"), TokenizationError);
  try {
    tokenize("ab~->1");
  } catch (const TokenizationError& e) {
    CHECK(std::string(e.what()).find('~') != std::string::npos);
  }
  CHECK_THROWS_AS(tokenize("ab->1 cd->"), TokenizationError);
}

TEST_CASE("tokenizer: equal-length queries occupy equal token counts") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const auto a = sample_query(TaskFamily::string_length_complex, rng);
    std::string b;
    for (std::size_t i = 0; i < a.size(); ++i) b += static_cast<char>('a' + rng.uniform_int(0, 25));
    CHECK(tokenize(a + "->").tokens.size() == tokenize(b + "->").tokens.size());
  }
  CHECK(detokenize(tokenize("Ab9->1, (3,-2)->0, xyz->").tokens) == "Ab9->1, (3,-2)->0, xyz->");
}

TEST_CASE("rule oracle: table examples and boundaries") {
  const auto s = TaskSpec::canonical(TaskFamily::string_length_simple, 2);
  CHECK(rule_oracle(s, "abaabb") == '1');
  CHECK(rule_oracle(s, "aab") == '0');
  CHECK(rule_oracle(s, "ababa") == '0');
  CHECK(rule_oracle(s, "ababab") == '1');
  const auto d = TaskSpec::canonical(TaskFamily::digit, 2);
  CHECK(rule_oracle(d, "4") == '0');
  CHECK(rule_oracle(d, "7") == '1');
  CHECK(rule_oracle(d, "5") == '1');
  const auto g = TaskSpec::canonical(TaskFamily::grid2d, 2);
  CHECK(rule_oracle(g, "(0,1)") == '1');
  CHECK(rule_oracle(g, "(3,3)") == '1');
  CHECK(rule_oracle(g, "(4,3)") == '0');
  auto flipped = s;
  flipped.polarity = true;
  CHECK(rule_oracle(flipped, "abaabb") == '0');
  CHECK_THROWS_AS(rule_oracle(s, "abc"), ParameterDomainError);
  CHECK_THROWS_AS(rule_oracle(s, "aaaaaaaaaaa"), ParameterDomainError);
  CHECK_THROWS_AS(rule_oracle(d, "12"), ParameterDomainError);
  CHECK_THROWS_AS(rule_oracle(g, "(1,x)"), ParameterDomainError);
}

TEST_CASE("task spec validation") {
  auto s = TaskSpec::canonical(TaskFamily::digit, 3);
  s.n_demos = 17;
  CHECK_THROWS_AS(s.validate(), ParameterDomainError);
  s.n_demos = -1;
  CHECK_THROWS_AS(s.validate(), ParameterDomainError);
  CHECK_THROWS_AS(parse_family("strings"), ParameterDomainError);
  for (auto f : all_families()) CHECK(parse_family(to_string(f)) == f);
}

TEST_CASE("generated instances: role soundness and labels across families") {
  for (auto f : all_families()) {
    for (int J : {0, 1, 5, 16}) {
      const auto spec = TaskSpec::canonical(f, J, 77);
      const auto data = generate_dataset(spec, 60);
      for (const auto& inst : data) {
        CHECK(inst.n_demos() == J);
        CHECK(inst.tokens == tokenize(inst.text).tokens);
        int last = -1;
        for (int j = 0; j < J; ++j) {
          const auto& d = inst.roles.demos[static_cast<std::size_t>(j)];
          CHECK(d.query.start > last);
          CHECK(d.is_pos > d.query.end - 1);
          CHECK(Vocabulary::character(inst.tokens[static_cast<std::size_t>(d.is_pos)]) == '>');
          CHECK(d.answer_pos == d.is_pos + 1);
          CHECK(d.sep_pos == d.answer_pos + 1);
          CHECK(Vocabulary::character(inst.tokens[static_cast<std::size_t>(d.sep_pos)]) == ',');
          last = d.sep_pos;
          const auto q = inst.demo_query(j);
          if (is_categorization(f)) {
            CHECK(inst.demo_answer(j) == expected_label(f, q, canonical_threshold(f), false));
          } else {
            CHECK(inst.demo_answer(j) == default_knowledge_table().lookup(q[0]));
          }
        }
        CHECK(inst.final_is_pos() > last);
        CHECK(inst.final_is_pos() == static_cast<int>(inst.tokens.size()) - 1);
        const auto fq = inst.final_query();
        const char gold = Vocabulary::character(inst.gold_answer);
        if (is_categorization(f)) {
          CHECK(gold == expected_label(f, fq, canonical_threshold(f), false));
        } else {
          CHECK(gold == default_knowledge_table().lookup(fq[0]));
        }
      }
    }
  }
}

TEST_CASE("generated instances follow jittered rules") {
  for (auto f : {TaskFamily::string_length_simple, TaskFamily::digit, TaskFamily::grid2d}) {
    for (int tau : {-2, 0, 3, 7}) {
      for (bool pol : {false, true}) {
        TaskSpec spec{f, tau, pol, 6, 11};
        if (f != TaskFamily::grid2d && tau < 0) continue;
        for (const auto& inst : generate_dataset(spec, 20)) {
          for (int j = 0; j < 6; ++j) CHECK(inst.demo_answer(j) == expected_label(f, inst.demo_query(j), tau, pol));
        }
      }
    }
  }
}

TEST_CASE("generation is deterministic and seed-sensitive") {
  const auto spec = TaskSpec::canonical(TaskFamily::string_length_complex, 8, 5);
  const auto a = generate_instance(spec, 42);
  const auto b = generate_instance(spec, 42);
  const auto c = generate_instance(spec, 43);
  CHECK(a.text == b.text);
  CHECK(a.tokens == b.tokens);
  CHECK(a.roles == b.roles);
  CHECK(a.text != c.text);
  const auto d1 = generate_dataset(spec, 5);
  CHECK(d1[3].text == generate_instance(spec, derive_seed(5, 3)).text);
}

TEST_CASE("string-length label balance near one half") {
  const auto data = generate_dataset(TaskSpec::canonical(TaskFamily::string_length_simple, 16, 9), 5000);
  long long ones = 0, total = 0;
  std::map<int, int> length_counts;
  for (const auto& inst : data) {
    for (int j = 0; j < inst.n_demos(); ++j) {
      ones += inst.demo_answer(j) == '1';
      ++total;
      length_counts[static_cast<int>(inst.demo_query(j).size())]++;
    }
  }
  CHECK(std::abs(static_cast<double>(ones) / total - 0.5) <= 0.05);
  CHECK(length_counts.size() == 10);
  CHECK(length_counts.begin()->first == 1);
  CHECK(length_counts.rbegin()->first == 10);
}

TEST_CASE("dummy variants") {
  const auto donor = generate_instance(TaskSpec::canonical(TaskFamily::knowledge_surrogate, 4, 1), 8);
  const auto zs = make_dummy(donor, DummyMode::zero_shot, 3);
  CHECK(zs.prompt.n_demos() == 0);
  CHECK(zs.prompt.text == donor.final_query() + "->");
  CHECK(zs.prompt.gold_answer == donor.gold_answer);

  const auto empty = generate_instance(TaskSpec::canonical(TaskFamily::digit, 0, 1), 8);
  const auto same = make_dummy(empty, DummyMode::random_answers, 5);
  CHECK(same.prompt.text == empty.text);

  // Random answers: queries differ from the donor's, answers uniform, final query kept.
  long long ones = 0, total = 0;
  for (int i = 0; i < 5000; ++i) {
    const auto d = generate_instance(TaskSpec::canonical(TaskFamily::string_length_simple, 8, 2),
                                     static_cast<std::uint64_t>(i));
    const auto r = make_dummy(d, DummyMode::random_answers, derive_seed(99, static_cast<std::uint64_t>(i)));
    REQUIRE(r.prompt.n_demos() == 8);
    CHECK(r.prompt.final_query() == d.final_query());
    CHECK(r.prompt.gold_answer == d.gold_answer);
    for (int j = 0; j < 8; ++j) {
      CHECK(r.prompt.demo_query(j) != d.demo_query(j));
      ones += r.prompt.demo_answer(j) == '1';
      ++total;
    }
  }
  // Chi-square with one degree of freedom; 10.83 is the 0.001 critical value.
  const double expected = total / 2.0;
  const double chi2 = std::pow(ones - expected, 2) / expected + std::pow((total - ones) - expected, 2) / expected;
  CHECK(chi2 < 10.83);
  const auto r1 = make_dummy(donor, DummyMode::random_answers, 17);
  const auto r2 = make_dummy(donor, DummyMode::random_answers, 17);
  CHECK(r1.prompt.text == r2.prompt.text);
}

TEST_CASE("knowledge table") {
  CHECK_THROWS_AS(build_knowledge_table(1, 3), CapacityError);
  CHECK_THROWS_AS(build_knowledge_table(53, 3), CapacityError);
  const auto a = build_knowledge_table(50, 12);
  const auto b = build_knowledge_table(50, 12);
  CHECK(a.pairs() == b.pairs());
  CHECK(a.size() == 50);
  std::set<char> values;
  for (const auto& [k, v] : a.pairs()) {
    CHECK(values.insert(v).second);
    CHECK(std::isalpha(static_cast<unsigned char>(k)));
    CHECK(std::isalpha(static_cast<unsigned char>(v)));
  }
  CHECK(build_knowledge_table(50, 13).pairs() != a.pairs());
  CHECK(default_knowledge_table().size() == kDefaultKnowledgePairs);
}

TEST_CASE("instance line format round-trips") {
  for (auto f : all_families()) {
    const auto inst = generate_instance(TaskSpec::canonical(f, 5, 3), 21);
    const auto line = serialize_instance(inst);
    CHECK(std::count(line.begin(), line.end(), '\t') == 2);
    const auto back = parse_instance_line(line);
    CHECK(back.text == inst.text);
    CHECK(back.tokens == inst.tokens);
    CHECK(back.roles == inst.roles);
    CHECK(back.gold_answer == inst.gold_answer);
  }
  const auto inst = generate_instance(TaskSpec::canonical(TaskFamily::digit, 2, 3), 21);
  auto line = serialize_instance(inst);
  line.replace(line.rfind("[["), 3, "[[1");  // corrupt the first query start
  CHECK_THROWS(parse_instance_line(line));
}
