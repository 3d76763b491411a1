#include <gtest/gtest.h>

#include <regex>
#include <set>
#include <string>

#include "caf/artifacts.hpp"
#include "caf/templating.hpp"
#include "test_support.hpp"

using namespace caf;
using caf_test::clause;
using caf_test::indemnity_options;
using caf_test::option_set;
using caf_test::simple_template;

namespace {

const ArtifactStore& store() {
  static const ArtifactStore s = ArtifactStore::load(caf_test::data_dir());
  return s;
}

void expect_alternation(const RenderedConversation& conv, std::size_t examples) {
  ASSERT_EQ(conv.messages.size(), 2 * examples + 1);
  for (std::size_t i = 0; i < conv.messages.size(); ++i) {
    EXPECT_EQ(conv.messages[i].role, i % 2 == 0 ? Role::user : Role::assistant) << "message " << i;
  }
}

}  // namespace

TEST(RenderOptions, DotStyle) {
  auto set = option_set("X", {"There is mutual indemnification.", "No indemnification."});
  EXPECT_EQ(render_options(set, NumberingStyle::dot), "1. There is mutual indemnification.\n2. No indemnification.");
}

TEST(RenderOptions, SingleOptionHasNoTrailingNewline) {
  auto set = option_set("X", {"Only."});
  EXPECT_EQ(render_options(set, NumberingStyle::bare), "1 Only.");
}

TEST(RenderOptions, ParenStyleLinesMatchPattern) {
  auto set = option_set("X", {"a", "b", "c", "d", "e"});
  const auto out = render_options(set, NumberingStyle::paren);
  std::istringstream in(out);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    EXPECT_TRUE(std::regex_match(line, std::regex("\\(" + std::to_string(n) + "\\) .+"))) << line;
  }
  EXPECT_EQ(n, 5);
}

TEST(RenderOptions, OrderedByOrdinalNotStorage) {
  auto set = option_set("X", {"a", "b"});
  std::swap(set.options[0].ordinal, set.options[1].ordinal);
  EXPECT_EQ(render_options(set, NumberingStyle::dot), "1. b\n2. a");
}

TEST(OptionSetValidation, Rules) {
  EXPECT_NO_THROW(validate(indemnity_options()));
  EXPECT_THROW(validate(option_set("X", {"only"})), Error);
  auto dup = option_set("X", {"a", "b"});
  dup.options[1].canonical_id = dup.options[0].canonical_id;
  EXPECT_THROW(validate(dup), Error);
  auto gap = option_set("X", {"a", "b"});
  gap.options[1].ordinal = 3;
  EXPECT_THROW(validate(gap), Error);
  auto empty_text = option_set("X", {"a", ""});
  EXPECT_THROW(validate(empty_text), Error);
}

TEST(Render, P1BeginsWithInstruction) {
  const auto& p1 = store().template_("P1").value;
  const auto& s1 = store().option_set("S1").value;
  const auto& ds = store().dataset("indemnity").value;
  const auto conv = render(p1, s1, ds.clauses.front());
  ASSERT_EQ(conv.messages.size(), 1u);
  EXPECT_EQ(conv.messages[0].role, Role::user);
  EXPECT_EQ(conv.messages[0].content.rfind("Referring only to the information contained in the clause below", 0), 0u);
  EXPECT_NE(conv.messages[0].content.find("1. Landlord indemnifies Tenant."), std::string::npos);
  EXPECT_EQ(conv.metadata.template_id, "P1");
  EXPECT_EQ(conv.metadata.option_set_id, "S1");
  EXPECT_EQ(conv.metadata.clause_id, ds.clauses.front().id);
}

TEST(Render, IsPure) {
  const auto t = simple_template();
  const auto s = indemnity_options();
  const auto c = clause("c1", "Tenant shall indemnify Landlord.");
  EXPECT_EQ(render(t, s, c), render(t, s, c));
}

TEST(Render, BundledTemplatesLeaveNoPlaceholders) {
  const auto& ds = store().dataset("indemnity").value;
  for (const auto& [id, t] : store().templates()) {
    const auto& q = store().question(t.value.selection_mode == SelectionMode::single ? "indemnity" : "info_sharing");
    const auto& opts = store().option_set(q.value.option_set_id).value;
    const auto conv = render(t.value, opts, ds.clauses[3], &q.value);
    EXPECT_EQ(conv.messages.back().content.find("{{"), std::string::npos) << id;
  }
}

TEST(Render, InsertedTextIsNotRescanned) {
  const auto t = simple_template();
  const auto conv = render(t, indemnity_options(), clause("c1", "literal {{Options}} in a clause"));
  EXPECT_NE(conv.messages[0].content.find("literal {{Options}} in a clause"), std::string::npos);
}

TEST(Render, QuestionSlot) {
  auto t = simple_template();
  t.body = "{{Question}}\n{{Options}}\n{{Clause}}";
  Question q{"indemnity", "Who indemnifies whom?", QuestionMode::single_select, "S1"};
  const auto conv = render(t, indemnity_options(), clause("c1", "x"), &q);
  EXPECT_EQ(conv.messages[0].content.rfind("Who indemnifies whom?\n1. ", 0), 0u);
  try {
    render(t, indemnity_options(), clause("c1", "x"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::placeholder);
  }
}

TEST(Render, NoQuestionSlotAndNoQuestionSucceeds) {
  EXPECT_NO_THROW(render(simple_template(), indemnity_options(), clause("c1", "x")));
}

TEST(Render, PlaceholderTyposAreRejected) {
  const std::vector<std::string> typos = {"Optons", "options", "Clauses", "clause", "Question ", " Clause",
                                          "OPTIONS", "Opt", "", "Foo", "Clause}", "{Clause"};
  for (const auto& name : typos) {
    auto t = simple_template();
    t.body = "{{Options}}\n{{Clause}}\n{{" + name + "}}";
    try {
      render(t, indemnity_options(), clause("c1", "x"));
      ADD_FAILURE() << "accepted {{" << name << "}}";
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::placeholder) << name;
    }
  }
  auto t = simple_template();
  t.body = "{{Options}}\n{{Clause";
  EXPECT_THROW(render(t, indemnity_options(), clause("c1", "x")), Error);
  t.body = "{{Options}}\n{{Options}}\n{{Clause}}";
  EXPECT_THROW(render(t, indemnity_options(), clause("c1", "x")), Error);
}

TEST(TemplateFile, ParseSerializeRoundTrip) {
  for (const auto& [id, t] : store().templates()) {
    EXPECT_EQ(parse_template(serialize_template(t.value)), t.value) << id;
  }
}

TEST(TemplateFile, BundledTemplatesDeclareBothEscapes) {
  for (const auto& [id, t] : store().templates()) {
    std::set<std::string> e(t.value.escape_phrases.begin(), t.value.escape_phrases.end());
    EXPECT_EQ(e, (std::set<std::string>{"The clause is silent", "Unable to determine"})) << id;
  }
}

TEST(TemplateFile, Errors) {
  EXPECT_THROW(parse_template("no fence\n{{Options}}{{Clause}}"), Error);
  EXPECT_THROW(parse_template("---\nid: X\n---\n{{Options}}{{Clause}}"), Error);  // no escape_phrases
  EXPECT_THROW(parse_template("---\nid: X\nescape_phrases: [\"a\"]\nbogus: 1\n---\n{{Options}}{{Clause}}"), Error);
  EXPECT_THROW(parse_template("---\nid: X\nescape_phrases: [\"a\"]\n---\n{{Clause}}"), Error);
  EXPECT_NO_THROW(parse_template("---\nid: X\nescape_phrases: [\"a\"]\n---\n{{Options}}{{Clause}}\n"));
}

TEST(Shuffle, PreservesMultisetOverManySeeds) {
  const auto s = indemnity_options();
  std::multiset<std::string> original;
  for (const auto& o : s.options) original.insert(o.canonical_id + "|" + o.text);
  std::set<std::vector<std::string>> orders;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto sh = shuffle_options(s, seed);
    EXPECT_NO_THROW(validate(sh));
    std::multiset<std::string> got;
    std::vector<std::string> order;
    for (const auto& o : sh.options) {
      got.insert(o.canonical_id + "|" + o.text);
      order.push_back(o.canonical_id);
    }
    EXPECT_EQ(got, original);
    orders.insert(order);
  }
  EXPECT_GT(orders.size(), 10u);
}

TEST(Shuffle, Deterministic) {
  const auto s = indemnity_options();
  for (std::uint64_t seed : {0ull, 1ull, 42ull, 0xdeadbeefull}) {
    EXPECT_EQ(shuffle_options(s, seed), shuffle_options(s, seed));
  }
}

TEST(Shuffle, TwoOptionsGiveBothOrders) {
  const auto s = option_set("X", {"a", "b"});
  std::set<std::string> firsts;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto sh = shuffle_options(s, seed);
    ASSERT_EQ(sh.options.size(), 2u);
    firsts.insert(sh.by_ordinal(1)->canonical_id);
  }
  EXPECT_EQ(firsts, (std::set<std::string>{"o1", "o2"}));
}

TEST(Examples, OneSetGivesNineMessages) {
  const auto& p1 = store().template_("P1").value;
  const auto& s1 = store().option_set("S1").value;
  const auto& ds = store().dataset("indemnity").value;
  const auto base = render(p1, s1, ds.clauses[0]);
  const auto seeded = seed_with_examples(base, {store().example_set("E1").value}, p1, s1, ds);
  expect_alternation(seeded, 4);
  EXPECT_EQ(seeded.messages.back(), base.messages.back());
  EXPECT_EQ(seeded.metadata.example_set_ids, std::vector<std::string>{"E1"});
  // assistant turns carry exact option text in declared order
  const auto& e1 = store().example_set("E1").value;
  for (std::size_t i = 0; i < e1.examples.size(); ++i) {
    EXPECT_EQ(seeded.messages[2 * i + 1].content, s1.by_id(*e1.examples[i].answer_option_ids.begin())->text);
    EXPECT_EQ(seeded.messages[2 * i].content, render(p1, s1, *ds.find_clause(e1.examples[i].clause_id)).messages[0].content);
  }
}

TEST(Examples, TwoSetsGiveSeventeenMessages) {
  const auto& p1 = store().template_("P1").value;
  const auto& s1 = store().option_set("S1").value;
  const auto& ds = store().dataset("indemnity").value;
  const auto base = render(p1, s1, ds.clauses[7]);
  const auto seeded =
      seed_with_examples(base, {store().example_set("E1").value, store().example_set("E2").value}, p1, s1, ds);
  expect_alternation(seeded, 8);
  EXPECT_EQ(seeded.messages.back(), base.messages.back());
  EXPECT_EQ(seeded.metadata.example_set_ids, (std::vector<std::string>{"E1", "E2"}));
}

TEST(Examples, EmptyListIsIdentity) {
  const auto& p1 = store().template_("P1").value;
  const auto& s1 = store().option_set("S1").value;
  const auto& ds = store().dataset("indemnity").value;
  const auto base = render(p1, s1, ds.clauses[0]);
  EXPECT_EQ(seed_with_examples(base, {}, p1, s1, ds), base);
}

TEST(Examples, OrdinalStyle) {
  const auto t = simple_template();
  const auto s = indemnity_options();
  const auto ds = caf_test::parse(R"({"kind":"manifest","question_id":"indemnity"})" "\n"
                                  R"({"kind":"clause","id":"e","clause_type":"t","text":"ex"})" "\n");
  ExampleSet set{"E", {{"e", {"mutual"}}}};
  const auto seeded = seed_with_examples(render(t, s, clause("c", "x")), {set}, t, s, ds, nullptr,
                                         ExampleAnswerStyle::ordinal);
  EXPECT_EQ(seeded.messages[1].content, "3.");
}

TEST(Examples, DanglingClauseIsAnError) {
  const auto t = simple_template();
  const auto s = indemnity_options();
  const auto ds = caf_test::parse("");
  ExampleSet set{"E", {{"missing", {"mutual"}}}};
  EXPECT_THROW(seed_with_examples(render(t, s, clause("c", "x")), {set}, t, s, ds), Error);
  EXPECT_THROW(validate(set, ds, s, QuestionMode::single_select), Error);
}

TEST(Examples, ValidateRejectsMultiAnswerInSingleMode) {
  const auto s = indemnity_options();
  const auto ds = caf_test::parse(R"({"kind":"manifest","question_id":"indemnity"})" "\n"
                                  R"({"kind":"clause","id":"e","clause_type":"t","text":"ex"})" "\n");
  ExampleSet two{"E", {{"e", {"mutual", "none"}}}};
  EXPECT_THROW(validate(two, ds, s, QuestionMode::single_select), Error);
  EXPECT_NO_THROW(validate(two, ds, s, QuestionMode::multi_select));
  ExampleSet unknown{"E", {{"e", {"bogus"}}}};
  EXPECT_THROW(validate(unknown, ds, s, QuestionMode::multi_select), Error);
}

TEST(Examples, BundledSetsAreValid) {
  const auto& ds = store().dataset("indemnity").value;
  const auto& s1 = store().option_set("S1").value;
  for (const auto& [id, e] : store().example_sets()) {
    EXPECT_NO_THROW(validate(e.value, ds, s1, QuestionMode::single_select)) << id;
    std::set<std::string> covered;
    for (const auto& ex : e.value.examples) covered.insert(ex.answer_option_ids.begin(), ex.answer_option_ids.end());
    EXPECT_EQ(covered.size(), s1.options.size()) << id;
  }
}

TEST(Conversation, JsonRoundTrip) {
  const auto& p1 = store().template_("P1").value;
  const auto& s1 = store().option_set("S1").value;
  const auto& ds = store().dataset("indemnity").value;
  const auto seeded = seed_with_examples(render(p1, s1, ds.clauses[0]), {store().example_set("E2").value}, p1, s1, ds);
  EXPECT_EQ(conversation_from_json(to_json(seeded)), seeded);
}
