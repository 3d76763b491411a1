#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "caf/corpus.hpp"
#include "caf/error.hpp"
#include "caf/util.hpp"

namespace caf {

// ---------------------------------------------------------------------------
// Option sets

struct AnswerOption {
  int ordinal = 0;  // 1-based display position
  std::string canonical_id;
  std::string text;
  std::vector<std::string> aliases;

  bool operator==(const AnswerOption&) const = default;
};

struct OptionSet {
  std::string id;
  std::string question_id;
  std::vector<AnswerOption> options;  // kept sorted by ordinal
  std::optional<std::string> synonym_table_id;

  bool operator==(const OptionSet&) const = default;

  const AnswerOption* by_id(std::string_view canonical_id) const {
    for (const auto& o : options) {
      if (o.canonical_id == canonical_id) return &o;
    }
    return nullptr;
  }

  const AnswerOption* by_ordinal(int ordinal) const {
    for (const auto& o : options) {
      if (o.ordinal == ordinal) return &o;
    }
    return nullptr;
  }

  bool contains(std::string_view canonical_id) const { return by_id(canonical_id) != nullptr; }
};

inline void validate(const OptionSet& set) {
  if (set.options.size() < 2) {
    throw Error(ErrorKind::validation, "option set " + set.id + " needs at least 2 options");
  }
  std::unordered_set<std::string> ids;
  std::vector<int> ordinals;
  for (const auto& o : set.options) {
    if (o.canonical_id.empty()) throw Error(ErrorKind::validation, "option set " + set.id + ": empty canonical_id");
    if (!ids.insert(o.canonical_id).second) {
      throw Error(ErrorKind::validation, "option set " + set.id + ": duplicate canonical_id " + o.canonical_id);
    }
    if (o.text.empty()) throw Error(ErrorKind::validation, "option set " + set.id + ": option " + o.canonical_id + " has empty text");
    ordinals.push_back(o.ordinal);
  }
  std::sort(ordinals.begin(), ordinals.end());
  for (std::size_t i = 0; i < ordinals.size(); ++i) {
    if (ordinals[i] != static_cast<int>(i) + 1) {
      throw Error(ErrorKind::validation, "option set " + set.id + ": ordinals must be contiguous from 1");
    }
  }
}

inline OptionSet option_set_from_json(const nlohmann::json& j) {
  OptionSet set;
  set.id = j.at("id").get<std::string>();
  set.question_id = j.at("question_id").get<std::string>();
  if (auto it = j.find("synonym_table_id"); it != j.end() && !it->is_null()) {
    set.synonym_table_id = it->get<std::string>();
  }
  int ordinal = 0;
  for (const auto& o : j.at("options")) {
    AnswerOption opt;
    opt.ordinal = o.contains("ordinal") ? o.at("ordinal").get<int>() : ordinal + 1;
    ++ordinal;
    opt.canonical_id = o.at("canonical_id").get<std::string>();
    opt.text = o.at("text").get<std::string>();
    if (auto it = o.find("aliases"); it != o.end()) opt.aliases = it->get<std::vector<std::string>>();
    set.options.push_back(std::move(opt));
  }
  std::stable_sort(set.options.begin(), set.options.end(),
                   [](const AnswerOption& a, const AnswerOption& b) { return a.ordinal < b.ordinal; });
  validate(set);
  return set;
}

inline nlohmann::json to_json(const OptionSet& set) {
  nlohmann::json options = nlohmann::json::array();
  for (const auto& o : set.options) {
    options.push_back({{"ordinal", o.ordinal}, {"canonical_id", o.canonical_id}, {"text", o.text}, {"aliases", o.aliases}});
  }
  return {{"id", set.id},
          {"question_id", set.question_id},
          {"synonym_table_id", set.synonym_table_id ? nlohmann::json(*set.synonym_table_id) : nlohmann::json(nullptr)},
          {"options", std::move(options)}};
}

inline OptionSet load_option_set(const std::filesystem::path& path) {
  try {
    return option_set_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::parse, path.string() + ": " + e.what());
  }
}

enum class NumberingStyle { paren, dot, bare };

inline const char* to_string(NumberingStyle s) {
  switch (s) {
    case NumberingStyle::paren: return "paren";
    case NumberingStyle::dot: return "dot";
    case NumberingStyle::bare: return "bare";
  }
  return "dot";
}

inline NumberingStyle numbering_style_from_string(std::string_view s) {
  if (s == "paren") return NumberingStyle::paren;
  if (s == "dot") return NumberingStyle::dot;
  if (s == "bare") return NumberingStyle::bare;
  throw Error(ErrorKind::parse, "unknown numbering_style: " + std::string(s));
}

inline std::string format_ordinal(int ordinal, NumberingStyle style) {
  switch (style) {
    case NumberingStyle::paren: return "(" + std::to_string(ordinal) + ")";
    case NumberingStyle::dot: return std::to_string(ordinal) + ".";
    case NumberingStyle::bare: return std::to_string(ordinal);
  }
  return std::to_string(ordinal);
}

/// One line per option in ordinal order, no trailing newline.
inline std::string render_options(const OptionSet& set, NumberingStyle style) {
  std::vector<const AnswerOption*> ordered;
  for (const auto& o : set.options) ordered.push_back(&o);
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const AnswerOption* a, const AnswerOption* b) { return a->ordinal < b->ordinal; });
  std::string out;
  for (const auto* o : ordered) {
    if (!out.empty()) out += '\n';
    out += format_ordinal(o->ordinal, style);
    out += ' ';
    out += o->text;
  }
  return out;
}

/// Reassigns ordinals by a permutation derived from `seed`. The permutation
/// is identical on every platform for a given seed.
inline OptionSet shuffle_options(const OptionSet& set, std::uint64_t seed) {
  OptionSet out = set;
  std::mt19937_64 rng(seed);
  auto bounded = [&rng](std::uint64_t n) {
    // rejection sampling keeps the draw uniform in [0, n)
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = rng();
    } while (x >= limit);
    return x % n;
  };
  auto& opts = out.options;
  for (std::size_t i = opts.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(bounded(i));
    std::swap(opts[i - 1], opts[j]);
  }
  for (std::size_t i = 0; i < opts.size(); ++i) opts[i].ordinal = static_cast<int>(i) + 1;
  return out;
}

// ---------------------------------------------------------------------------
// Prompt templates

enum class SelectionMode { single, multi };

inline const char* to_string(SelectionMode m) { return m == SelectionMode::single ? "single" : "multi"; }

inline SelectionMode selection_mode_from_string(std::string_view s) {
  if (s == "single") return SelectionMode::single;
  if (s == "multi") return SelectionMode::multi;
  throw Error(ErrorKind::parse, "unknown selection_mode: " + std::string(s));
}

struct PromptTemplate {
  std::string id;
  std::string body;
  SelectionMode selection_mode = SelectionMode::single;
  std::vector<std::string> escape_phrases;
  NumberingStyle numbering_style = NumberingStyle::dot;

  bool operator==(const PromptTemplate&) const = default;
};

inline constexpr std::string_view kOptionsSlot = "Options";
inline constexpr std::string_view kClauseSlot = "Clause";
inline constexpr std::string_view kQuestionSlot = "Question";

namespace detail {

struct TemplatePiece {
  bool is_slot = false;
  std::string text;  // literal text or slot name
};

// Splits a body into literal text and {{Slot}} pieces. Any braced token not
// in the whitelist is an unresolved-placeholder error.
inline std::vector<TemplatePiece> tokenize_template(std::string_view body, std::string_view template_id) {
  std::vector<TemplatePiece> pieces;
  std::size_t pos = 0;
  while (pos < body.size()) {
    const auto open = body.find("{{", pos);
    if (open == std::string_view::npos) {
      pieces.push_back({false, std::string(body.substr(pos))});
      break;
    }
    if (open > pos) pieces.push_back({false, std::string(body.substr(pos, open - pos))});
    const auto close = body.find("}}", open + 2);
    if (close == std::string_view::npos) {
      throw Error(ErrorKind::placeholder,
                  "template " + std::string(template_id) + ": unterminated placeholder at offset " + std::to_string(open));
    }
    const auto name = body.substr(open + 2, close - open - 2);
    if (name != kOptionsSlot && name != kClauseSlot && name != kQuestionSlot) {
      throw Error(ErrorKind::placeholder, "template " + std::string(template_id) +
                                              ": unresolved placeholder {{" + std::string(name) + "}}");
    }
    pieces.push_back({true, std::string(name)});
    pos = close + 2;
  }
  return pieces;
}

inline std::size_t count_slot(const std::vector<TemplatePiece>& pieces, std::string_view slot) {
  return static_cast<std::size_t>(std::count_if(pieces.begin(), pieces.end(), [&](const TemplatePiece& p) {
    return p.is_slot && p.text == slot;
  }));
}

}  // namespace detail

inline bool uses_question(const PromptTemplate& t) {
  return t.body.find("{{Question}}") != std::string::npos;
}

inline void validate(const PromptTemplate& t) {
  const auto pieces = detail::tokenize_template(t.body, t.id);
  if (detail::count_slot(pieces, kOptionsSlot) != 1 || detail::count_slot(pieces, kClauseSlot) != 1) {
    throw Error(ErrorKind::validation,
                "template " + t.id + ": body must contain {{Options}} and {{Clause}} exactly once each");
  }
  if (t.escape_phrases.empty()) throw Error(ErrorKind::validation, "template " + t.id + ": escape_phrases is empty");
}

/// Parses a template file: a front-matter block fenced by "---" lines with
/// key: value pairs, followed by the body. A single trailing newline at the
/// end of the file is not part of the body.
inline PromptTemplate parse_template(std::string_view text) {
  const auto lines = split_lines(text);
  if (lines.empty() || trim(lines[0]) != "---") {
    throw Error(ErrorKind::parse, "template must start with a --- front-matter fence");
  }
  PromptTemplate t;
  bool have_id = false, have_escape = false;
  std::size_t i = 1;
  for (; i < lines.size(); ++i) {
    const auto line = trim(lines[i]);
    if (line == "---") break;
    if (line.empty()) continue;
    const auto colon = line.find(':');
    if (colon == std::string_view::npos) {
      throw Error(ErrorKind::parse, "front-matter line " + std::to_string(i + 1) + " has no ':'");
    }
    const std::string key(trim(line.substr(0, colon)));
    const std::string value(trim(line.substr(colon + 1)));
    if (key == "id") {
      t.id = value;
      have_id = true;
    } else if (key == "selection_mode") {
      t.selection_mode = selection_mode_from_string(value);
    } else if (key == "numbering_style") {
      t.numbering_style = numbering_style_from_string(value);
    } else if (key == "escape_phrases") {
      try {
        t.escape_phrases = nlohmann::json::parse(value).get<std::vector<std::string>>();
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::parse, "escape_phrases must be a JSON array of strings: " + std::string(e.what()));
      }
      have_escape = true;
    } else {
      throw Error(ErrorKind::parse, "unknown front-matter key: " + key);
    }
  }
  if (i >= lines.size()) throw Error(ErrorKind::parse, "front-matter is not closed");
  if (!have_id) throw Error(ErrorKind::parse, "front-matter is missing id");
  if (!have_escape) throw Error(ErrorKind::parse, "front-matter is missing escape_phrases");
  std::string body;
  for (std::size_t k = i + 1; k < lines.size(); ++k) {
    if (k > i + 1) body += '\n';
    body += lines[k];
  }
  // split_lines yields a final empty element for a trailing newline
  if (!body.empty() && body.back() == '\n') body.pop_back();
  t.body = std::move(body);
  validate(t);
  return t;
}

inline std::string serialize_template(const PromptTemplate& t) {
  std::string out = "---\n";
  out += "id: " + t.id + "\n";
  out += std::string("selection_mode: ") + to_string(t.selection_mode) + "\n";
  out += std::string("numbering_style: ") + to_string(t.numbering_style) + "\n";
  out += "escape_phrases: " + nlohmann::json(t.escape_phrases).dump() + "\n";
  out += "---\n";
  out += t.body;
  out += "\n";
  return out;
}

inline PromptTemplate load_template(const std::filesystem::path& path) {
  try {
    return parse_template(read_file(path));
  } catch (const Error& e) {
    throw Error(e.kind(), path.string() + ": " + e.what());
  }
}

inline nlohmann::json to_json(const PromptTemplate& t) {
  return {{"id", t.id},
          {"body", t.body},
          {"selection_mode", to_string(t.selection_mode)},
          {"numbering_style", to_string(t.numbering_style)},
          {"escape_phrases", t.escape_phrases}};
}

inline PromptTemplate template_from_json(const nlohmann::json& j) {
  PromptTemplate t;
  try {
    t.id = j.at("id").get<std::string>();
    t.body = j.at("body").get<std::string>();
    t.selection_mode = selection_mode_from_string(j.value("selection_mode", std::string("single")));
    t.numbering_style = numbering_style_from_string(j.value("numbering_style", std::string("dot")));
    t.escape_phrases = j.value("escape_phrases", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::parse, std::string("template: ") + e.what());
  }
  validate(t);
  return t;
}

// ---------------------------------------------------------------------------
// Conversations

enum class Role { system, user, assistant };

inline const char* to_string(Role r) {
  switch (r) {
    case Role::system: return "system";
    case Role::user: return "user";
    case Role::assistant: return "assistant";
  }
  return "user";
}

inline Role role_from_string(std::string_view s) {
  if (s == "system") return Role::system;
  if (s == "user") return Role::user;
  if (s == "assistant") return Role::assistant;
  throw Error(ErrorKind::parse, "unknown role: " + std::string(s));
}

struct Message {
  Role role = Role::user;
  std::string content;

  bool operator==(const Message&) const = default;
};

struct ConversationMetadata {
  std::string template_id;
  std::string option_set_id;
  std::string clause_id;
  std::vector<std::string> example_set_ids;

  bool operator==(const ConversationMetadata&) const = default;
};

struct RenderedConversation {
  std::vector<Message> messages;
  ConversationMetadata metadata;

  bool operator==(const RenderedConversation&) const = default;
};

inline nlohmann::json to_json(const Message& m) { return {{"role", to_string(m.role)}, {"content", m.content}}; }

inline nlohmann::json to_json(const RenderedConversation& c) {
  nlohmann::json messages = nlohmann::json::array();
  for (const auto& m : c.messages) messages.push_back(to_json(m));
  return {{"messages", std::move(messages)},
          {"metadata",
           {{"template_id", c.metadata.template_id},
            {"option_set_id", c.metadata.option_set_id},
            {"clause_id", c.metadata.clause_id},
            {"example_set_ids", c.metadata.example_set_ids}}}};
}

inline RenderedConversation conversation_from_json(const nlohmann::json& j) {
  RenderedConversation c;
  for (const auto& m : j.at("messages")) {
    c.messages.push_back({role_from_string(m.at("role").get<std::string>()), m.at("content").get<std::string>()});
  }
  const auto& md = j.at("metadata");
  c.metadata.template_id = md.value("template_id", "");
  c.metadata.option_set_id = md.value("option_set_id", "");
  c.metadata.clause_id = md.value("clause_id", "");
  c.metadata.example_set_ids = md.value("example_set_ids", std::vector<std::string>{});
  return c;
}

/// Substitutes the option block, clause text and (when the body asks for
/// it) the question text. Inserted text is never rescanned for slots.
inline RenderedConversation render(const PromptTemplate& tmpl, const OptionSet& options, const Clause& clause,
                                   const Question* question = nullptr) {
  const auto pieces = detail::tokenize_template(tmpl.body, tmpl.id);
  if (detail::count_slot(pieces, kOptionsSlot) != 1 || detail::count_slot(pieces, kClauseSlot) != 1) {
    throw Error(ErrorKind::placeholder,
                "template " + tmpl.id + ": {{Options}} and {{Clause}} must each appear exactly once");
  }
  const bool needs_question = detail::count_slot(pieces, kQuestionSlot) > 0;
  if (needs_question && question == nullptr) {
    throw Error(ErrorKind::placeholder, "template " + tmpl.id + " uses {{Question}} but no question was given");
  }
  const auto option_block = render_options(options, tmpl.numbering_style);
  std::string content;
  for (const auto& p : pieces) {
    if (!p.is_slot) {
      content += p.text;
    } else if (p.text == kOptionsSlot) {
      content += option_block;
    } else if (p.text == kClauseSlot) {
      content += clause.text;
    } else {
      content += question->text;
    }
  }
  RenderedConversation conv;
  conv.messages.push_back({Role::user, std::move(content)});
  conv.metadata.template_id = tmpl.id;
  conv.metadata.option_set_id = options.id;
  conv.metadata.clause_id = clause.id;
  return conv;
}

inline RenderedConversation render(const PromptTemplate& tmpl, const OptionSet& options, const Clause& clause,
                                   const std::optional<Question>& question) {
  return render(tmpl, options, clause, question ? &*question : nullptr);
}

// ---------------------------------------------------------------------------
// In-context examples

struct Example {
  std::string clause_id;
  std::set<std::string> answer_option_ids;

  bool operator==(const Example&) const = default;
};

struct ExampleSet {
  std::string id;
  std::vector<Example> examples;

  bool operator==(const ExampleSet&) const = default;
};

inline ExampleSet example_set_from_json(const nlohmann::json& j) {
  ExampleSet set;
  set.id = j.at("id").get<std::string>();
  for (const auto& e : j.at("examples")) {
    Example ex;
    ex.clause_id = e.at("clause_id").get<std::string>();
    for (const auto& id : e.at("answer_option_ids")) ex.answer_option_ids.insert(id.get<std::string>());
    set.examples.push_back(std::move(ex));
  }
  return set;
}

inline nlohmann::json to_json(const ExampleSet& set) {
  nlohmann::json examples = nlohmann::json::array();
  for (const auto& e : set.examples) {
    examples.push_back({{"clause_id", e.clause_id}, {"answer_option_ids", e.answer_option_ids}});
  }
  return {{"id", set.id}, {"examples", std::move(examples)}};
}

inline ExampleSet load_example_set(const std::filesystem::path& path) {
  try {
    return example_set_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::parse, path.string() + ": " + e.what());
  }
}

/// Validates an example set against a corpus and option set.
inline void validate(const ExampleSet& set, const Dataset& corpus, const OptionSet& options, QuestionMode mode) {
  for (const auto& e : set.examples) {
    if (!corpus.find_clause(e.clause_id)) {
      throw Error(ErrorKind::validation, "example set " + set.id + " references unknown clause " + e.clause_id);
    }
    if (e.answer_option_ids.empty()) {
      throw Error(ErrorKind::validation, "example set " + set.id + ": clause " + e.clause_id + " has no answer");
    }
    if (mode == QuestionMode::single_select && e.answer_option_ids.size() != 1) {
      throw Error(ErrorKind::validation,
                  "example set " + set.id + ": single-select example " + e.clause_id + " must have one answer");
    }
    for (const auto& id : e.answer_option_ids) {
      if (!options.contains(id)) {
        throw Error(ErrorKind::validation, "example set " + set.id + ": unknown option id " + id);
      }
    }
  }
}

// How seeded assistant turns spell the gold answer.
enum class ExampleAnswerStyle { option_text, ordinal };

inline std::string example_answer(const Example& ex, const OptionSet& options, ExampleAnswerStyle style,
                                  NumberingStyle numbering) {
  std::vector<const AnswerOption*> chosen;
  for (const auto& id : ex.answer_option_ids) {
    const auto* o = options.by_id(id);
    if (!o) throw Error(ErrorKind::validation, "example answer references unknown option id " + id);
    chosen.push_back(o);
  }
  std::sort(chosen.begin(), chosen.end(),
            [](const AnswerOption* a, const AnswerOption* b) { return a->ordinal < b->ordinal; });
  std::string out;
  for (const auto* o : chosen) {
    if (!out.empty()) out += '\n';
    out += style == ExampleAnswerStyle::option_text ? o->text : format_ordinal(o->ordinal, numbering);
  }
  return out;
}

/// Prepends one user/assistant pair per example (in declared order) ahead of
/// the conversation's final user message.
inline RenderedConversation seed_with_examples(const RenderedConversation& conversation,
                                               const std::vector<ExampleSet>& example_sets,
                                               const PromptTemplate& tmpl, const OptionSet& options,
                                               const Dataset& corpus, const Question* question = nullptr,
                                               ExampleAnswerStyle style = ExampleAnswerStyle::option_text) {
  if (conversation.messages.empty() || conversation.messages.back().role != Role::user) {
    throw Error(ErrorKind::validation, "conversation must end with a user message");
  }
  if (example_sets.empty()) return conversation;

  RenderedConversation out;
  out.metadata = conversation.metadata;
  // any turns before the final user message stay in front of the examples
  out.messages.assign(conversation.messages.begin(), conversation.messages.end() - 1);
  for (const auto& set : example_sets) {
    for (const auto& ex : set.examples) {
      const Clause* clause = corpus.find_clause(ex.clause_id);
      if (!clause) {
        throw Error(ErrorKind::validation, "example set " + set.id + " references unknown clause " + ex.clause_id);
      }
      auto turn = render(tmpl, options, *clause, question);
      out.messages.push_back(std::move(turn.messages.back()));
      out.messages.push_back({Role::assistant, example_answer(ex, options, style, tmpl.numbering_style)});
    }
    out.metadata.example_set_ids.push_back(set.id);
  }
  out.messages.push_back(conversation.messages.back());
  return out;
}

}  // namespace caf
